#pragma once

#include <functional>
#include <vector>

namespace mmdiff {

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

struct Chi2Result {
  double statistic = 0.0;
  int dof = 0;
  double p_value = 1.0;
};

// Kolmogorov survival function Q(lambda) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2).
double kolmogorov_q(double lambda);

KsResult ks_one_sample(std::vector<double> samples, const std::function<double(double)>& cdf);
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);
// Largest gap between empirical CDFs without the p-value.
double ks_distance(std::vector<double> a, std::vector<double> b);

// Pearson goodness of fit. Cells with zero expected mass must be empty and
// are skipped.
Chi2Result chi2_gof(const std::vector<double>& observed, const std::vector<double>& expected_probs);

double total_variation(const std::vector<double>& p, const std::vector<double>& q);
std::vector<double> normalize(const std::vector<double>& counts);

double mean_of(const std::vector<double>& v);
double variance_of(const std::vector<double>& v);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

double normal_cdf(double x);
double normal_quantile(double p);

}  // namespace mmdiff
