#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmdiff/discrete.hpp"
#include "mmdiff/model.hpp"
#include "mmdiff/multimodal.hpp"
#include "mmdiff/schedules.hpp"

namespace mmdiff {

// Label-conditioned isotropic Gaussian mixture: y ~ priors, x | y = k ~ N(m_k, var_k I).
struct ToyJointSpec {
  std::size_t dim = 1;
  std::vector<double> priors;
  std::vector<std::vector<double>> means;
  std::vector<double> vars;

  std::size_t labels() const { return priors.size(); }
  Layout layout() const { return {dim, {static_cast<int>(priors.size())}}; }
  void validate() const;

  // Three labels on the line: priors 0.3/0.5/0.2, means -2/0.5/3, variance 0.25.
  static ToyJointSpec default_1d();
};

// p(x_t, y_s) at clocks (t, s); y_s ranges over labels plus the mask id K.
double toy_joint_density(const ToyJointSpec& spec, const std::vector<double>& xt, int ys, double t, double s,
                         const Schedules& sched);
// Marginal density of x_t alone.
double toy_x_density(const ToyJointSpec& spec, const std::vector<double>& xt, double t, const Schedules& sched);
// CDF of x_t for dim = 1.
double toy_x_cdf(const ToyJointSpec& spec, double xt, double t, const Schedules& sched);
// log N(x_t; mu_t m_k, (mu_t^2 var_k + std_t^2) I) for every label.
std::vector<double> toy_component_logpdf(const ToyJointSpec& spec, const std::vector<double>& xt, double t,
                                         const Schedules& sched);
// P(y0 = k | x_t).
std::vector<double> toy_posterior(const ToyJointSpec& spec, const std::vector<double>& xt, double t,
                                  const Schedules& sched);

struct ToyScores {
  std::vector<double> cont;    // grad_x log p(x_t, y_s)
  std::vector<double> ratios;  // p(x_t, k) / p(x_t, M) per label; empty when y_s is unmasked
};

// Throws ContractError when ratios are requested at an unmasked y_s.
ToyScores toy_scores(const ToyJointSpec& spec, const std::vector<double>& xt, int ys, double t, double s,
                     const Schedules& sched, bool want_ratios = true);

// Exact scores for the toy: continuous score from the joint density and
// logits log P(y0 = k | x_t), which yield the exact ratios through the
// masked-score factorization.
class ToyOracleModel : public ScoreModel {
 public:
  ToyOracleModel(ToyJointSpec spec, Schedules sched);
  const Layout& layout() const override { return layout_; }
  OutputBatch evaluate(const StateBatch& batch) const override;
  const ToyJointSpec& spec() const { return spec_; }

 private:
  ToyJointSpec spec_;
  Schedules sched_;
  Layout layout_;
};

// Oracle plus smooth random perturbations of both heads, scaled by eps.
class PerturbedModel : public ScoreModel {
 public:
  PerturbedModel(const ScoreModel& base, double eps, std::uint64_t seed);
  const Layout& layout() const override { return base_.layout(); }
  OutputBatch evaluate(const StateBatch& batch) const override;

 private:
  const ScoreModel& base_;
  double eps_;
  std::vector<double> coef_;
};

// Weighted product grid over clocks; atoms at 0 are allowed.
struct QuadGrid {
  std::vector<double> t, t_w, s, s_w;
  std::size_t x_points = 400;
  double x_half_width = 0.0;  // 0 picks a width from the spec

  // 8 x 8 midpoints on [0.05, 0.95]^2, equal weights.
  static QuadGrid standard();
  // n midpoints on [lo, 1] per clock plus an atom of mass p_zero at 0.
  static QuadGrid with_atoms(std::size_t n, double lo, double p_zero);
};

// Explicit objective: sum over clocks of E_p[phi_X + phi_Y] with the exact
// marginal and the model's scores. Requires dim = 1.
double gesm_quadrature(const ToyJointSpec& spec, const ScoreModel& model, const Schedules& sched,
                       const QuadGrid& grid);
// Denoising objective with conditional targets, integrated in closed form
// over x0 and by quadrature over x_t.
double gdsm_quadrature(const ToyJointSpec& spec, const ScoreModel& model, const Schedules& sched,
                       const QuadGrid& grid, double lambda_disc = 1.0);
// Expectation of the cross-entropy training loss (gdsm_loss) over the grid;
// differs from gdsm_quadrature by a model-independent constant.
double expected_training_loss(const ToyJointSpec& spec, const ScoreModel& model, const Schedules& sched,
                              const QuadGrid& grid, double lambda_disc = 1.0);

// Score-matching operator of a pure-jump generator on a positive function
// f(t, .): (A f) / f - A log f with A = d_t + L and L g(x) = sum_y q(y, x) (g(y) - g(x)).
// With include_time the d_t parts use central differences of step h.
std::vector<double> jump_phi(const RateMatrix& q, const std::function<std::vector<double>(double)>& f, double t,
                             bool include_time, double h = 1e-5);
// sum_y q(y, x) (r - log r - 1) with r = f(y) / f(x).
std::vector<double> jump_phi_bregman(const RateMatrix& q, const std::vector<double>& f);

struct CheckpointReport {
  int step = 0;
  double t = 0.0;
  double s = 0.0;
  double ks_statistic = 0.0;
  double ks_p = 1.0;
  double chi2_statistic = 0.0;
  double chi2_p = 1.0;
  double mask_fraction = 0.0;
  double expected_mask_fraction = 0.0;
};

struct ReversalReport {
  std::string coupling;
  std::size_t chains = 0;
  std::vector<CheckpointReport> checkpoints;
  bool passed = false;
  double threshold = 1e-3;
};

struct ReversalOptions {
  std::size_t chains = 10000;
  int steps = 500;
  Integrator integrator = Integrator::euler_maruyama;
  std::size_t num_checkpoints = 5;
  // Simulation clocks to inspect; empty picks evenly spaced ones (offset by
  // half a spacing for staged couplings) with the final state last.
  std::vector<double> checkpoints_u;
  double threshold = 1e-3;
  std::uint64_t seed = 1;
};

// Runs the joint sampler with oracle scores and compares backward marginals
// with the forward ones at evenly spaced checkpoints (the last one final).
ReversalReport reversal_check(const ToyJointSpec& spec, const Schedules& sched, const TimeCoupling& coupling,
                              const ReversalOptions& options);

}  // namespace mmdiff
