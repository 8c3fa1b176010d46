#include "mmdiff/discrete.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unsupported/Eigen/MatrixFunctions>

namespace mmdiff {

std::vector<int> mask_forward_d(const std::vector<int>& y0, const Layout& layout, double s,
                                const DiscreteSchedule& sched, Rng& rng) {
  if (y0.size() != layout.positions()) {
    throw ShapeError("token sequence of length " + std::to_string(y0.size()) + " for " +
                     std::to_string(layout.positions()) + " positions");
  }
  const double pm = sched.mask_prob(s);
  std::vector<int> out(y0);
  for (std::size_t p = 0; p < y0.size(); ++p) {
    if (y0[p] < 0 || y0[p] >= layout.mask_id(p)) {
      throw ContractError("clean sequence holds token " + std::to_string(y0[p]) + " at position " + std::to_string(p));
    }
    if (rng.uniform() < pm) out[p] = layout.mask_id(p);
  }
  return out;
}

void RateMatrix::validate(double tol) const {
  if (q.rows != q.cols) throw ContractError("rate matrix must be square, got " + q.shape_str());
  for (std::size_t c = 0; c < q.cols; ++c) {
    double col = 0.0;
    for (std::size_t r = 0; r < q.rows; ++r) {
      if (r != c && q(r, c) < 0.0) {
        throw ContractError("negative rate " + std::to_string(q(r, c)) + " at (" + std::to_string(r) + ", " +
                            std::to_string(c) + ")");
      }
      col += q(r, c);
    }
    if (std::abs(col) > tol) {
      throw ContractError("column " + std::to_string(c) + " sums to " + std::to_string(col));
    }
  }
}

RateMatrix mask_generator(std::size_t categories) {
  RateMatrix m{Tensor(categories + 1, categories + 1, 0.0)};
  for (std::size_t k = 0; k < categories; ++k) {
    m.q(k, k) = -1.0;
    m.q(categories, k) = 1.0;
  }
  return m;
}

std::vector<double> propagate(const RateMatrix& q, double scale, const std::vector<double>& p) {
  const std::size_t n = q.states();
  if (n > 64) throw ContractError("exact propagation limited to 64 states, got " + std::to_string(n));
  if (p.size() != n) throw ShapeError("distribution of size " + std::to_string(p.size()) + " for " + std::to_string(n) + " states");
  Eigen::MatrixXd a(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) a(r, c) = scale * q.q(r, c);
  const Eigen::MatrixXd e = a.exp();
  const Eigen::VectorXd out = e * Eigen::Map<const Eigen::VectorXd>(p.data(), n);
  return {out.data(), out.data() + n};
}

std::vector<double> exact_marginal_d(const std::vector<double>& p0, double s, const DiscreteSchedule& sched) {
  if (p0.size() < 2) throw ShapeError("distribution needs at least one category and the mask state");
  return propagate(mask_generator(p0.size() - 1), sched.coeffs(s).sigma_bar, p0);
}

std::vector<double> concrete_score_d(int current_token, int mask_id, const std::vector<double>& x0_probs, double s,
                                     const DiscreteSchedule& sched) {
  if (current_token != mask_id) {
    throw ContractError("concrete score requested at an unmasked position (token " + std::to_string(current_token) +
                        ")");
  }
  if (!(s > 0.0)) throw DomainError("concrete score needs s > 0");
  const double surv = sched.coeffs(s).survival;
  const double pref = surv / sched.mask_prob(s);
  std::vector<double> out(x0_probs.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = pref * x0_probs[k];
  return out;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) z += (p[k] = std::exp(logits[k] - m));
  for (auto& v : p) v /= z;
  return p;
}

double ce_loss_d(const std::vector<std::vector<double>>& logits, const std::vector<int>& y0,
                 const std::vector<int>& ys, const Layout& layout, double s, const DiscreteSchedule& sched) {
  double acc = 0.0;
  bool any = false;
  for (std::size_t p = 0; p < layout.positions(); ++p) {
    if (ys[p] != layout.mask_id(p)) continue;
    any = true;
    const auto& l = logits[p];
    const double m = *std::max_element(l.begin(), l.end());
    double z = 0.0;
    for (double v : l) z += std::exp(v - m);
    acc += -(l[static_cast<std::size_t>(y0[p])] - m - std::log(z));
  }
  return any ? sched.unmask_rate(s) * acc : 0.0;
}

int sample_categorical(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double total = 0.0;
  for (double p : probs) total += p;
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k] / total;
    if (u < acc) return static_cast<int>(k);
  }
  for (std::size_t k = probs.size(); k-- > 0;) {
    if (probs[k] > 0.0) return static_cast<int>(k);
  }
  return static_cast<int>(probs.size()) - 1;
}

std::vector<int> tau_leap_step(const std::vector<int>& ys, const std::vector<std::vector<double>>& x0_probs,
                               const Layout& layout, double s, double ds, const DiscreteSchedule& sched, Rng& rng,
                               bool force_unmask) {
  std::vector<int> out(ys);
  if (ds <= 0.0 && !force_unmask) return out;
  const double prob = force_unmask ? 1.0 : std::min(1.0, sched.unmask_rate(s) * ds);
  for (std::size_t p = 0; p < layout.positions(); ++p) {
    if (ys[p] != layout.mask_id(p)) continue;
    const bool jump = rng.uniform() < prob;
    const int k = sample_categorical(x0_probs[p], rng);
    if (jump) out[p] = k;
  }
  return out;
}

}  // namespace mmdiff
