#include "mmdiff/continuous.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mmdiff/autodiff.hpp"

namespace mmdiff {

namespace {

void same_size(const std::vector<double>& a, const std::vector<double>& b, const char* what) {
  if (a.size() != b.size()) {
    std::ostringstream msg;
    msg << what << ": sizes " << a.size() << " and " << b.size();
    throw ShapeError(msg.str());
  }
}

}  // namespace

std::vector<double> sample_forward_c(const std::vector<double>& x0, double t, const ContinuousSchedule& sched,
                                     Rng& rng) {
  const auto c = sched.vp_coeffs(t);
  std::vector<double> xt(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) xt[i] = c.mean_coef * x0[i] + c.std * rng.normal();
  return xt;
}

std::vector<double> cond_score_c(const std::vector<double>& x0, const std::vector<double>& xt, double t,
                                 const ContinuousSchedule& sched) {
  same_size(x0, xt, "cond_score_c");
  const auto c = sched.vp_coeffs(t);
  if (!(c.std > 0.0)) throw SingularTimeError("conditional score is singular at t = " + std::to_string(t));
  const double var = c.std * c.std;
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = -(xt[i] - c.mean_coef * x0[i]) / var;
  return out;
}

double dsm_loss_c(const std::vector<double>& score, const std::vector<double>& x0, const std::vector<double>& xt,
                  double t, const ContinuousSchedule& sched) {
  same_size(score, x0, "dsm_loss_c");
  const auto target = cond_score_c(x0, xt, t, sched);
  double acc = 0.0;
  for (std::size_t i = 0; i < score.size(); ++i) acc += (score[i] - target[i]) * (score[i] - target[i]);
  return sched.beta(t) * acc;
}

std::vector<double> em_step(const std::vector<double>& x, double t, double dt, const std::vector<double>& score,
                            const ContinuousSchedule& sched, Rng& rng) {
  same_size(x, score, "em_step");
  if (dt == 0.0) return x;
  const double b = sched.beta(t), h = std::abs(dt), noise = std::sqrt(2.0 * b * h);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + (b * x[i] + 2.0 * b * score[i]) * h + noise * rng.normal();
  return out;
}

std::vector<double> flow_velocity(const std::vector<double>& x, const std::vector<double>& score, double beta) {
  same_size(x, score, "flow_velocity");
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) v[i] = -beta * x[i] - beta * score[i];
  return v;
}

std::vector<double> heun_step(const std::vector<double>& x, double t, double dt, const ScoreFn& score_fn,
                              const ContinuousSchedule& sched) {
  if (dt == 0.0) return x;
  if (t + dt < -1e-12) throw DomainError("heun_step would leave [0, 1]: t + dt = " + std::to_string(t + dt));
  const double tn = std::max(0.0, t + dt);
  const auto v_old = flow_velocity(x, score_fn(x, t), sched.beta(t));
  std::vector<double> xh(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xh[i] = x[i] + v_old[i] * dt;
  const auto v_new = flow_velocity(xh, score_fn(xh, tn), sched.beta(tn));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + 0.5 * (v_old[i] + v_new[i]) * dt;
  return out;
}

}  // namespace mmdiff
