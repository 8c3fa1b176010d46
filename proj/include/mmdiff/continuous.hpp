#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "mmdiff/rng.hpp"
#include "mmdiff/schedules.hpp"

namespace mmdiff {

class SingularTimeError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// x_t = mean_coef(t) x0 + std(t) eps.
std::vector<double> sample_forward_c(const std::vector<double>& x0, double t, const ContinuousSchedule& sched,
                                     Rng& rng);

// grad log p_t(x_t | x0) = -(x_t - mean_coef x0) / std^2. Throws at t = 0.
std::vector<double> cond_score_c(const std::vector<double>& x0, const std::vector<double>& xt, double t,
                                 const ContinuousSchedule& sched);

// beta_t |score - cond_score_c|^2.
double dsm_loss_c(const std::vector<double>& score, const std::vector<double>& x0, const std::vector<double>& xt,
                  double t, const ContinuousSchedule& sched);

// Reverse-time Euler-Maruyama step with dt < 0:
//   x + (beta x + 2 beta score) |dt| + sqrt(2 beta |dt|) eps.
std::vector<double> em_step(const std::vector<double>& x, double t, double dt, const std::vector<double>& score,
                            const ContinuousSchedule& sched, Rng& rng);

// Score of the state at a given time, for any flat layout the caller chooses.
using ScoreFn = std::function<std::vector<double>(const std::vector<double>& x, double t)>;

// Probability-flow velocity -beta x - beta score.
std::vector<double> flow_velocity(const std::vector<double>& x, const std::vector<double>& score, double beta);

// Deterministic Heun step along the probability-flow ODE with dt < 0. The
// corrector evaluates beta and the score at t + dt.
std::vector<double> heun_step(const std::vector<double>& x, double t, double dt, const ScoreFn& score_fn,
                              const ContinuousSchedule& sched);

}  // namespace mmdiff
