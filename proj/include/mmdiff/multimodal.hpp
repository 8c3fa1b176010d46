#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmdiff/autodiff.hpp"
#include "mmdiff/model.hpp"
#include "mmdiff/rng.hpp"
#include "mmdiff/schedules.hpp"
#include "mmdiff/score_net.hpp"

namespace mmdiff {

struct ProductState {
  std::vector<double> x;
  std::vector<int> y;
  double t = 0.0;
  double s = 0.0;
};

// Independent noising of both modalities at their own clocks.
ProductState sample_forward_joint(const std::vector<double>& x0, const std::vector<int>& y0, double t, double s,
                                  const Layout& layout, const Schedules& sched, Rng& rng);

// Training clocks: t, s ~ U(t_min, 1) independently, each replaced by 0 with
// its own probability so clean-condition modes are trained.
struct TimeDraw {
  double t_min = 1e-3;
  double p_zero_t = 0.1;
  double p_zero_s = 0.1;
};

struct NoisedBatch {
  StateBatch state;
  std::vector<double> x0;
  std::vector<int> y0;
};

// Rows of (x0, y0) with freshly drawn clocks and noise.
NoisedBatch make_noised_batch(const std::vector<double>& x0, const std::vector<int>& y0, std::size_t n,
                              const Layout& layout, const Schedules& sched, const TimeDraw& draw, Rng& rng);
// Same with caller-fixed clocks per row.
NoisedBatch noise_batch_at(const std::vector<double>& x0, const std::vector<int>& y0, const std::vector<double>& t,
                           const std::vector<double>& s, const Layout& layout, const Schedules& sched, Rng& rng);

// Mean over rows of beta_t |s_theta - target|^2 + lambda_disc w(s) CE on masked
// positions. Rows with t = 0 (s = 0) contribute no continuous (discrete) term.
Var gdsm_loss_vars(Tape& tape, const NetOutputVars& out, const NoisedBatch& batch, const Layout& layout,
                   const Schedules& sched, double lambda_disc);

// Value of the loss for any model on a prepared batch.
double gdsm_loss_on(const ScoreModel& model, const NoisedBatch& batch, const Schedules& sched, double lambda_disc);
// Draws clocks and noise for the rows, then evaluates.
double gdsm_loss(const ScoreModel& model, const std::vector<double>& x0, const std::vector<int>& y0, std::size_t n,
                 const Schedules& sched, double lambda_disc, const TimeDraw& draw, Rng& rng);

struct GuidanceSpec {
  double omega = 1.0;
  double interval_lo = 0.3;
  double interval_hi = 0.8;
  double condition_noise = 0.77;

  // omega inside the interval, 1 outside.
  double omega_at(double u) const { return (u >= interval_lo && u <= interval_hi) ? omega : 1.0; }
  void validate() const;
};

// Conditional continuous score with noisy guidance:
//   omega s(x, y_cond, t, s_cond) + (1 - omega) s(x, y_noisy, t, sigma),
// y_noisy masking y_cond from s_cond forward to sigma. omega = 1 returns the
// conditional branch and draws nothing. batch carries (x_t, y_cond, t, s_cond).
std::vector<double> guided_score_c(const ScoreModel& model, const StateBatch& batch, double omega, double sigma,
                                   const Schedules& sched, Rng& rng);

// Discrete analogue: logits omega l(x_cond, y, t_cond, s) + (1 - omega) l(x_noisy, y, sigma, s)
// with x_noisy the continuous condition pushed forward from t_cond to sigma.
std::vector<double> guided_logits_d(const ScoreModel& model, const StateBatch& batch, double omega, double sigma,
                                    const Schedules& sched, Rng& rng);

// Re-noising helpers used by guidance.
std::vector<int> remask_forward(const std::vector<int>& y, const Layout& layout, double s_from, double s_to,
                                const DiscreteSchedule& sched, Rng& rng);
std::vector<double> renoise_forward(const std::vector<double>& x, double t_from, double t_to,
                                    const ContinuousSchedule& sched, Rng& rng);

// Monotone maps from the simulation clock u to modality clocks (t, s).
struct TimeCoupling {
  enum class Kind { synchronous, staged_cont_first, staged_disc_first, custom };

  Kind kind = Kind::synchronous;
  // custom: knots in u with matching alpha values, u strictly increasing from 0 to 1.
  std::vector<double> knots;
  std::vector<double> alpha_cont;
  std::vector<double> alpha_disc;

  static TimeCoupling synchronous() { return {}; }
  static TimeCoupling staged_disc_first() { return {Kind::staged_disc_first, {}, {}, {}}; }
  static TimeCoupling staged_cont_first() { return {Kind::staged_cont_first, {}, {}, {}}; }
  static TimeCoupling custom(std::vector<double> knots, std::vector<double> alpha_cont, std::vector<double> alpha_disc);

  double cont_time(double u) const;
  double disc_time(double u) const;
  void validate() const;
};

std::string coupling_name(TimeCoupling::Kind k);
TimeCoupling parse_coupling(const std::string& name);

enum class Integrator { heun, euler_maruyama };

struct SamplerSnapshot {
  int step = 0;            // 1-based count of completed steps
  double u = 0.0;          // simulation clock after the step
  double t = 0.0;
  double s = 0.0;
  std::size_t offset = 0;  // first chain index held in `state`
  const StateBatch* state = nullptr;
};

struct SamplerConfig {
  int steps = 50;
  GuidanceSpec guidance{5.0, 0.3, 0.8, 0.77};
  double early_stop = 1e-5;
  Integrator integrator = Integrator::heun;
  // Joint sampler only: noisy guidance with sigma = min(1, clock + offset),
  // or a fixed sigma when joint_fixed_sigma > 0.
  bool joint_guidance = false;
  double joint_sigma_offset = 0.2;
  double joint_fixed_sigma = 0.0;
  std::size_t chunk = 1000;
  std::size_t workers = 1;
  // Called after every step for every chunk; may run on several threads for
  // disjoint offsets.
  std::function<void(const SamplerSnapshot&)> observer;

  static SamplerConfig unguided();
  void validate() const;
};

// u_i = 1 - (1 - early_stop) i / N for i = 0..N.
std::vector<double> time_grid(int steps, double early_stop);

struct SampleResult {
  std::size_t n = 0;
  std::vector<double> x;
  std::vector<int> y;
};

// Labels given continuous conditions (n rows of x_cond at clock t_cond).
SampleResult sample_cond_d_given_c(const ScoreModel& model, const std::vector<double>& x_cond, std::size_t n,
                                   double t_cond, const Schedules& sched, const SamplerConfig& config,
                                   std::uint64_t seed);
// Continuous values given token conditions (n rows of y_cond at clock s_cond).
SampleResult sample_cond_c_given_d(const ScoreModel& model, const std::vector<int>& y_cond, std::size_t n,
                                   double s_cond, const Schedules& sched, const SamplerConfig& config,
                                   std::uint64_t seed);
SampleResult sample_joint(const ScoreModel& model, const TimeCoupling& coupling, std::size_t n,
                          const Schedules& sched, const SamplerConfig& config, std::uint64_t seed);

// Runs fn(chunk_index, begin, end) over [0, n) in chunks, on up to `workers`
// threads. Results are independent of the worker count.
void for_each_chunk(std::size_t n, std::size_t chunk, std::size_t workers,
                    const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

}  // namespace mmdiff
