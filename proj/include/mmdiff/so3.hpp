#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "mmdiff/autodiff.hpp"
#include "mmdiff/rng.hpp"
#include "mmdiff/schedules.hpp"

namespace mmdiff {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// K(v) = a E1 + b E2 + c E3: the cross-product matrix of v = (a, b, c).
Mat3 hat(const Vec3& v);
Vec3 vee(const Mat3& k);
// Rodrigues: exp(K(v)).
Mat3 so3_exp(const Vec3& v);
// Rotation vector axis * angle with angle in [0, pi].
Vec3 so3_log(const Mat3& r);
double rotation_angle(const Mat3& r);
// Angle of a^T b.
double geodesic_distance(const Mat3& a, const Mat3& b);

struct SO3Point {
  Vec3 axis = Vec3(0.0, 0.0, 1.0);
  double angle = 0.0;

  Mat3 matrix() const { return so3_exp(angle * axis); }
  Vec3 rotvec() const { return angle * axis; }
  // Unit axis, angle in [0, pi] (flipping the axis when needed).
  static SO3Point from_rotvec(const Vec3& v);
  static SO3Point from_matrix(const Mat3& r) { return from_rotvec(so3_log(r)); }
  bool valid(double tol = 1e-9) const;
};

// Projects a near-rotation back onto SO(3).
Mat3 orthonormalize(const Mat3& r);

// Heat kernel of Brownian motion with generator Delta / 2, as a function of
// the rotation angle, relative to Haar measure:
//   f(theta, t) = sum_l (2l + 1) exp(-l (l + 1) t / 2) sin((l + 1/2) theta) / sin(theta / 2).
int heat_kernel_order(double t);  // max(10, ceil(6 / sqrt(t)))
double igso3_f_series(double theta, double t, int order = 0);
// The same kernel by Poisson summation over images, exact and fast for small t:
//   f = e^{t/8} sqrt(2 pi / t) / (t sin(theta / 2)) sum_k (-1)^k (theta + 2 pi k) exp(-(theta + 2 pi k)^2 / 2t).
double igso3_f_images(double theta, double t);
// Images below t = 1, series above.
double igso3_f(double theta, double t);
// log f without underflow at small t.
double igso3_log_f(double theta, double t);
double igso3_dlog_f(double theta, double t);
// Angle marginal (1 - cos theta) / pi * f on [0, pi]; order > 0 forces the series.
double igso3_angle_density(double theta, double t, int order = 0);
// Closed-form integral of the series term by term.
double igso3_angle_cdf(double theta, double t);

// Draw by inverting a tabulated CDF of igso3_angle_density.
double sample_igso3_angle(double t, Rng& rng);
Vec3 random_unit_vector(Rng& rng);
Mat3 random_rotation(Rng& rng);  // Haar

// x0 exp(K(axis * angle)) with a uniform axis and an IGSO(3) angle.
Mat3 so3_forward(const Mat3& x0, double t, Rng& rng);
// Riemannian gradient of log p_t(x_t | x0) in the body frame of x_t.
Vec3 so3_cond_score(const Mat3& x0, const Mat3& xt, double t);
// x exp(K(score |dt| + sqrt(|dt|) xi)) for dt <= 0.
Mat3 geodesic_reverse_step(const Mat3& x, double dt, const Vec3& score, Rng& rng);

double sample_von_mises(double mu, double kappa, Rng& rng);
Vec3 axis_from_latlon(double lat, double lon);

// Labeled toy: axis ~ per-label Gaussian in (latitude, longitude), angle ~
// von Mises folded onto [0, pi].
struct So3ToySpec {
  std::vector<double> center_lat;
  std::vector<double> center_lon;
  double axis_std = 0.2;
  double angle_mu = 1.5707963267948966;
  double kappa = 10.0;

  int labels() const { return static_cast<int>(center_lat.size()); }
  Vec3 center_axis(int k) const;
  Mat3 center_rotation(int k) const;  // axis at the mode, angle angle_mu
  // Six modes: latitude +0.5 at longitudes 0, 2pi/3, 4pi/3 and -0.5 at pi/3, pi, 5pi/3.
  static So3ToySpec six_modes();
};

struct So3Sample {
  SO3Point x;
  int label = 0;
};

std::vector<So3Sample> toy_dataset_so3(const So3ToySpec& spec, std::size_t n, Rng& rng);
// Voronoi cell of the axis among the mode centers.
int nearest_mode(const So3ToySpec& spec, const Vec3& axis);
double in_cell_rate(const So3ToySpec& spec, const std::vector<So3Sample>& samples);

// Diffusion time tau(u) = tau_min^(1-u) tau_max^u for the rotation, and the
// masked schedule for the label, both driven by clocks in [0, 1].
struct So3Schedule {
  double tau_min = 1e-3;
  double tau_max = 10.0;
  DiscreteSchedule disc = DiscreteSchedule::loglinear_mask();

  double tau(double u) const;
};

struct So3Batch {
  std::size_t n = 0;
  std::vector<Mat3> x;
  std::vector<int> y;      // label or mask id = labels
  std::vector<double> u;   // rotation clock; 0 means clean
  std::vector<double> s;   // label clock
};

struct So3Output {
  std::vector<Vec3> score;
  std::vector<double> logits;  // n x labels
};

class So3Model {
 public:
  virtual ~So3Model() = default;
  virtual int labels() const = 0;
  virtual So3Output evaluate(const So3Batch& batch) const = 0;
};

// Exact scores when each label's rotations sit at its mode center.
class So3PointMassOracle : public So3Model {
 public:
  So3PointMassOracle(So3ToySpec spec, So3Schedule sched) : spec_(std::move(spec)), sched_(sched) {}
  int labels() const override { return spec_.labels(); }
  So3Output evaluate(const So3Batch& batch) const override;

 private:
  So3ToySpec spec_;
  So3Schedule sched_;
};

struct So3NetConfig {
  int labels = 6;
  std::size_t hidden = 128;
  std::size_t depth = 3;
  std::size_t time_embed = 16;
};

struct So3NetVars {
  Var score;   // n x 3
  Var logits;  // n x labels
};

// MLP on [R (9), time features of u and s, one-hot label]; the score head is
// divided by sqrt(tau).
class So3Net : public So3Model {
 public:
  So3Net(So3NetConfig config, So3Schedule sched, std::uint64_t seed);
  So3Net(So3NetConfig config, So3Schedule sched, ParameterStore params);

  int labels() const override { return config_.labels; }
  So3Output evaluate(const So3Batch& batch) const override;
  So3NetVars forward(Tape& tape, const So3Batch& batch, bool train) const;

  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const So3NetConfig& config() const { return config_; }
  const So3Schedule& schedule() const { return sched_; }

 private:
  So3NetConfig config_;
  So3Schedule sched_;
  ParameterStore params_;
};

struct So3TrainConfig {
  std::size_t steps = 4000;
  std::size_t batch = 256;
  double lr = 1e-3;
  std::size_t warmup = 200;
  double ema_decay = 0.999;
  double lambda_disc = 1.0;
  double p_zero_u = 0.1;
  double p_zero_s = 0.2;
  double s_min = 1e-3;
  std::uint64_t seed = 0;
};

struct So3TrainResult {
  ParameterStore ema;
  std::vector<double> losses;
};

// Per row: tau |score - cond score|^2 (rows with u > 0) plus lambda w(s) CE on a masked label.
Var so3_loss_vars(Tape& tape, const So3NetVars& v, const So3Batch& batch, const std::vector<Mat3>& x0,
                  const std::vector<int>& y0, const So3Schedule& sched, double lambda_disc);
double so3_loss_value(const So3Net& net, const So3Batch& batch, const std::vector<Mat3>& x0,
                      const std::vector<int>& y0, double lambda_disc);
So3TrainResult train_so3(So3Net& net, const std::vector<So3Sample>& data, const So3TrainConfig& cfg);

struct So3SamplerConfig {
  int steps = 200;
  double omega = 4.0;
  double condition_noise = 0.77;
};

// Rotations for given labels: geodesic walk from Haar noise with the label
// clean (s = 0), guided by the label noised to condition_noise.
std::vector<So3Sample> sample_so3_conditional(const So3Model& model, const std::vector<int>& labels,
                                              const So3Schedule& sched, const So3SamplerConfig& cfg,
                                              std::uint64_t seed);
// Rotation and label together on one clock (no guidance).
std::vector<So3Sample> sample_so3_joint(const So3Model& model, std::size_t n, const So3Schedule& sched,
                                        const So3SamplerConfig& cfg, std::uint64_t seed);
// Labels for clean rotations by tau-leaping.
std::vector<int> sample_so3_labels(const So3Model& model, const std::vector<Mat3>& x, const So3Schedule& sched,
                                   const So3SamplerConfig& cfg, std::uint64_t seed);

}  // namespace mmdiff
