#include "mmdiff/so3.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mmdiff/discrete.hpp"
#include "mmdiff/model.hpp"
#include "mmdiff/score_net.hpp"
#include "mmdiff/train.hpp"

namespace mmdiff {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoPi = 2.0 * kPi;
// Below this angle the rotation is treated as the identity.
constexpr double kTinyAngle = 1e-12;
// Image sums are used below this diffusion time.
constexpr double kImagesBelow = 1.0;
constexpr int kImages = 3;

}  // namespace

Mat3 hat(const Vec3& v) {
  Mat3 k;
  k << 0.0, -v(2), v(1), v(2), 0.0, -v(0), -v(1), v(0), 0.0;
  return k;
}

Vec3 vee(const Mat3& k) { return Vec3(k(2, 1) - k(1, 2), k(0, 2) - k(2, 0), k(1, 0) - k(0, 1)) * 0.5; }

Mat3 so3_exp(const Vec3& v) {
  const double th = v.norm();
  const Mat3 k = hat(v);
  if (th < 1e-8) return Mat3::Identity() + k + 0.5 * k * k;
  return Mat3::Identity() + (std::sin(th) / th) * k + ((1.0 - std::cos(th)) / (th * th)) * k * k;
}

double rotation_angle(const Mat3& r) {
  // vee(R - R^T) = 2 sin(theta) axis; atan2 keeps precision at both ends.
  const double c = 0.5 * (r.trace() - 1.0);
  const double s = 0.5 * vee(r - r.transpose()).norm();
  return std::atan2(s, c);
}

Vec3 so3_log(const Mat3& r) {
  const double th = rotation_angle(r);
  const Vec3 w = vee(r - r.transpose());
  if (th < 1e-8) return 0.5 * w;
  if (th < kPi - 1e-4) return (th / (2.0 * std::sin(th))) * w;
  // Near pi: axis from the symmetric part, sign from the skew part.
  const Mat3 b = 0.5 * (0.5 * (r + r.transpose()) + Mat3::Identity());
  int i = 0;
  b.diagonal().maxCoeff(&i);
  Vec3 axis = b.col(i) / std::sqrt(std::max(b(i, i), 1e-300));
  axis.normalize();
  if (axis.dot(w) < 0.0) axis = -axis;
  return th * axis;
}

double geodesic_distance(const Mat3& a, const Mat3& b) { return rotation_angle(a.transpose() * b); }

SO3Point SO3Point::from_rotvec(const Vec3& v) {
  SO3Point p;
  double th = v.norm();
  if (th < kTinyAngle) return p;
  Vec3 axis = v / th;
  th = std::fmod(th, kTwoPi);
  if (th > kPi) {
    th = kTwoPi - th;
    axis = -axis;
  }
  p.axis = axis;
  p.angle = th;
  return p;
}

bool SO3Point::valid(double tol) const {
  return std::abs(axis.norm() - 1.0) <= tol && angle >= 0.0 && angle <= kPi && std::isfinite(angle);
}

Mat3 orthonormalize(const Mat3& r) { return so3_exp(so3_log(r)); }

int heat_kernel_order(double t) {
  if (!(t > 0.0)) throw DomainError("heat kernel needs t > 0");
  return std::max(10, static_cast<int>(std::ceil(6.0 / std::sqrt(t))));
}

double igso3_f_series(double theta, double t, int order) {
  if (!(t > 0.0)) throw DomainError("heat kernel needs t > 0");
  const int L = order > 0 ? order : heat_kernel_order(t);
  const double half = std::sin(0.5 * theta);
  double f = 0.0;
  for (int l = 0; l <= L; ++l) {
    const double n = l + 0.5;
    const double chi = std::abs(half) < 1e-10 ? 2.0 * n : std::sin(n * theta) / half;
    f += (2.0 * l + 1.0) * std::exp(-l * (l + 1.0) * t / 2.0) * chi;
  }
  return f;
}

namespace {

// e^{-theta^2 / 2t} factored out of the image sum:
//   g = e^{-theta^2/2t} (theta + r),  r = sum_{k != 0} (-1)^k (theta + 2 pi k) E_k.
struct ImageTerms {
  double r = 0.0;
  double dnum = 0.0;  // sum_{k != 0} (-1)^k E_k (-theta (theta + 2 pi k)^2 / t - 2 pi k)
};

ImageTerms image_terms(double theta, double t) {
  ImageTerms it;
  for (int k = -kImages; k <= kImages; ++k) {
    if (k == 0) continue;
    const double a = theta + kTwoPi * k;
    const double e = std::exp(-(a * a - theta * theta) / (2.0 * t));
    const double sgn = (k % 2 == 0) ? 1.0 : -1.0;
    it.r += sgn * a * e;
    it.dnum += sgn * e * (-theta * a * a / t - kTwoPi * k);
  }
  return it;
}

// 1/theta - cot(theta/2)/2.
double inv_minus_halfcot(double theta) {
  if (theta < 1e-2) {
    const double t2 = theta * theta;
    return theta / 12.0 + theta * t2 / 720.0 + theta * t2 * t2 / 30240.0;
  }
  return 1.0 / theta - 0.5 / std::tan(0.5 * theta);
}

double log_f_images(double theta, double t) {
  const double th = std::max(theta, 1e-10);
  const ImageTerms it = image_terms(th, t);
  // theta / sin(theta/2) stays finite at 0.
  const double ratio = (th + it.r) / std::sin(0.5 * th);
  return t / 8.0 + 0.5 * std::log(kTwoPi / t) - std::log(t) - th * th / (2.0 * t) + std::log(ratio);
}

}  // namespace

double igso3_f_images(double theta, double t) {
  if (!(t > 0.0)) throw DomainError("heat kernel needs t > 0");
  return std::exp(log_f_images(theta, t));
}

double igso3_f(double theta, double t) {
  return t < kImagesBelow ? igso3_f_images(theta, t) : igso3_f_series(theta, t);
}

double igso3_log_f(double theta, double t) {
  if (!(t > 0.0)) throw DomainError("heat kernel needs t > 0");
  return t < kImagesBelow ? log_f_images(theta, t) : std::log(igso3_f_series(theta, t));
}

double igso3_dlog_f(double theta, double t) {
  if (!(t > 0.0)) throw DomainError("heat kernel needs t > 0");
  if (theta < kTinyAngle) return 0.0;
  if (t < kImagesBelow) {
    const ImageTerms it = image_terms(theta, t);
    const double num = -theta * theta * theta / t + it.dnum;
    const double den = theta * (theta + it.r);
    return num / den + inv_minus_halfcot(theta);
  }
  const int L = heat_kernel_order(t);
  if (theta < 1e-3) {
    // f = f0 + f2 theta^2 + O(theta^4).
    double f0 = 0.0, f2 = 0.0;
    for (int l = 0; l <= L; ++l) {
      const double n = l + 0.5, c = (2.0 * l + 1.0) * std::exp(-l * (l + 1.0) * t / 2.0);
      f0 += c * 2.0 * n;
      f2 += c * 2.0 * n * (1.0 / 24.0 - n * n / 6.0);
    }
    return 2.0 * f2 * theta / f0;
  }
  const double sh = std::sin(0.5 * theta), ch = std::cos(0.5 * theta);
  double f = 0.0, df = 0.0;
  for (int l = 0; l <= L; ++l) {
    const double n = l + 0.5, c = (2.0 * l + 1.0) * std::exp(-l * (l + 1.0) * t / 2.0);
    const double sn = std::sin(n * theta), cn = std::cos(n * theta);
    f += c * sn / sh;
    df += c * (n * cn * sh - 0.5 * sn * ch) / (sh * sh);
  }
  return df / f;
}

double igso3_angle_density(double theta, double t, int order) {
  if (!(theta >= 0.0 && theta <= kPi)) throw DomainError("angle must lie in [0, pi]");
  const double haar = (1.0 - std::cos(theta)) / kPi;
  const double f = order > 0 ? igso3_f_series(theta, t, order) : igso3_f(theta, t);
  return haar * f;
}

double igso3_angle_cdf(double theta, double t) {
  if (!(t > 0.0)) throw DomainError("heat kernel needs t > 0");
  theta = std::clamp(theta, 0.0, kPi);
  const int L = heat_kernel_order(t);
  // (1 - cos) sin((l + 1/2) phi) / sin(phi / 2) = cos(l phi) - cos((l + 1) phi), times 1/pi.
  double acc = theta - std::sin(theta);
  for (int l = 1; l <= L; ++l) {
    const double c = (2.0 * l + 1.0) * std::exp(-l * (l + 1.0) * t / 2.0);
    acc += c * (std::sin(l * theta) / l - std::sin((l + 1) * theta) / (l + 1));
  }
  return acc / kPi;
}

double sample_igso3_angle(double t, Rng& rng) {
  if (t <= 0.0) return 0.0;
  constexpr int M = 512;
  const double hi = t < 0.5 ? std::min(kPi, 12.0 * std::sqrt(t)) : kPi;
  const double h = hi / M;
  double cdf[M + 1];
  double prev = 0.0;
  cdf[0] = 0.0;
  for (int i = 1; i <= M; ++i) {
    const double d = igso3_angle_density(i * h, t);
    cdf[i] = cdf[i - 1] + 0.5 * h * (prev + d);
    prev = d;
  }
  const double u = rng.uniform() * cdf[M];
  const int j = static_cast<int>(std::upper_bound(cdf, cdf + M + 1, u) - cdf);
  const int i = std::clamp(j, 1, M);
  const double w = (u - cdf[i - 1]) / std::max(cdf[i] - cdf[i - 1], 1e-300);
  return std::clamp((i - 1 + w) * h, 0.0, kPi);
}

Vec3 random_unit_vector(Rng& rng) {
  Vec3 v;
  do {
    v = Vec3(rng.normal(), rng.normal(), rng.normal());
  } while (v.norm() < 1e-12);
  return v.normalized();
}

Mat3 random_rotation(Rng& rng) {
  Eigen::Vector4d q;
  do {
    q = Eigen::Vector4d(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  } while (q.norm() < 1e-12);
  q.normalize();
  return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
}

Mat3 so3_forward(const Mat3& x0, double t, Rng& rng) {
  if (t < 0.0) throw DomainError("forward time must be >= 0");
  if (t == 0.0) return x0;
  const Vec3 axis = random_unit_vector(rng);
  const double angle = sample_igso3_angle(t, rng);
  return x0 * so3_exp(angle * axis);
}

Vec3 so3_cond_score(const Mat3& x0, const Mat3& xt, double t) {
  if (!(t > 0.0)) throw DomainError("score needs t > 0");
  const Vec3 v = so3_log(x0.transpose() * xt);
  const double th = v.norm();
  if (th < 1e-9) return Vec3::Zero();
  return igso3_dlog_f(th, t) * (v / th);
}

Mat3 geodesic_reverse_step(const Mat3& x, double dt, const Vec3& score, Rng& rng) {
  if (dt > 0.0) throw ContractError("reverse step needs dt <= 0");
  const double a = -dt;
  if (a == 0.0) return x;
  const Vec3 xi(rng.normal(), rng.normal(), rng.normal());
  return orthonormalize(x * so3_exp(score * a + std::sqrt(a) * xi));
}

double sample_von_mises(double mu, double kappa, Rng& rng) {
  if (!(kappa > 0.0)) throw std::invalid_argument("von Mises needs kappa > 0");
  // Best and Fisher (1979).
  const double tau = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
  const double rho = (tau - std::sqrt(2.0 * tau)) / (2.0 * kappa);
  const double r = (1.0 + rho * rho) / (2.0 * rho);
  for (;;) {
    const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
    const double z = std::cos(kPi * u1);
    const double f = (1.0 + r * z) / (r + z);
    const double c = kappa * (r - f);
    if (c * (2.0 - c) - u2 > 0.0 || std::log(c / u2) + 1.0 - c >= 0.0) {
      const double th = (u3 > 0.5 ? 1.0 : -1.0) * std::acos(std::clamp(f, -1.0, 1.0));
      return std::remainder(mu + th, kTwoPi);
    }
  }
}

Vec3 axis_from_latlon(double lat, double lon) {
  return Vec3(std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat));
}

Vec3 So3ToySpec::center_axis(int k) const {
  return axis_from_latlon(center_lat[static_cast<std::size_t>(k)], center_lon[static_cast<std::size_t>(k)]);
}

Mat3 So3ToySpec::center_rotation(int k) const { return so3_exp(angle_mu * center_axis(k)); }

So3ToySpec So3ToySpec::six_modes() {
  So3ToySpec s;
  for (int k = 0; k < 3; ++k) {
    s.center_lat.push_back(0.5);
    s.center_lon.push_back(kTwoPi * k / 3.0);
  }
  for (int k = 0; k < 3; ++k) {
    s.center_lat.push_back(-0.5);
    s.center_lon.push_back(kPi / 3.0 + kTwoPi * k / 3.0);
  }
  return s;
}

std::vector<So3Sample> toy_dataset_so3(const So3ToySpec& spec, std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("toy dataset needs n > 0");
  std::vector<So3Sample> out(n);
  const int K = spec.labels();
  for (auto& smp : out) {
    smp.label = static_cast<int>(rng.below(static_cast<std::size_t>(K)));
    const auto k = static_cast<std::size_t>(smp.label);
    const double lat = spec.center_lat[k] + spec.axis_std * rng.normal();
    const double lon = spec.center_lon[k] + spec.axis_std * rng.normal();
    const double th = sample_von_mises(spec.angle_mu, spec.kappa, rng);
    smp.x = SO3Point::from_rotvec(th * axis_from_latlon(lat, lon));
  }
  return out;
}

int nearest_mode(const So3ToySpec& spec, const Vec3& axis) {
  int best = 0;
  double bd = -2.0;
  for (int k = 0; k < spec.labels(); ++k) {
    const double d = spec.center_axis(k).dot(axis);
    if (d > bd) {
      bd = d;
      best = k;
    }
  }
  return best;
}

double in_cell_rate(const So3ToySpec& spec, const std::vector<So3Sample>& samples) {
  if (samples.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : samples) hit += nearest_mode(spec, s.x.axis) == s.label;
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

double So3Schedule::tau(double u) const {
  if (!(u >= 0.0 && u <= 1.0)) throw DomainError("clock must lie in [0, 1]");
  return tau_min * std::pow(tau_max / tau_min, u);
}

So3Output So3PointMassOracle::evaluate(const So3Batch& b) const {
  const int K = spec_.labels();
  So3Output out;
  out.score.assign(b.n, Vec3::Zero());
  out.logits.assign(b.n * static_cast<std::size_t>(K), 0.0);
  std::vector<double> logw(static_cast<std::size_t>(K));
  std::vector<Vec3> grad(static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < b.n; ++i) {
    const double tau = sched_.tau(b.u[i]);
    const double surv = sched_.disc.coeffs(b.s[i]).survival;
    const bool masked = b.y[i] == K;
    double mx = -1e300;
    for (int k = 0; k < K; ++k) {
      const Vec3 v = so3_log(spec_.center_rotation(k).transpose() * b.x[i]);
      const double th = v.norm();
      const double lf = igso3_log_f(th, tau);
      double lw = lf;
      if (!masked) lw += (b.y[i] == k) ? std::log(surv) : -1e300;
      logw[static_cast<std::size_t>(k)] = lw;
      grad[static_cast<std::size_t>(k)] = th < 1e-9 ? Vec3::Zero() : Vec3(igso3_dlog_f(th, tau) * v / th);
      mx = std::max(mx, lw);
      // x0 posterior from the rotation alone (uniform priors).
      out.logits[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)] = lf;
    }
    double z = 0.0;
    Vec3 g = Vec3::Zero();
    for (int k = 0; k < K; ++k) {
      const double w = std::exp(logw[static_cast<std::size_t>(k)] - mx);
      z += w;
      g += w * grad[static_cast<std::size_t>(k)];
    }
    out.score[i] = g / z;
  }
  return out;
}

namespace {

constexpr std::size_t kSamplerStream = 0x503;
constexpr std::size_t kTrainStream = 0x7a3;

constexpr std::size_t kRotFeatures = 9;

std::size_t input_dim(const So3NetConfig& c) {
  return kRotFeatures + 2 * c.time_embed + static_cast<std::size_t>(c.labels) + 1;
}

Tensor input_tensor(const So3NetConfig& c, const So3Batch& b) {
  const std::size_t D = input_dim(c);
  Tensor in(b.n, D);
  for (std::size_t i = 0; i < b.n; ++i) {
    double* row = &in.data[i * D];
    for (int r = 0; r < 3; ++r)
      for (int q = 0; q < 3; ++q) *row++ = b.x[i](r, q);
    for (double v : time_features(b.u[i], c.time_embed)) *row++ = v;
    for (double v : time_features(b.s[i], c.time_embed)) *row++ = v;
    row[b.y[i]] = 1.0;
  }
  return in;
}

void check_batch(const So3Batch& b, int labels) {
  if (b.x.size() != b.n || b.y.size() != b.n || b.u.size() != b.n || b.s.size() != b.n)
    throw ShapeError("SO(3) batch fields must all have n entries");
  for (std::size_t i = 0; i < b.n; ++i)
    if (b.y[i] < 0 || b.y[i] > labels) throw DomainError("label out of range");
}

}  // namespace

So3Net::So3Net(So3NetConfig config, So3Schedule sched, std::uint64_t seed)
    : config_(config), sched_(sched) {
  if (config_.labels < 1 || config_.hidden == 0 || config_.depth == 0)
    throw std::invalid_argument("SO(3) net needs labels, hidden and depth > 0");
  Rng rng(seed, 0x5031);
  const std::size_t H = config_.hidden;
  std::size_t in = input_dim(config_);
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string n = "h" + std::to_string(l);
    params_.add_glorot(n + ".w", in, H, rng);
    params_.add(n + ".b", Tensor(1, H));
    in = H;
  }
  const std::size_t out = 3 + static_cast<std::size_t>(config_.labels);
  params_.add("out.w", Tensor(H, out));
  params_.add("out.b", Tensor(1, out));
}

So3Net::So3Net(So3NetConfig config, So3Schedule sched, ParameterStore params)
    : So3Net(config, sched, std::uint64_t{0}) {
  if (params.size() != params_.size()) throw ShapeError("SO(3) parameter count does not match the config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != params_[i].name || !params[i].value.same_shape(params_[i].value))
      throw ShapeError("SO(3) parameter " + params[i].name + " does not match the config");
  }
  params_ = std::move(params);
}

So3NetVars So3Net::forward(Tape& tape, const So3Batch& b, bool train) const {
  check_batch(b, config_.labels);
  auto p = [&](const std::string& name) {
    const std::size_t idx = params_.find(name);
    return train ? tape.param(params_, idx) : tape.constant(params_[idx].value);
  };
  Var h = tape.constant(input_tensor(config_, b));
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string n = "h" + std::to_string(l);
    h = silu(matmul(h, p(n + ".w")) + p(n + ".b"));
  }
  const Var raw = matmul(h, p("out.w")) + p("out.b");
  Tensor inv(b.n, 1);
  for (std::size_t i = 0; i < b.n; ++i) inv.data[i] = 1.0 / std::sqrt(sched_.tau(b.u[i]));
  So3NetVars v;
  v.score = slice_cols(raw, 0, 3) * tape.constant(std::move(inv));
  v.logits = slice_cols(raw, 3, static_cast<std::size_t>(config_.labels));
  return v;
}

So3Output So3Net::evaluate(const So3Batch& b) const {
  Tape tape;
  const So3NetVars v = forward(tape, b, false);
  So3Output out;
  out.score.resize(b.n);
  const Tensor& sc = v.score.value();
  for (std::size_t i = 0; i < b.n; ++i) out.score[i] = Vec3(sc(i, 0), sc(i, 1), sc(i, 2));
  out.logits = v.logits.value().data;
  return out;
}

Var so3_loss_vars(Tape& tape, const So3NetVars& v, const So3Batch& b, const std::vector<Mat3>& x0,
                  const std::vector<int>& y0, const So3Schedule& sched, double lambda_disc) {
  if (x0.size() != b.n || y0.size() != b.n) throw ShapeError("clean rows must match the batch");
  const int K = static_cast<int>(v.logits.cols());
  Tensor target(b.n, 3), wc(b.n, 1), wd(b.n, 1);
  for (std::size_t i = 0; i < b.n; ++i) {
    if (b.u[i] > 0.0) {
      const double tau = sched.tau(b.u[i]);
      const Vec3 g = so3_cond_score(x0[i], b.x[i], tau);
      for (int k = 0; k < 3; ++k) target(i, static_cast<std::size_t>(k)) = g(k);
      wc.data[i] = tau;
    }
    if (b.s[i] > 0.0 && b.y[i] == K) wd.data[i] = lambda_disc * sched.disc.unmask_rate(b.s[i]);
  }
  const double inv_n = 1.0 / static_cast<double>(b.n);
  const Var cont = sum(sum_cols(square(v.score - tape.constant(std::move(target)))) * tape.constant(std::move(wc)));
  const Var ce = neg(sum(pick_cols(log_softmax_rows(v.logits), y0) * tape.constant(std::move(wd))));
  return scale(cont + ce, inv_n);
}

namespace {

// Forward-noised training batch for rows idx of the data.
So3Batch noised_batch(const std::vector<Mat3>& x0, const std::vector<int>& y0, const So3Schedule& sched,
                      const So3TrainConfig& cfg, int K, Rng& rng) {
  So3Batch b;
  b.n = x0.size();
  b.x.resize(b.n);
  b.y.resize(b.n);
  b.u.resize(b.n);
  b.s.resize(b.n);
  for (std::size_t i = 0; i < b.n; ++i) {
    double u = rng.uniform();
    if (rng.bernoulli(cfg.p_zero_u)) u = 0.0;
    double s = cfg.s_min + (1.0 - cfg.s_min) * rng.uniform();
    if (rng.bernoulli(cfg.p_zero_s)) s = 0.0;
    b.u[i] = u;
    b.s[i] = s;
    b.x[i] = u > 0.0 ? so3_forward(x0[i], sched.tau(u), rng) : x0[i];
    b.y[i] = (s > 0.0 && rng.bernoulli(sched.disc.mask_prob(s))) ? K : y0[i];
  }
  return b;
}

}  // namespace

double so3_loss_value(const So3Net& net, const So3Batch& batch, const std::vector<Mat3>& x0,
                      const std::vector<int>& y0, double lambda_disc) {
  Tape tape;
  const So3NetVars v = net.forward(tape, batch, false);
  return so3_loss_vars(tape, v, batch, x0, y0, net.schedule(), lambda_disc).value().item();
}

So3TrainResult train_so3(So3Net& net, const std::vector<So3Sample>& data, const So3TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("SO(3) training set is empty");
  if (cfg.batch == 0) throw std::invalid_argument("batch must be > 0");
  const int K = net.labels();
  ParameterStore& params = net.params();
  AdamW opt({cfg.lr, 0.9, 0.999, 0.0, 1e-8});
  So3TrainResult res;
  res.ema = params;
  Rng rng(cfg.seed, kTrainStream);
  std::vector<Mat3> bx(cfg.batch);
  std::vector<int> by(cfg.batch);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const So3Sample& d = data[rng.below(data.size())];
      bx[i] = d.x.matrix();
      by[i] = d.label;
    }
    const So3Batch b = noised_batch(bx, by, net.schedule(), cfg, K, rng);
    Tape tape;
    const Var loss = so3_loss_vars(tape, net.forward(tape, b, true), b, bx, by, net.schedule(), cfg.lambda_disc);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) throw TrainingError("non-finite SO(3) loss at step " + std::to_string(step));
    tape.backward(loss);
    const double lr = cfg.warmup == 0 ? cfg.lr : cfg.lr * std::min(1.0, static_cast<double>(step) / cfg.warmup);
    if (opt.step(params, tape.param_grads(params), lr).applied) {
      const double k = ema_decay_at(cfg.ema_decay, step - 1);
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& e = res.ema[p].value.data;
        const auto& w = params[p].value.data;
        for (std::size_t j = 0; j < e.size(); ++j) e[j] = k * e[j] + (1.0 - k) * w[j];
      }
    }
    res.losses.push_back(lv);
  }
  return res;
}

namespace {

std::vector<double> clock_grid(int steps) {
  if (steps < 1) throw std::invalid_argument("sampler needs steps >= 1");
  std::vector<double> g(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) g[static_cast<std::size_t>(i)] = 1.0 - static_cast<double>(i) / steps;
  return g;
}

std::vector<double> row_probs(const std::vector<double>& logits, std::size_t i, int K) {
  return softmax(std::vector<double>(logits.begin() + static_cast<std::ptrdiff_t>(i * K),
                                     logits.begin() + static_cast<std::ptrdiff_t>((i + 1) * K)));
}

std::vector<Rng> chain_rngs(std::uint64_t seed, std::size_t n) {
  const Rng base(seed, kSamplerStream);
  std::vector<Rng> r;
  r.reserve(n);
  for (std::size_t i = 0; i < n; ++i) r.push_back(base.split(i));
  return r;
}

std::vector<So3Sample> pack(const std::vector<Mat3>& x, const std::vector<int>& y) {
  std::vector<So3Sample> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = {SO3Point::from_matrix(x[i]), y[i]};
  return out;
}

}  // namespace

std::vector<So3Sample> sample_so3_conditional(const So3Model& model, const std::vector<int>& labels,
                                              const So3Schedule& sched, const So3SamplerConfig& cfg,
                                              std::uint64_t seed) {
  const int K = model.labels();
  const std::size_t n = labels.size();
  for (int y : labels)
    if (y < 0 || y >= K) throw DomainError("conditional label out of range");
  if (cfg.omega != 1.0 && !(cfg.condition_noise > 0.0 && cfg.condition_noise <= 1.0))
    throw ContractError("guidance needs condition noise in (0, 1]");
  std::vector<Rng> rng = chain_rngs(seed, n);
  std::vector<Rng> grng;
  for (const Rng& r : rng) grng.push_back(r.split(0x9d1a));
  const std::vector<double> g = clock_grid(cfg.steps);
  const double mprob = cfg.omega != 1.0 ? sched.disc.mask_prob(cfg.condition_noise) : 0.0;
  So3Batch b;
  b.n = n;
  b.y = labels;
  b.s.assign(n, 0.0);
  b.u.assign(n, 1.0);
  b.x.resize(n);
  for (std::size_t i = 0; i < n; ++i) b.x[i] = random_rotation(rng[i]);
  for (int k = 0; k < cfg.steps; ++k) {
    const double u = g[static_cast<std::size_t>(k)];
    const double dt = sched.tau(g[static_cast<std::size_t>(k) + 1]) - sched.tau(u);
    std::fill(b.u.begin(), b.u.end(), u);
    std::vector<Vec3> score = model.evaluate(b).score;
    if (cfg.omega != 1.0) {
      So3Batch w = b;
      for (std::size_t i = 0; i < n; ++i) {
        if (grng[i].bernoulli(mprob)) w.y[i] = K;
        w.s[i] = cfg.condition_noise;
      }
      const std::vector<Vec3> weak = model.evaluate(w).score;
      for (std::size_t i = 0; i < n; ++i) score[i] = cfg.omega * score[i] + (1.0 - cfg.omega) * weak[i];
    }
    for (std::size_t i = 0; i < n; ++i) b.x[i] = geodesic_reverse_step(b.x[i], dt, score[i], rng[i]);
  }
  return pack(b.x, b.y);
}

std::vector<So3Sample> sample_so3_joint(const So3Model& model, std::size_t n, const So3Schedule& sched,
                                        const So3SamplerConfig& cfg, std::uint64_t seed) {
  const int K = model.labels();
  const Layout L{0, {K}};
  std::vector<Rng> rng = chain_rngs(seed, n);
  const std::vector<double> g = clock_grid(cfg.steps);
  So3Batch b;
  b.n = n;
  b.y.assign(n, K);
  b.x.resize(n);
  for (std::size_t i = 0; i < n; ++i) b.x[i] = random_rotation(rng[i]);
  for (int k = 0; k < cfg.steps; ++k) {
    const double c = g[static_cast<std::size_t>(k)], next = g[static_cast<std::size_t>(k) + 1];
    const double dt = sched.tau(next) - sched.tau(c);
    b.u.assign(n, c);
    b.s.assign(n, c);
    const So3Output o = model.evaluate(b);
    const bool last = k + 1 == cfg.steps;
    for (std::size_t i = 0; i < n; ++i) {
      b.x[i] = geodesic_reverse_step(b.x[i], dt, o.score[i], rng[i]);
      if (b.y[i] == K)
        b.y[i] = tau_leap_step({b.y[i]}, {row_probs(o.logits, i, K)}, L, c, c - next, sched.disc, rng[i], last)[0];
    }
  }
  return pack(b.x, b.y);
}

std::vector<int> sample_so3_labels(const So3Model& model, const std::vector<Mat3>& x, const So3Schedule& sched,
                                   const So3SamplerConfig& cfg, std::uint64_t seed) {
  const int K = model.labels();
  const Layout L{0, {K}};
  const std::size_t n = x.size();
  std::vector<Rng> rng = chain_rngs(seed, n);
  const std::vector<double> g = clock_grid(cfg.steps);
  So3Batch b;
  b.n = n;
  b.x = x;
  b.y.assign(n, K);
  b.u.assign(n, 0.0);
  for (int k = 0; k < cfg.steps; ++k) {
    const double c = g[static_cast<std::size_t>(k)], next = g[static_cast<std::size_t>(k) + 1];
    b.s.assign(n, c);
    const So3Output o = model.evaluate(b);
    const bool last = k + 1 == cfg.steps;
    for (std::size_t i = 0; i < n; ++i)
      if (b.y[i] == K)
        b.y[i] = tau_leap_step({b.y[i]}, {row_probs(o.logits, i, K)}, L, c, c - next, sched.disc, rng[i], last)[0];
  }
  return b.y;
}

}  // namespace mmdiff
