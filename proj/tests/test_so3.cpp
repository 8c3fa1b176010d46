#include <cmath>

#include "doctest.h"
#include "mmdiff/so3.hpp"
#include "mmdiff/stats.hpp"

using namespace mmdiff;

namespace {

constexpr double kPi = 3.14159265358979323846;

double haar_cdf(double th) { return (th - std::sin(th)) / kPi; }

std::vector<double> forward_angles(const Mat3& x0, double t, int n, Rng& rng) {
  std::vector<double> a(static_cast<std::size_t>(n));
  for (auto& v : a) v = geodesic_distance(x0, so3_forward(x0, t, rng));
  return a;
}

bool is_rotation(const Mat3& r, double tol) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

}  // namespace

TEST_CASE("exp and log round trip") {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const Vec3 axis = random_unit_vector(rng);
    const double th = (i == 0) ? 0.0 : (i == 1 ? kPi - 1e-7 : kPi * rng.uniform());
    const Mat3 r = so3_exp(th * axis);
    CHECK(is_rotation(r, 1e-12));
    CHECK(rotation_angle(r) == doctest::Approx(th).epsilon(1e-9).scale(1.0));
    const Vec3 back = so3_log(r);
    CHECK((so3_exp(back) - r).cwiseAbs().maxCoeff() < 1e-9);
    const SO3Point p = SO3Point::from_matrix(r);
    CHECK(p.valid());
  }
  const SO3Point flipped = SO3Point::from_rotvec(Vec3(0.0, 0.0, -(kPi + 0.5)));
  CHECK(flipped.valid());
  CHECK(flipped.angle == doctest::Approx(kPi - 0.5));
  CHECK(flipped.axis(2) == doctest::Approx(1.0));
}

TEST_CASE("kernel series and image sum agree") {
  for (double t : {0.002, 0.01, 0.05, 0.2, 0.5, 0.9, 0.999}) {
    double mx = 0.0, diff = 0.0;
    for (int i = 0; i <= 400; ++i) {
      const double th = kPi * i / 400.0;
      const double a = igso3_f_series(th, t, std::max(heat_kernel_order(t), 400));
      const double b = igso3_f_images(th, t);
      mx = std::max(mx, std::abs(a));
      diff = std::max(diff, std::abs(a - b));
    }
    CHECK(diff <= 1e-9 * mx);
  }
  CHECK(igso3_f(1.0, 0.999) == doctest::Approx(igso3_f(1.0, 1.0)).epsilon(1e-3));
  CHECK(heat_kernel_order(100.0) == 10);
  CHECK(heat_kernel_order(0.01) == 60);
  CHECK_THROWS_AS(igso3_f_series(1.0, 0.0), DomainError);
}

TEST_CASE("angle density integrates to one") {
  for (double t : {1e-3, 0.01, 0.3, 1.0, 5.0, 50.0}) {
    const int M = 20000;
    double I = 0.0;
    for (int i = 0; i < M; ++i) I += igso3_angle_density(kPi * (i + 0.5) / M, t) * kPi / M;
    CHECK(std::abs(I - 1.0) <= 1e-4);
    CHECK(igso3_angle_cdf(kPi, t) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(igso3_angle_cdf(0.0, t) == 0.0);
  }
  // Term-by-term CDF against quadrature of the same series.
  const double t = 0.4;
  double I = 0.0;
  const int M = 20000;
  for (int i = 0; i < M; ++i) I += igso3_angle_density(1.2 * (i + 0.5) / M, t) * 1.2 / M;
  CHECK(igso3_angle_cdf(1.2, t) == doctest::Approx(I).epsilon(1e-7));
}

TEST_CASE("large t approaches Haar, small t concentrates") {
  Rng rng(3);
  std::vector<double> big, small;
  for (int i = 0; i < 10000; ++i) {
    big.push_back(sample_igso3_angle(50.0, rng));
    small.push_back(sample_igso3_angle(0.01, rng));
  }
  CHECK(ks_one_sample(big, haar_cdf).statistic <= 0.02);
  double below = 0.0;
  for (double a : small) below += a < 0.5;
  CHECK(below / 10000.0 >= 0.99);

  std::vector<double> h;
  for (int i = 0; i < 10000; ++i) h.push_back(rotation_angle(random_rotation(rng)));
  CHECK(ks_one_sample(h, haar_cdf).p_value > 0.001);
}

TEST_CASE("angle sampler matches the closed-form CDF") {
  Rng rng(4);
  for (double t : {0.005, 0.3, 2.0}) {
    std::vector<double> a;
    for (int i = 0; i < 10000; ++i) a.push_back(sample_igso3_angle(t, rng));
    CHECK(ks_one_sample(a, [t](double th) { return igso3_angle_cdf(th, t); }).p_value > 0.001);
  }
  CHECK(sample_igso3_angle(0.0, rng) == 0.0);
}

TEST_CASE("forward process") {
  Rng rng(5);
  const Mat3 x0 = random_rotation(rng);
  CHECK(so3_forward(x0, 0.0, rng) == x0);
  CHECK_THROWS_AS(so3_forward(x0, -1.0, rng), DomainError);

  SUBCASE("semigroup") {
    const double t = 0.4;
    std::vector<double> one = forward_angles(x0, t, 5000, rng), two;
    for (int i = 0; i < 5000; ++i) two.push_back(geodesic_distance(x0, so3_forward(so3_forward(x0, t / 2, rng), t / 2, rng)));
    CHECK(ks_two_sample(one, two).p_value > 0.001);
  }
  SUBCASE("left invariance") {
    const double t = 0.25;
    std::vector<double> ai, ar, zi, zr;
    for (int i = 0; i < 5000; ++i) {
      const Mat3 d0 = so3_forward(Mat3::Identity(), t, rng);
      const Mat3 d1 = x0.transpose() * so3_forward(x0, t, rng);
      ai.push_back(rotation_angle(d0));
      ar.push_back(rotation_angle(d1));
      zi.push_back(so3_log(d0)(2));
      zr.push_back(so3_log(d1)(2));
    }
    CHECK(ks_two_sample(ai, ar).p_value > 0.001);
    CHECK(ks_two_sample(zi, zr).p_value > 0.001);
  }
}

TEST_CASE("conditional score") {
  Rng rng(6);
  const Mat3 x0 = random_rotation(rng);
  CHECK(so3_cond_score(x0, x0, 0.3).norm() == 0.0);
  CHECK_THROWS_AS(so3_cond_score(x0, x0, 0.0), DomainError);

  // Radial derivative of log f against central differences.
  for (double t : {0.003, 0.05, 0.7, 1.0, 3.0}) {
    for (double th : {1e-4, 0.05, 0.5, 1.5, 2.5, 3.1}) {
      const double h = 1e-6;
      const double fd = (igso3_log_f(th + h, t) - igso3_log_f(th - h, t)) / (2 * h);
      CHECK(std::abs(igso3_dlog_f(th, t) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }

  // Tangent components against directional differences of log f in the body frame.
  for (double t : {0.05, 2.0}) {
    const Mat3 xt = so3_forward(x0, t, rng);
    const Vec3 g = so3_cond_score(x0, xt, t);
    for (int k = 0; k < 3; ++k) {
      const double h = 1e-6;
      const Vec3 e = Vec3::Unit(k) * h;
      auto lf = [&](const Mat3& x) { return igso3_log_f(geodesic_distance(x0, x), t); };
      const double fd = (lf(xt * so3_exp(e)) - lf(xt * so3_exp(-e))) / (2 * h);
      CHECK(std::abs(g(k) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }

  int inward = 0;
  for (int i = 0; i < 100; ++i) {
    const Mat3 xt = so3_forward(x0, 0.05, rng);
    inward += so3_cond_score(x0, xt, 0.05).dot(so3_log(x0.transpose() * xt)) < 0.0;
  }
  CHECK(inward == 100);
}

TEST_CASE("geodesic reverse step") {
  Rng rng(7);
  const Mat3 x = random_rotation(rng);
  CHECK(geodesic_reverse_step(x, 0.0, Vec3::Zero(), rng) == x);
  CHECK_THROWS_AS(geodesic_reverse_step(x, 0.1, Vec3::Zero(), rng), ContractError);
  Mat3 y = x;
  for (int i = 0; i < 2000; ++i) y = geodesic_reverse_step(y, -0.01, Vec3(0.3, -0.2, 0.1), rng);
  CHECK(is_rotation(y, 1e-9));
  const SO3Point p = SO3Point::from_matrix(y);
  CHECK(std::abs(p.axis.norm() - 1.0) <= 1e-9);
}

TEST_CASE("toy dataset construction") {
  const So3ToySpec spec = So3ToySpec::six_modes();
  REQUIRE(spec.labels() == 6);
  Rng rng(8);
  const std::size_t n = 60000;
  const auto data = toy_dataset_so3(spec, n, rng);
  std::vector<double> count(6), lat(6), lon(6);
  double cs = 0.0, sn = 0.0;
  for (const auto& s : data) {
    CHECK(s.x.valid());
    const auto k = static_cast<std::size_t>(s.label);
    count[k] += 1;
    lat[k] += std::asin(std::clamp(s.x.axis(2), -1.0, 1.0));
    lon[k] += std::remainder(std::atan2(s.x.axis(1), s.x.axis(0)) - spec.center_lon[k], 2 * kPi);
    cs += std::cos(s.x.angle);
    sn += std::sin(s.x.angle);
  }
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(std::abs(count[k] / n - 1.0 / 6.0) <= 0.02);
    CHECK(std::abs(lat[k] / count[k] - spec.center_lat[k]) <= 0.05);
    CHECK(std::abs(lon[k] / count[k]) <= 0.05);
  }
  CHECK(std::abs(std::atan2(sn, cs) - kPi / 2) <= 0.05);
  CHECK(in_cell_rate(spec, data) > 0.99);
  CHECK_THROWS(toy_dataset_so3(spec, 0, rng));
}

TEST_CASE("von Mises sampler") {
  Rng rng(9);
  std::vector<double> v;
  for (int i = 0; i < 20000; ++i) v.push_back(sample_von_mises(0.3, 4.0, rng));
  double c = 0.0, s = 0.0;
  for (double a : v) {
    c += std::cos(a);
    s += std::sin(a);
  }
  // Mean resultant length I1(4) / I0(4).
  CHECK(std::atan2(s, c) == doctest::Approx(0.3).epsilon(0.02));
  CHECK(std::hypot(c, s) / v.size() == doctest::Approx(0.8635).epsilon(0.01));
}

TEST_CASE("oracle chains reach their mode centers") {
  const So3ToySpec spec = So3ToySpec::six_modes();
  const So3Schedule sched;
  const So3PointMassOracle oracle(spec, sched);
  std::vector<int> labels(600);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 6);
  So3SamplerConfig cfg;
  cfg.omega = 1.0;
  const auto out = sample_so3_conditional(oracle, labels, sched, cfg, 11);
  int near = 0;
  for (const auto& s : out) {
    CHECK(s.x.valid());
    near += geodesic_distance(s.x.matrix(), spec.center_rotation(s.label)) < 0.3;
  }
  CHECK(near >= 0.85 * 600);
  CHECK(in_cell_rate(spec, out) >= 0.9);
}

TEST_CASE("oracle joint sampling recovers label frequencies") {
  const So3ToySpec spec = So3ToySpec::six_modes();
  const So3Schedule sched;
  const So3PointMassOracle oracle(spec, sched);
  So3SamplerConfig cfg;
  cfg.steps = 100;
  const auto out = sample_so3_joint(oracle, 3000, sched, cfg, 12);
  std::vector<double> count(6);
  for (const auto& s : out) {
    REQUIRE(s.label >= 0);
    REQUIRE(s.label < 6);
    count[static_cast<std::size_t>(s.label)] += 1;
  }
  for (double c : count) CHECK(std::abs(c / 3000.0 - 1.0 / 6.0) <= 0.03);
  CHECK(in_cell_rate(spec, out) >= 0.9);

  std::vector<Mat3> x;
  for (int k = 0; k < 6; ++k) x.push_back(spec.center_rotation(k));
  CHECK(sample_so3_labels(oracle, x, sched, cfg, 13) == std::vector<int>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("samplers are deterministic and omega one skips the guide") {
  const So3ToySpec spec = So3ToySpec::six_modes();
  const So3Schedule sched;
  const So3Net net({6, 32, 2, 8}, sched, 3);
  So3SamplerConfig cfg;
  cfg.steps = 20;
  const std::vector<int> labels{0, 3, 5, 1};
  auto a = sample_so3_conditional(net, labels, sched, cfg, 1);
  auto b = sample_so3_conditional(net, labels, sched, cfg, 1);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].x.rotvec() == b[i].x.rotvec());
  cfg.omega = 1.0;
  cfg.condition_noise = -1.0;  // never read when omega = 1
  CHECK_NOTHROW(sample_so3_conditional(net, labels, sched, cfg, 1));
  cfg.omega = 2.0;
  CHECK_THROWS_AS(sample_so3_conditional(net, labels, sched, cfg, 1), ContractError);
  CHECK_THROWS_AS(sample_so3_conditional(net, {6}, sched, So3SamplerConfig{}, 1), DomainError);
}

TEST_CASE("network loss gradient") {
  const So3Schedule sched;
  So3Net net({3, 8, 2, 4}, sched, 5);
  Rng rng(14);
  // The output layer starts at zero; perturb it so every path carries gradient.
  for (auto& p : net.params().all())
    for (auto& v : p.value.data) v += 0.3 * rng.normal();
  So3Batch b;
  b.n = 4;
  std::vector<Mat3> x0;
  std::vector<int> y0{0, 1, 2, 1};
  for (std::size_t i = 0; i < b.n; ++i) {
    x0.push_back(random_rotation(rng));
    b.u.push_back(i == 3 ? 0.0 : 0.2 + 0.2 * i);
    b.s.push_back(i == 0 ? 0.0 : 0.3 * i);
    b.x.push_back(b.u[i] > 0 ? so3_forward(x0[i], sched.tau(b.u[i]), rng) : x0[i]);
    b.y.push_back(i == 0 ? y0[i] : 3);
  }
  auto f = [&](Tape& tape, ParameterStore&) {
    return so3_loss_vars(tape, net.forward(tape, b, true), b, x0, y0, sched, 1.0);
  };
  const GradCheckResult r = grad_check_params(f, net.params(), 1e-5);
  CHECK(r.passed);
  CHECK(r.max_rel_error <= 1e-5);
  CHECK(std::isfinite(so3_loss_value(net, b, x0, y0, 1.0)));

  const So3Output o = net.evaluate(b);
  CHECK(o.score.size() == 4);
  CHECK(o.logits.size() == 4 * 3);
}

TEST_CASE("short training run is deterministic and lowers the loss") {
  const So3ToySpec spec = So3ToySpec::six_modes();
  const So3Schedule sched;
  Rng rng(15);
  const auto data = toy_dataset_so3(spec, 2000, rng);
  So3TrainConfig cfg;
  cfg.steps = 300;
  cfg.batch = 64;
  cfg.seed = 2;
  So3Net a({6, 32, 2, 8}, sched, 1), b({6, 32, 2, 8}, sched, 1);
  const auto ra = train_so3(a, data, cfg);
  const auto rb = train_so3(b, data, cfg);
  REQUIRE(ra.losses.size() == 300);
  CHECK(ra.losses == rb.losses);
  for (std::size_t p = 0; p < ra.ema.size(); ++p) CHECK(ra.ema[p].value.data == rb.ema[p].value.data);

  // Common held-out batch for the before/after comparison.
  So3Batch hb;
  std::vector<Mat3> x0;
  std::vector<int> y0;
  hb.n = 4000;
  for (std::size_t i = 0; i < hb.n; ++i) {
    const auto& d = data[i % data.size()];
    x0.push_back(d.x.matrix());
    y0.push_back(d.label);
    hb.u.push_back(rng.uniform());
    hb.s.push_back(0.1 + 0.9 * rng.uniform());
    hb.x.push_back(so3_forward(x0.back(), sched.tau(hb.u.back()), rng));
    hb.y.push_back(rng.bernoulli(sched.disc.mask_prob(hb.s.back())) ? 6 : d.label);
  }
  const So3Net fresh({6, 32, 2, 8}, sched, 1);
  CHECK(so3_loss_value(a, hb, x0, y0, 1.0) < 0.9 * so3_loss_value(fresh, hb, x0, y0, 1.0));
}
