#include <cmath>

#include "doctest.h"
#include "mmdiff/continuous.hpp"
#include "mmdiff/oracle.hpp"
#include "mmdiff/rng.hpp"
#include "mmdiff/stats.hpp"

using namespace mmdiff;

namespace {

const Schedules kSched{};

double gauss(double x, double m, double v) { return std::exp(-0.5 * (x - m) * (x - m) / v) / std::sqrt(2.0 * M_PI * v); }

}  // namespace

TEST_CASE("toy spec validation") {
  CHECK_NOTHROW(ToyJointSpec::default_1d().validate());
  auto s = ToyJointSpec::default_1d();
  s.priors[0] = 0.4;
  CHECK_THROWS(s.validate());
  s = ToyJointSpec::default_1d();
  s.vars[1] = 0.0;
  CHECK_THROWS(s.validate());
  s = ToyJointSpec::default_1d();
  s.means[2] = {1.0, 2.0};
  CHECK_THROWS(s.validate());
}

TEST_CASE("toy joint density") {
  const auto spec = ToyJointSpec::default_1d();
  for (int k = 0; k < 3; ++k) {
    const double x = 0.37;
    const double expect = spec.priors[k] * gauss(x, spec.means[k][0], spec.vars[k]);
    CHECK(toy_joint_density(spec, {x}, k, 0.0, 0.0, kSched) == doctest::Approx(expect).epsilon(1e-13));
    CHECK(toy_joint_density(spec, {x}, 3, 0.0, 0.0, kSched) == 0.0);
  }
  // Survival 0.5 with delta = 0 at s = 0.5.
  Schedules half = kSched;
  half.disc = DiscreteSchedule{0.0};
  double mix = 0.0;
  for (int k = 0; k < 3; ++k) mix += spec.priors[k] * 0.5 * gauss(0.2, spec.means[k][0], spec.vars[k]);
  CHECK(toy_joint_density(spec, {0.2}, 3, 0.0, 0.5, half) == doctest::Approx(mix).epsilon(1e-13));
  CHECK_THROWS_AS(toy_joint_density(spec, {0.2}, 4, 0.0, 0.5, half), ContractError);

  for (double t : {0.0, 0.3, 1.0}) {
    for (double s : {0.0, 0.4, 0.9}) {
      CAPTURE(t);
      CAPTURE(s);
      const int n = 2000;
      const double L = 12.0, h = 2.0 * L / (n - 1);
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        const double x = -L + h * i, w = (i == 0 || i == n - 1) ? 0.5 * h : h;
        for (int y = 0; y <= 3; ++y) total += w * toy_joint_density(spec, {x}, y, t, s, kSched);
        CHECK(toy_x_density(spec, {x}, t, kSched) ==
              doctest::Approx(toy_joint_density(spec, {x}, 0, t, s, kSched) + toy_joint_density(spec, {x}, 1, t, s, kSched) +
                              toy_joint_density(spec, {x}, 2, t, s, kSched) + toy_joint_density(spec, {x}, 3, t, s, kSched))
                  .epsilon(1e-12));
      }
      CHECK(std::abs(total - 1.0) <= 1e-4);
    }
  }
  CHECK(toy_x_cdf(spec, -50.0, 0.4, kSched) < 1e-12);
  CHECK(toy_x_cdf(spec, 50.0, 0.4, kSched) == doctest::Approx(1.0));
}

TEST_CASE("toy scores") {
  SUBCASE("single label") {
    ToyJointSpec one{1, {1.0}, {{0.7}}, {0.4}};
    for (double t : {0.1, 0.5, 0.9}) {
      const auto c = kSched.cont.vp_coeffs(t);
      const double v = c.mean_coef * c.mean_coef * 0.4 + c.std * c.std;
      for (int y : {0, 1}) {
        const double sc = toy_scores(one, {1.3}, y, t, 0.5, kSched, false).cont[0];
        CHECK(sc == doctest::Approx(-(1.3 - c.mean_coef * 0.7) / v).epsilon(1e-14));
      }
    }
  }
  SUBCASE("symmetric pair at the origin") {
    ToyJointSpec sym{1, {0.5, 0.5}, {{-1.5}, {1.5}}, {0.3, 0.3}};
    CHECK(std::abs(toy_scores(sym, {0.0}, 2, 0.4, 0.6, kSched).cont[0]) < 1e-15);
  }
  SUBCASE("unmasked ratio request") {
    CHECK_THROWS_AS(toy_scores(ToyJointSpec::default_1d(), {0.0}, 1, 0.4, 0.6, kSched, true), ContractError);
  }
  SUBCASE("finite differences of the log density") {
    const auto spec = ToyJointSpec::default_1d();
    Rng rng(5);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const double x = 6.0 * rng.uniform() - 3.0, t = 0.05 + 0.9 * rng.uniform(), s = 0.05 + 0.9 * rng.uniform();
      const int y = static_cast<int>(rng.below(4));
      const double h = 1e-5;
      const double fd = (std::log(toy_joint_density(spec, {x + h}, y, t, s, kSched)) -
                         std::log(toy_joint_density(spec, {x - h}, y, t, s, kSched))) /
                        (2.0 * h);
      const double an = toy_scores(spec, {x}, y, t, s, kSched, false).cont[0];
      worst = std::max(worst, std::abs(fd - an) / std::max(1.0, std::abs(an)));
    }
    CHECK(worst <= 1e-6);
  }
  SUBCASE("ratios are the joint density quotient") {
    const auto spec = ToyJointSpec::default_1d();
    for (double x : {-2.2, 0.1, 2.7}) {
      const auto r = toy_scores(spec, {x}, 3, 0.35, 0.6, kSched).ratios;
      const double pm = toy_joint_density(spec, {x}, 3, 0.35, 0.6, kSched);
      for (int k = 0; k < 3; ++k)
        CHECK(r[static_cast<std::size_t>(k)] ==
              doctest::Approx(toy_joint_density(spec, {x}, k, 0.35, 0.6, kSched) / pm).epsilon(1e-12));
    }
  }
  SUBCASE("oracle model induces the exact ratios") {
    const auto spec = ToyJointSpec::default_1d();
    const ToyOracleModel m(spec, kSched);
    StateBatch b{1, {0.8}, {3}, {0.3}, {0.55}};
    const auto o = m.evaluate(b);
    const auto ratio = concrete_score_d(3, 3, softmax(o.logits), 0.55, kSched.disc);
    const auto truth = toy_scores(spec, {0.8}, 3, 0.3, 0.55, kSched).ratios;
    for (std::size_t k = 0; k < 3; ++k) CHECK(ratio[k] == doctest::Approx(truth[k]).epsilon(1e-12));
  }
}

TEST_CASE("two-sided conditional score matches the continuous target") {
  // log p(x_t, y_s | x0, y0) = log N(x_t; mu x0, std^2) + log P(y_s | y0); the
  // x-gradient does not see the label factor.
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double x0 = 3.0 * rng.normal(), xt = 2.0 * rng.normal(), t = 0.02 + 0.97 * rng.uniform();
    const double s = rng.uniform();
    const auto c = kSched.cont.vp_coeffs(t);
    const double label_log = std::log(kSched.disc.coeffs(s).survival);
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(xt));
    Var r = add_scalar(x, -c.mean_coef * x0);
    Var lp = add_scalar(scale(square(r), -0.5 / (c.std * c.std)), -std::log(c.std) - 0.5 * std::log(2.0 * M_PI) + label_log);
    tape.backward(sum(lp));
    const double g = tape.grad(x).item();
    const double target = cond_score_c({x0}, {xt}, t, kSched.cont)[0];
    CHECK(std::abs(g - target) <= 1e-12 * std::max(1.0, std::abs(target)));
  }
}

TEST_CASE("jump operator: clock derivatives cancel") {
  RateMatrix q{Tensor(3, 3, {-1.0, 0.4, 0.5, 0.7, -0.9, 1.5, 0.3, 0.5, -2.0})};
  auto f = [](double t) { return std::vector<double>{1.0 + 0.5 * std::sin(3.0 * t), 2.0 * std::exp(-t), 0.4 + t * t}; };
  for (double t : {0.2, 0.7, 1.3}) {
    const auto full = jump_phi(q, f, t, true);
    const auto spatial = jump_phi(q, f, t, false);
    const auto breg = jump_phi_bregman(q, f(t));
    for (std::size_t x = 0; x < 3; ++x) {
      CHECK(std::abs(full[x] - spatial[x]) <= 1e-9);
      CHECK(spatial[x] == doctest::Approx(breg[x]).epsilon(1e-12));
      CHECK(breg[x] >= 0.0);
    }
  }
  // Constant function: zero.
  for (double v : jump_phi_bregman(q, {2.0, 2.0, 2.0})) CHECK(v == 0.0);
}

TEST_CASE("explicit objective") {
  const auto spec = ToyJointSpec::default_1d();
  const ToyOracleModel oracle(spec, kSched);
  const auto grid = QuadGrid::standard();
  const double g0 = gesm_quadrature(spec, oracle, kSched, grid);
  CHECK(std::abs(g0) <= 1e-3);
  double prev = g0;
  for (double eps : {0.05, 0.1, 0.2}) {
    const PerturbedModel pm(oracle, eps, 3);
    const double g = gesm_quadrature(spec, pm, kSched, grid);
    CAPTURE(eps);
    CHECK(g > prev);
    prev = g;
  }
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const PerturbedModel pm(oracle, 0.02 * static_cast<double>(seed % 7), seed);
    CHECK(gesm_quadrature(spec, pm, kSched, grid) >= -1e-6);
  }
}

TEST_CASE("denoising objective differs from the explicit one by a constant") {
  const auto spec = ToyJointSpec::default_1d();
  const ToyOracleModel oracle(spec, kSched);
  const auto grid = QuadGrid::standard();
  std::vector<double> gaps;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double eps = 0.04 * static_cast<double>(seed);
    const PerturbedModel pm(oracle, eps, 100 + seed);
    gaps.push_back(gdsm_quadrature(spec, pm, kSched, grid) - gesm_quadrature(spec, pm, kSched, grid));
  }
  for (std::size_t a = 0; a < gaps.size(); ++a)
    for (std::size_t b = a + 1; b < gaps.size(); ++b) CHECK(std::abs(gaps[a] - gaps[b]) <= 2e-3);

  const double floor = gdsm_quadrature(spec, oracle, kSched, grid);
  MESSAGE("denoising objective floor at the oracle: " << floor);
  CHECK(floor > 0.0);
  auto fine = grid;
  fine.x_points = 800;
  CHECK(std::abs(gdsm_quadrature(spec, oracle, kSched, fine) - floor) <= 1e-4);
  // The training (cross-entropy) form orders models the same way.
  const PerturbedModel pm(oracle, 0.1, 7);
  CHECK(expected_training_loss(spec, pm, kSched, grid) > expected_training_loss(spec, oracle, kSched, grid));
}

TEST_CASE("training loss estimator matches its quadrature") {
  const auto spec = ToyJointSpec::default_1d();
  const ToyOracleModel oracle(spec, kSched);
  TimeDraw draw{0.05, 0.1, 0.1};
  const auto grid = QuadGrid::with_atoms(48, 0.05, 0.1);
  const double expect = expected_training_loss(spec, oracle, kSched, grid);
  Rng rng(77);
  const std::size_t batches = 200, per = 1000;
  std::vector<double> vals;
  for (std::size_t b = 0; b < batches; ++b) {
    std::vector<double> x0(per);
    std::vector<int> y0(per);
    for (std::size_t i = 0; i < per; ++i) {
      const int k = sample_categorical(spec.priors, rng);
      y0[i] = k;
      x0[i] = spec.means[static_cast<std::size_t>(k)][0] + std::sqrt(spec.vars[static_cast<std::size_t>(k)]) * rng.normal();
    }
    vals.push_back(gdsm_loss(oracle, x0, y0, per, kSched, 1.0, draw, rng));
  }
  const double mean = mean_of(vals), se = std::sqrt(variance_of(vals) / static_cast<double>(batches));
  CAPTURE(mean);
  CAPTURE(expect);
  CAPTURE(se);
  CHECK(std::abs(mean - expect) <= 2.0 * se);
}

TEST_CASE("time reversal") {
  const auto spec = ToyJointSpec::default_1d();
  ReversalOptions opt;
  SUBCASE("synchronous") {
    const auto rep = reversal_check(spec, kSched, TimeCoupling::synchronous(), opt);
    REQUIRE(rep.checkpoints.size() == 5);
    for (const auto& c : rep.checkpoints) {
      CAPTURE(c.t);
      CHECK(c.ks_p > 1e-3);
      CHECK(c.chi2_p > 1e-3);
    }
    CHECK(rep.passed);
    CHECK(rep.checkpoints.back().t == doctest::Approx(1e-5));
  }
  SUBCASE("staged") {
    for (const auto& cp : {TimeCoupling::staged_disc_first(), TimeCoupling::staged_cont_first()}) {
      const auto rep = reversal_check(spec, kSched, cp, opt);
      CAPTURE(rep.coupling);
      for (const auto& c : rep.checkpoints) {
        CAPTURE(c.t);
        CAPTURE(c.s);
        CHECK(c.ks_p > 1e-3);
        CHECK(c.chi2_p > 1e-3);
      }
      CHECK(rep.passed);
    }
  }
  SUBCASE("zero steps") {
    auto z = opt;
    z.steps = 0;
    z.chains = 5000;
    const auto rep = reversal_check(spec, kSched, TimeCoupling::synchronous(), z);
    for (const auto& c : rep.checkpoints) {
      CHECK(c.t == 1.0);
      CHECK(c.mask_fraction == 1.0);
      CHECK(c.ks_p > 1e-3);
    }
    CHECK(rep.passed);
  }
}
