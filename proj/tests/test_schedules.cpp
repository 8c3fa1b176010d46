#include <cmath>

#include "doctest.h"
#include "mmdiff/rng.hpp"
#include "mmdiff/schedules.hpp"

using namespace mmdiff;

namespace {

// Composite Simpson rule, independent of the closed-form integrals.
double simpson(const ContinuousSchedule& s, double t, int n = 2000) {
  const double h = t / n;
  double acc = s.beta(0.0) + s.beta(t);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * s.beta(i * h);
  return acc * h / 3.0;
}

}  // namespace

TEST_CASE("beta presets") {
  const auto lin = ContinuousSchedule::tabular_vp();
  CHECK(lin.beta(0.0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lin.beta(1.0) == doctest::Approx(20.0).epsilon(1e-15));
  const auto sq = ContinuousSchedule::textimage_vp();
  CHECK(sq.beta(0.0) == doctest::Approx(0.425).epsilon(1e-12));
  CHECK(sq.beta(1.0) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK_THROWS_AS(lin.beta(-0.01), DomainError);
  CHECK_THROWS_AS(lin.beta(1.01), DomainError);
}

TEST_CASE("vp coefficients") {
  const auto lin = ContinuousSchedule::tabular_vp();
  const auto c0 = lin.vp_coeffs(0.0);
  CHECK(c0.mean_coef == 1.0);
  CHECK(c0.std == 0.0);
  const auto c1 = lin.vp_coeffs(1.0);
  CHECK(c1.mean_coef == doctest::Approx(std::exp(-10.05)).epsilon(1e-12));
  const auto ch = lin.vp_coeffs(0.5);
  CHECK(lin.integral(0.5) == doctest::Approx(2.5375).epsilon(1e-14));
  CHECK(ch.mean_coef == doctest::Approx(0.0790).epsilon(1e-3));
  CHECK(ch.std == doctest::Approx(0.99687).epsilon(1e-5));
}

TEST_CASE("closed-form integral matches quadrature") {
  for (const auto& s : {ContinuousSchedule::tabular_vp(), ContinuousSchedule::textimage_vp()}) {
    for (double t : {0.01, 0.1, 0.37, 0.5, 0.9, 1.0}) {
      const double q = simpson(s, t);
      CHECK(std::abs(q - s.integral(t)) <= 1e-8 * std::abs(q));
    }
  }
}

TEST_CASE("integral strictly increasing") {
  for (const auto& s : {ContinuousSchedule::tabular_vp(), ContinuousSchedule::textimage_vp()}) {
    CHECK(s.integral(0.0) == 0.0);
    double prev = 0.0;
    for (int i = 1; i <= 100; ++i) {
      const double b = s.integral(i / 100.0);
      CHECK(b > prev);
      prev = b;
    }
  }
}

TEST_CASE("variance preserving identity at random times") {
  Rng rng(11);
  for (const auto& s : {ContinuousSchedule::tabular_vp(), ContinuousSchedule::textimage_vp()}) {
    for (int i = 0; i < 1000; ++i) {
      const auto c = s.vp_coeffs(rng.uniform());
      CHECK(std::abs(c.mean_coef * c.mean_coef + c.std * c.std - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("discrete coefficients") {
  const auto d = DiscreteSchedule::loglinear_mask();
  const auto z = d.coeffs(0.0);
  CHECK(z.sigma == doctest::Approx(0.99999).epsilon(1e-14));
  CHECK(z.sigma_bar == 0.0);
  CHECK(z.survival == 1.0);
  const auto h = d.coeffs(0.5);
  CHECK(h.sigma_bar == doctest::Approx(-std::log(1.0 - 0.99999 * 0.5)).epsilon(1e-14));
  CHECK(h.sigma_bar == doctest::Approx(0.6931372).epsilon(1e-7));
  CHECK(h.survival == doctest::Approx(0.500005).epsilon(1e-12));
  CHECK(std::exp(-h.sigma_bar) == doctest::Approx(h.survival).epsilon(1e-14));
  CHECK(d.coeffs(1.0).survival == doctest::Approx(1e-5).epsilon(1e-9));

  const DiscreteSchedule zero{0.0};
  const auto full = zero.coeffs(1.0);
  CHECK(full.survival == 0.0);
  CHECK(full.sigma == DiscreteSchedule::kSigmaCap);
  CHECK_THROWS_AS(d.coeffs(1.5), DomainError);
}

TEST_CASE("survival monotone and unmask rate algebra") {
  const auto d = DiscreteSchedule::loglinear_mask();
  double prev = 1.0;
  for (int i = 0; i <= 200; ++i) {
    const double sv = d.coeffs(i / 200.0).survival;
    CHECK(sv <= prev);
    prev = sv;
  }
  Rng rng(5);
  const DiscreteSchedule zero{0.0};
  for (int i = 0; i < 100; ++i) {
    const double s = 1e-3 + (1.0 - 2e-3) * rng.uniform();
    CHECK(std::abs(zero.unmask_rate(s) * s - 1.0) <= 1e-12);
    // Literal form sigma e^{-sigma_bar} / (1 - e^{-sigma_bar}).
    const auto c = d.coeffs(s);
    const double literal = c.sigma * c.survival / (1.0 - c.survival);
    CHECK(d.unmask_rate(s) == doctest::Approx(literal).epsilon(1e-12));
  }
}

TEST_CASE("presets by name") {
  CHECK(continuous_preset("tabular-vp").kind == ContinuousSchedule::Kind::linear_vp);
  CHECK(continuous_preset("textimage-vp").scale == 500.0);
  CHECK(discrete_preset("loglinear-mask").delta == 1e-5);
  CHECK_THROWS_AS(continuous_preset("cosine"), DomainError);
}
