#include "mmdiff/schedules.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mmdiff {

namespace {

void check_unit_time(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) {
    std::ostringstream msg;
    msg << what << " = " << t << " outside [0, 1]";
    throw DomainError(msg.str());
  }
}

}  // namespace

ContinuousSchedule ContinuousSchedule::tabular_vp() {
  return {Kind::linear_vp, 0.1, 20.0, 1.0};
}

ContinuousSchedule ContinuousSchedule::textimage_vp() {
  return {Kind::scaled_sqrt_vp, 0.00085, 0.012, 500.0};
}

double ContinuousSchedule::beta(double t) const {
  check_unit_time(t, "t");
  switch (kind) {
    case Kind::linear_vp:
      return beta_start * (1.0 - t) + beta_end * t;
    case Kind::scaled_sqrt_vp: {
      const double u = std::sqrt(beta_start) * (1.0 - t) + std::sqrt(beta_end) * t;
      return scale * u * u;
    }
  }
  return 0.0;
}

double ContinuousSchedule::integral(double t) const {
  check_unit_time(t, "t");
  switch (kind) {
    case Kind::linear_vp:
      return beta_start * t + 0.5 * (beta_end - beta_start) * t * t;
    case Kind::scaled_sqrt_vp: {
      // integral of scale (a + (c - a) tau)^2 over [0, t], expanded so the
      // a == c case needs no special handling.
      const double a = std::sqrt(beta_start);
      const double d = std::sqrt(beta_end) - a;
      return scale * (a * a * t + a * d * t * t + d * d * t * t * t / 3.0);
    }
  }
  return 0.0;
}

VpCoeffs ContinuousSchedule::vp_coeffs(double t) const {
  const double b = integral(t);
  return {std::exp(-b), std::sqrt(-std::expm1(-2.0 * b))};
}

void ContinuousSchedule::validate() const {
  if (!(beta_start > 0.0) || !(beta_end > 0.0)) {
    throw DomainError("continuous schedule needs beta_start > 0 and beta_end > 0");
  }
  if (kind == Kind::scaled_sqrt_vp && !(scale > 0.0)) {
    throw DomainError("scaled-sqrt-vp schedule needs scale > 0");
  }
}

DiscreteSchedule DiscreteSchedule::loglinear_mask() { return {1e-5}; }

DiscCoeffs DiscreteSchedule::coeffs(double s) const {
  check_unit_time(s, "s");
  const double survival = 1.0 - (1.0 - delta) * s;
  const double sigma = survival > 0.0 ? std::min((1.0 - delta) / survival, kSigmaCap) : kSigmaCap;
  const double sigma_bar = -std::log1p(-(1.0 - delta) * s);
  return {sigma, sigma_bar, survival};
}

double DiscreteSchedule::mask_prob(double s) const {
  check_unit_time(s, "s");
  return (1.0 - delta) * s;
}

double DiscreteSchedule::unmask_rate(double s) const {
  check_unit_time(s, "s");
  if (s == 0.0) throw DomainError("unmask rate is singular at s = 0");
  // sigma * survival == 1 - delta exactly for this schedule.
  return (1.0 - delta) / mask_prob(s);
}

void DiscreteSchedule::validate() const {
  if (!(delta >= 0.0 && delta < 1.0)) throw DomainError("delta must lie in [0, 1)");
}

ContinuousSchedule continuous_preset(const std::string& name) {
  if (name == "tabular-vp") return ContinuousSchedule::tabular_vp();
  if (name == "textimage-vp") return ContinuousSchedule::textimage_vp();
  throw DomainError("unknown continuous schedule preset '" + name + "'");
}

DiscreteSchedule discrete_preset(const std::string& name) {
  if (name == "loglinear-mask") return DiscreteSchedule::loglinear_mask();
  throw DomainError("unknown discrete schedule preset '" + name + "'");
}

std::string preset_name(const ContinuousSchedule& schedule) {
  return schedule.kind == ContinuousSchedule::Kind::linear_vp ? "tabular-vp" : "textimage-vp";
}

}  // namespace mmdiff
