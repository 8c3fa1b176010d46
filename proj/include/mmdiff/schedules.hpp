#pragma once

#include <stdexcept>
#include <string>

namespace mmdiff {

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct VpCoeffs {
  double mean_coef;
  double std;
};

// Noise rate beta(t) of the variance-preserving SDE
//   dX = -beta(t) X dt + sqrt(2 beta(t)) dB,
// whose marginal given x0 is N(exp(-B(t)) x0, (1 - exp(-2 B(t))) I) with
// B(t) the integral of beta over [0, t]. Time is normalized to [0, 1].
struct ContinuousSchedule {
  enum class Kind { linear_vp, scaled_sqrt_vp };

  Kind kind = Kind::linear_vp;
  double beta_start = 0.1;
  double beta_end = 20.0;
  double scale = 1.0;  // only used by scaled_sqrt_vp

  // beta(t) = beta_start (1 - t) + beta_end t, with (0.1, 20).
  static ContinuousSchedule tabular_vp();
  // beta(t) = 500 (sqrt(beta_start) (1 - t) + sqrt(beta_end) t)^2, with
  // (0.00085, 0.012).
  static ContinuousSchedule textimage_vp();

  double beta(double t) const;
  double integral(double t) const;
  VpCoeffs vp_coeffs(double t) const;

  void validate() const;
};

struct DiscCoeffs {
  double sigma;      // rate sigma_s
  double sigma_bar;  // integral of sigma over [0, s]
  double survival;   // exp(-sigma_bar), probability a token is still unmasked
};

// Log-linear masking schedule: survival(s) = 1 - (1 - delta) s.
struct DiscreteSchedule {
  double delta = 1e-5;

  // sigma_s diverges at s = 1 when delta = 0; it is capped here.
  static constexpr double kSigmaCap = 1e12;

  static DiscreteSchedule loglinear_mask();

  DiscCoeffs coeffs(double s) const;
  // 1 - survival(s), computed without cancellation.
  double mask_prob(double s) const;
  // sigma_s exp(-sigma_bar) / (1 - exp(-sigma_bar)); the weight of the
  // cross-entropy term and the total reverse unmasking rate. Algebraically
  // equal to 1/s for every delta.
  double unmask_rate(double s) const;

  void validate() const;
};

struct Schedules {
  ContinuousSchedule cont = ContinuousSchedule::tabular_vp();
  DiscreteSchedule disc = DiscreteSchedule::loglinear_mask();
};

// Presets: "tabular-vp", "textimage-vp" (continuous), "loglinear-mask" (discrete).
ContinuousSchedule continuous_preset(const std::string& name);
DiscreteSchedule discrete_preset(const std::string& name);
std::string preset_name(const ContinuousSchedule& schedule);

}  // namespace mmdiff
