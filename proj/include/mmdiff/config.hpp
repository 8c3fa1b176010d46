#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mmdiff/multimodal.hpp"
#include "mmdiff/schedules.hpp"
#include "mmdiff/score_net.hpp"
#include "mmdiff/tabular.hpp"
#include "mmdiff/train.hpp"

namespace mmdiff {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ScheduleSection {
  std::string continuous = "tabular-vp";
  std::string discrete = "loglinear-mask";
  // Overrides of the preset parameters; NaN keeps the preset value.
  double beta_start = std::numeric_limits<double>::quiet_NaN();
  double beta_end = std::numeric_limits<double>::quiet_NaN();
  double scale = std::numeric_limits<double>::quiet_NaN();
  double delta = std::numeric_limits<double>::quiet_NaN();

  Schedules resolve() const;
};

struct ModelSection {
  Arch arch = Arch::mlp;
  std::size_t hidden = 256;
  std::size_t depth = 4;
  std::size_t time_embed = 32;
  std::size_t heads = 4;
  std::size_t token_embed = 16;
  std::size_t mlp_ratio = 4;
  NumericMode numeric_mode = NumericMode::zscore;
  bool allow_unknown = false;
  std::uint64_t init_seed = 0;
};

struct SamplerSection {
  int steps = 50;
  double omega = 5.0;
  double interval_lo = 0.3;
  double interval_hi = 0.8;
  double condition_noise = 0.77;
  double early_stop = 1e-5;
  // "auto" picks Euler-Maruyama for tabular synthesis and Heun elsewhere.
  std::string integrator = "auto";
  std::size_t n = 1000;
  std::size_t workers = 1;
  std::size_t chunk = 1000;
  bool use_ema = true;
  std::uint64_t seed = 0;

  SamplerConfig resolve(Integrator automatic) const;
};

struct PathsSection {
  std::string data;
  std::string schema;
  std::string checkpoint;
  std::string synthetic;
  std::string output;  // empty: $MMDIFF_OUTPUT_ROOT or "mmdiff-out"
};

struct RunConfig {
  ScheduleSection schedule;
  ModelSection model;
  // Parameters are stored as f32 by default.
  TrainConfig train = [] {
    TrainConfig t;
    t.precision = Precision::f32;
    return t;
  }();
  SamplerSection sampler;
  PathsSection paths;

  // Range checks on every section.
  void validate() const;
  // Required paths for a subcommand exist (keys named in errors).
  void validate_paths(const std::string& subcommand) const;
  std::string output_dir() const;

  TabularTrainOptions tabular_options() const;

  std::string to_toml() const;
  nlohmann::json to_json() const;
};

// Defaults, then the TOML file (if path is non-empty), then the dotted-key
// overrides such as {"sampler.omega", "3.0"}. Unknown sections or keys are
// errors. Override values are read as TOML values, falling back to strings.
RunConfig load_config(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides = {});
RunConfig parse_config(const std::string& toml_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides = {});

// Writes resolved_config.toml into dir (created if needed).
void echo_config(const RunConfig& cfg, const std::string& dir);

}  // namespace mmdiff
