#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmdiff/multimodal.hpp"
#include "mmdiff/schedules.hpp"
#include "mmdiff/score_net.hpp"
#include "mmdiff/train.hpp"

namespace mmdiff {

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ColumnKind { numerical, categorical };

std::string kind_name(ColumnKind k);
ColumnKind parse_kind(const std::string& s);

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::numerical;
  std::vector<std::string> categories;  // categorical only
  bool operator==(const ColumnSpec& o) const = default;
};

struct TabularSchema {
  std::vector<ColumnSpec> columns;
  std::string target;  // optional

  // Unique names, deduplicated inventories, target present when set.
  void validate() const;
  std::vector<std::size_t> numerical() const;
  std::vector<std::size_t> categorical() const;
  std::size_t index_of(const std::string& name) const;
  // Numerical columns form the continuous block, categorical columns the tokens.
  Layout layout() const;

  nlohmann::json to_json() const;
  static TabularSchema from_json(const nlohmann::json& j);
  bool operator==(const TabularSchema& o) const = default;
};

// Human-readable differences, empty when equal.
std::vector<std::string> schema_diff(const TabularSchema& expected, const TabularSchema& found);

// Rows of cells in schema column order.
struct Dataset {
  TabularSchema schema;
  std::vector<std::vector<std::string>> rows;

  std::size_t size() const { return rows.size(); }
  std::vector<double> numeric_column(std::size_t col) const;
  // Index of each cell in the column's category list (-1 if absent).
  std::vector<int> category_codes(std::size_t col) const;
};

struct CsvOptions {
  // Declared schema (column names must match the header); categories left
  // empty are inferred.
  const TabularSchema* schema = nullptr;
  // Kind overrides for inference, by column name.
  std::map<std::string, ColumnKind> overrides;
  std::string target;
  // Rows with unparseable numerical cells are dropped and listed in the
  // report; strict mode fails instead.
  bool strict = false;
};

struct LoadReport {
  std::vector<std::size_t> rejected_lines;  // 1-based file lines
};

// Quote-aware CSV with a header row.
std::vector<std::vector<std::string>> read_csv_records(std::istream& in);
Dataset parse_csv(std::istream& in, const CsvOptions& options = {}, LoadReport* report = nullptr);
Dataset load_csv(const std::string& path, const CsvOptions& options = {}, LoadReport* report = nullptr);
void write_csv(std::ostream& out, const Dataset& data);
void save_csv(const std::string& path, const Dataset& data);

// JSON sidecar: {"columns": [{"name", "kind", "categories"?}], "target"?}.
TabularSchema load_schema_sidecar(const std::string& path);

std::string format_number(double v);

enum class NumericMode { zscore, quantile };
std::string numeric_mode_name(NumericMode m);
NumericMode parse_numeric_mode(const std::string& s);

struct EncodedTable {
  std::size_t n = 0;
  std::vector<double> x;  // n x numerical columns
  std::vector<int> y;     // n x categorical columns
};

class Preprocessor {
 public:
  static constexpr const char* kUnknown = "<unknown>";

  // Fills missing category inventories (sorted) from the data; with
  // allow_unknown every categorical column gains kUnknown for unseen values.
  static Preprocessor fit(const Dataset& data, NumericMode mode = NumericMode::zscore, bool allow_unknown = false);

  EncodedTable apply(const Dataset& data) const;
  Dataset invert(const EncodedTable& enc) const;

  const TabularSchema& schema() const { return schema_; }
  NumericMode mode() const { return mode_; }

  nlohmann::json to_json() const;
  static Preprocessor from_json(const nlohmann::json& j);

 private:
  struct NumStats {
    double mean = 0.0;
    double std = 1.0;
    std::vector<double> knots;   // quantile mode: increasing data values
    std::vector<double> scores;  // matching normal scores
  };
  double encode_value(const NumStats& st, double v) const;
  double decode_value(const NumStats& st, double z) const;

  TabularSchema schema_;
  NumericMode mode_ = NumericMode::zscore;
  bool allow_unknown_ = false;
  std::vector<NumStats> stats_;  // per numerical column
  std::vector<std::map<std::string, int>> codes_;  // per categorical column
};

struct ColumnScore {
  std::string column;
  double score = 0.0;  // 1 - KS or 1 - TV
};

struct ShapeReport {
  double score = 0.0;  // percent
  std::vector<ColumnScore> columns;
};

struct PairScore {
  std::string a;
  std::string b;
  std::string kind;  // "pearson" or "contingency"
  double score = 0.0;
};

struct TrendReport {
  double score = 0.0;  // percent
  std::vector<PairScore> pairs;
  std::vector<std::string> skipped;  // pairs with a constant real column
};

ShapeReport metric_shape(const Dataset& real, const Dataset& synth);
// Mixed pairs bucket the numerical column into equal-frequency bins taken
// from the real data.
TrendReport metric_trend(const Dataset& real, const Dataset& synth, std::size_t bins = 20);
nlohmann::json metrics_json(const ShapeReport& shape, const TrendReport& trend);

struct TabularModel {
  Preprocessor prep;
  ScoreNetConfig net;
  Schedules sched;
  ParameterStore raw;
  ParameterStore ema;
};

struct TabularTrainOptions {
  Arch arch = Arch::mlp;
  std::size_t hidden_dim = 128;
  std::size_t depth = 3;
  std::size_t time_embed_dim = 32;
  std::size_t heads = 4;
  std::size_t token_embed_dim = 16;
  std::size_t mlp_ratio = 4;
  NumericMode numeric_mode = NumericMode::zscore;
  bool allow_unknown = false;
  Schedules sched;
  TrainConfig train;
  std::uint64_t init_seed = 0;
};

ScoreNetConfig tabular_net_config(const TabularSchema& schema, const TabularTrainOptions& opt);

TabularModel train_tabular(const Dataset& data, const TabularTrainOptions& opt, TrainResult* result = nullptr,
                           const TrainObserver& observer = {});

// Euler-Maruyama for the numerical block and tau-leaping for categories,
// synchronous clocks, no guidance.
SamplerConfig tabular_sampler_defaults();
Dataset synthesize(const TabularModel& model, std::size_t n, const SamplerConfig& config, std::uint64_t seed,
                   bool use_ema = true);

// Four-column fixture with planted dependence: a ~ N(10, 2^2), b ~ N(-1, 0.5^2)
// with corr(a, b) = 0.7, c1 in {p, q, r} w.p. (0.5, 0.3, 0.2), and c2 in
// {w, x, y, z} drawn from a c1-dependent table.
Dataset planted_fixture(std::size_t n, std::uint64_t seed);

}  // namespace mmdiff
