#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmdiff {

class Rng;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Row-major 2-D array. Scalars are 1x1, vectors are 1xn or nx1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row(std::vector<double> values);

  std::size_t size() const { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double item() const;
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_str() const;
};

enum class Precision { f32, f64 };

struct Parameter {
  std::string name;
  Tensor value;
};

// Owns trainable tensors. Indices are stable and serve as parameter ids.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor value);
  // Glorot-uniform init for a fan_in x fan_out weight.
  std::size_t add_glorot(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng);
  std::size_t add_normal(std::string name, std::size_t rows, std::size_t cols, double stddev, Rng& rng);

  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  // Index by name; throws std::out_of_range when absent.
  std::size_t find(const std::string& name) const;

  void round_to(Precision p);

 private:
  std::vector<Parameter> params_;
};

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
};

// Dynamic reverse-mode recording. Rebuilt for every forward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf that accumulates a gradient (used for inputs under grad_check).
  Var leaf(Tensor value);
  // Leaf bound to a stored parameter; gradients are reported by parameter id.
  Var param(const ParameterStore& store, std::size_t index);

  // Runs reverse accumulation from a 1x1 loss.
  void backward(const Var& loss);

  const Tensor& value(int id) const { return nodes_[id].value; }
  // Gradient of a leaf after backward(); zeros when the leaf was unused.
  Tensor grad(const Var& v) const;
  // Gradients for every parameter of `store`, zero for unused parameters.
  std::vector<Tensor> param_grads(const ParameterStore& store) const;

  std::size_t size() const { return nodes_.size(); }

  // Used by primitives.
  Var record(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> backward);
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  Tensor& grad_buffer(int id);
  const Tensor& grad_of(int id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&, int)> backward;
    bool needs_grad = false;
    long param_index = -1;
  };
  std::vector<Node> nodes_;
  const ParameterStore* store_ = nullptr;
};

// Elementwise with broadcasting: each extent must match or be 1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);

Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var matmul(const Var& a, const Var& b);

// All elements to 1x1.
Var sum(const Var& a);
Var mean(const Var& a);
// Reduce over rows to 1 x cols.
Var sum_rows(const Var& a);
// Reduce over columns to rows x 1.
Var sum_cols(const Var& a);
Var mean_cols(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var silu(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
// Per-row normalization to zero mean and unit variance (no affine part).
Var layer_norm_rows(const Var& a, double eps = 1e-6);

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
// out[i] = table[indices[i]].
Var embedding(const Var& table, const std::vector<int>& indices);
// out[i] = a[i, cols[i]] as an n x 1 column.
Var pick_cols(const Var& a, const std::vector<int>& cols);
// Each row repeated k times in place: [r, c] -> [r k, c].
Var repeat_rows(const Var& a, std::size_t k);
// Whole block stacked k times: [r, c] -> [k r, c].
Var tile_rows(const Var& a, std::size_t k);
Var reshape(const Var& a, std::size_t rows, std::size_t cols);

// Multi-head self attention over sequences of length seq_len packed as rows.
// qkv is [B seq_len, 3 H] holding Q | K | V; returns [B seq_len, H].
Var self_attention(const Var& qkv, std::size_t seq_len, std::size_t heads);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.9;
  double weight_decay = 0.03;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
};

struct StepReport {
  bool applied = true;
  std::string message;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Rejects the update (state untouched) when any gradient is non-finite.
  StepReport step(ParameterStore& params, const std::vector<Tensor>& grads);
  // Same, with an explicit learning rate for this step (warmup).
  StepReport step(ParameterStore& params, const std::vector<Tensor>& grads, double lr);

  const AdamWConfig& config() const { return config_; }
  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }

 private:
  AdamWConfig config_;
  OptimizerState state_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool passed = true;
  std::size_t checked = 0;
};

using TapeFunction = std::function<Var(Tape&, const std::vector<Var>&)>;

// Reverse-mode gradient against central differences with step
// h = cbrt(eps) max(1, |x|). Error per coordinate is |a - n| / max(|a|, |n|, 1e-6 (1 + max|a|)).
GradCheckResult grad_check(const TapeFunction& f, const std::vector<Tensor>& point, double tolerance);
GradCheckResult grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& point,
                           double tolerance);

// Same check over the parameters of a store; f builds the loss from store params.
GradCheckResult grad_check_params(const std::function<Var(Tape&, ParameterStore&)>& f, ParameterStore& store,
                                  double tolerance, std::size_t max_coords_per_param = 0);

}  // namespace mmdiff
