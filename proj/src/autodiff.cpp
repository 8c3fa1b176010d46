#include "mmdiff/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "mmdiff/rng.hpp"

namespace mmdiff {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw ShapeError("tensor [" + std::to_string(r) + ", " + std::to_string(c) + "] given " +
                     std::to_string(data.size()) + " elements");
  }
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(1, n, std::move(values));
}

double Tensor::item() const {
  if (rows != 1 || cols != 1) throw ShapeError("item() on non-scalar tensor " + shape_str());
  return data[0];
}

std::string Tensor::shape_str() const { return "[" + std::to_string(rows) + ", " + std::to_string(cols) + "]"; }

std::size_t ParameterStore::add(std::string name, Tensor value) {
  params_.push_back({std::move(name), std::move(value)});
  return params_.size() - 1;
}

std::size_t ParameterStore::add_glorot(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w(fan_in, fan_out);
  for (auto& x : w.data) x = a * (2.0 * rng.uniform() - 1.0);
  return add(std::move(name), std::move(w));
}

std::size_t ParameterStore::add_normal(std::string name, std::size_t rows, std::size_t cols, double stddev,
                                       Rng& rng) {
  Tensor w(rows, cols);
  for (auto& x : w.data) x = stddev * rng.normal();
  return add(std::move(name), std::move(w));
}

std::size_t ParameterStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ParameterStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

void ParameterStore::round_to(Precision p) {
  if (p != Precision::f32) return;
  for (auto& prm : params_) {
    for (auto& x : prm.value.data) x = static_cast<double>(static_cast<float>(x));
  }
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) { return record(std::move(value), {}, nullptr); }

Var Tape::leaf(Tensor value) {
  Var v = record(std::move(value), {}, nullptr);
  nodes_[v.id].needs_grad = true;
  return v;
}

Var Tape::param(const ParameterStore& store, std::size_t index) {
  if (store_ != nullptr && store_ != &store) throw ContractError("tape already bound to a different parameter store");
  store_ = &store;
  Var v = record(store[index].value, {}, nullptr);
  nodes_[v.id].needs_grad = true;
  nodes_[v.id].param_index = static_cast<long>(index);
  return v;
}

Var Tape::record(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> backward) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor(n.value.rows, n.value.cols, 0.0);
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape != this) throw ContractError("loss recorded on another tape");
  const Tensor& lv = nodes_[loss.id].value;
  if (lv.rows != 1 || lv.cols != 1) throw ContractError("backward() needs a scalar loss, got " + lv.shape_str());
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id].needs_grad) return;
  grad_buffer(loss.id).data[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, i);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Tensor(n.value.rows, n.value.cols, 0.0);
  return n.grad;
}

std::vector<Tensor> Tape::param_grads(const ParameterStore& store) const {
  std::vector<Tensor> out;
  out.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) out.emplace_back(store[i].value.rows, store[i].value.cols, 0.0);
  for (const auto& n : nodes_) {
    if (n.param_index < 0 || n.grad.size() == 0) continue;
    Tensor& g = out[static_cast<std::size_t>(n.param_index)];
    for (std::size_t k = 0; k < g.size(); ++k) g.data[k] += n.grad.data[k];
  }
  return out;
}

namespace {

Tape* common_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return a.tape;
}

std::size_t bdim(std::size_t x, std::size_t y, const Tensor& a, const Tensor& b, const char* op) {
  if (x == y || y == 1) return x;
  if (x == 1) return y;
  throw ShapeError(std::string(op) + ": cannot broadcast " + a.shape_str() + " with " + b.shape_str());
}

// Sums a full-size gradient down to `target` extents.
enum class BinOp { add, sub, mul, div };

// Row and column strides of an operand broadcast against the output.
struct Strides {
  std::size_t r, c;
};
Strides strides_of(const Tensor& v) { return {v.rows == 1 ? 0 : v.cols, v.cols == 1 ? std::size_t{0} : std::size_t{1}}; }

template <BinOp op>
void binary_forward(const Tensor& av, const Tensor& bv, Tensor& out) {
  const Strides sa = strides_of(av), sb = strides_of(bv);
  const std::size_t r = out.rows, c = out.cols;
  for (std::size_t i = 0; i < r; ++i) {
    const double* pa = av.data.data() + i * sa.r;
    const double* pb = bv.data.data() + i * sb.r;
    double* po = out.data.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      const double x = pa[j * sa.c], y = pb[j * sb.c];
      if constexpr (op == BinOp::add) po[j] = x + y;
      if constexpr (op == BinOp::sub) po[j] = x - y;
      if constexpr (op == BinOp::mul) po[j] = x * y;
      if constexpr (op == BinOp::div) po[j] = x / y;
    }
  }
}

// Accumulates d out / d (first or second operand) into its (broadcast) gradient.
template <BinOp op, bool wrt_a>
void binary_backward(const Tensor& g, const Tensor& av, const Tensor& bv, Tensor& target) {
  const Strides sa = strides_of(av), sb = strides_of(bv), st = strides_of(target);
  const std::size_t r = g.rows, c = g.cols;
  for (std::size_t i = 0; i < r; ++i) {
    const double* pg = g.data.data() + i * c;
    const double* pa = av.data.data() + i * sa.r;
    const double* pb = bv.data.data() + i * sb.r;
    double* pt = target.data.data() + i * st.r;
    for (std::size_t j = 0; j < c; ++j) {
      const double gij = pg[j];
      double d = gij;
      if constexpr (wrt_a) {
        if constexpr (op == BinOp::mul) d = gij * pb[j * sb.c];
        if constexpr (op == BinOp::div) d = gij / pb[j * sb.c];
      } else {
        if constexpr (op == BinOp::sub) d = -gij;
        if constexpr (op == BinOp::mul) d = gij * pa[j * sa.c];
        if constexpr (op == BinOp::div) {
          const double y = pb[j * sb.c];
          d = -gij * pa[j * sa.c] / (y * y);
        }
      }
      pt[j * st.c] += d;
    }
  }
}

template <BinOp op>
Var binary(const Var& a, const Var& b, const char* name) {
  Tape* tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t r = bdim(av.rows, bv.rows, av, bv, name);
  const std::size_t c = bdim(av.cols, bv.cols, av, bv, name);
  Tensor out(r, c);
  binary_forward<op>(av, bv, out);
  const int ia = a.id, ib = b.id;
  return tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.needs_grad(ia)) binary_backward<op, true>(g, av, bv, t.grad_buffer(ia));
    if (t.needs_grad(ib)) binary_backward<op, false>(g, av, bv, t.grad_buffer(ib));
  });
}

// Elementwise unary op; df receives (x, y) and returns dy/dx.
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& av = a.value();
  Tensor out(av.rows, av.cols);
  for (std::size_t k = 0; k < av.size(); ++k) out.data[k] = f(av.data[k]);
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, df](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga.data[k] += g.data[k] * df(x.data[k], y.data[k]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary<BinOp::add>(a, b, "add"); }
Var sub(const Var& a, const Var& b) { return binary<BinOp::sub>(a, b, "sub"); }
Var mul(const Var& a, const Var& b) { return binary<BinOp::mul>(a, b, "mul"); }
Var div(const Var& a, const Var& b) { return binary<BinOp::div>(a, b, "div"); }
Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }
Var operator/(const Var& a, const Var& b) { return div(a, b); }

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double y) {
        const double sg = std::abs(x) > 1e-3 ? y / x : 1.0 / (1.0 + std::exp(-x));
        return sg * (1.0 + x * (1.0 - sg));
      });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var matmul(const Var& a, const Var& b) {
  Tape* tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols != bv.rows) throw ShapeError("matmul: " + av.shape_str() + " x " + bv.shape_str());
  Tensor out(av.rows, bv.cols);
  MapM(out.data.data(), out.rows, out.cols).noalias() =
      MapC(av.data.data(), av.rows, av.cols) * MapC(bv.data.data(), bv.rows, bv.cols);
  const int ia = a.id, ib = b.id;
  return tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    MapC G(g.data.data(), g.rows, g.cols);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      MapM(ga.data.data(), ga.rows, ga.cols).noalias() += G * MapC(bv.data.data(), bv.rows, bv.cols).transpose();
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      MapM(gb.data.data(), gb.rows, gb.cols).noalias() += MapC(av.data.data(), av.rows, av.cols).transpose() * G;
    }
  });
}

Var sum(const Var& a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double x : av.data) s += x;
  const int ia = a.id;
  return a.tape->record(Tensor::scalar(s), {ia}, [ia](Tape& t, int self) {
    const double g = t.grad_of(self).data[0];
    for (auto& x : t.grad_buffer(ia).data) x += g;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_rows(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(1, av.cols);
  for (std::size_t i = 0; i < av.rows; ++i)
    for (std::size_t j = 0; j < av.cols; ++j) out.data[j] += av(i, j);
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.rows; ++i)
      for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += g.data[j];
  });
}

Var sum_cols(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.rows, 1);
  for (std::size_t i = 0; i < av.rows; ++i)
    for (std::size_t j = 0; j < av.cols; ++j) out.data[i] += av(i, j);
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.rows; ++i)
      for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += g.data[i];
  });
}

Var mean_cols(const Var& a) { return scale(sum_cols(a), 1.0 / static_cast<double>(a.value().cols)); }

Var softmax_rows(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.rows; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < av.cols; ++j) m = std::max(m, av(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < av.cols; ++j) z += (out(i, j) = std::exp(av(i, j) - m));
    for (std::size_t j = 0; j < av.cols; ++j) out(i, j) /= z;
  }
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols; ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.rows; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < av.cols; ++j) m = std::max(m, av(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < av.cols; ++j) z += std::exp(av(i, j) - m);
    const double lz = m + std::log(z);
    for (std::size_t j = 0; j < av.cols; ++j) out(i, j) = av(i, j) - lz;
  }
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) gs += g(i, j);
      for (std::size_t j = 0; j < y.cols; ++j) ga(i, j) += g(i, j) - std::exp(y(i, j)) * gs;
    }
  });
}

Var layer_norm_rows(const Var& a, double eps) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows, c = av.cols;
  Tensor out(r, c);
  auto inv_sd = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += av(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (av(i, j) - mu) * (av(i, j) - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[i] = is;
    for (std::size_t j = 0; j < c; ++j) out(i, j) = (av(i, j) - mu) * is;
  }
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, inv_sd](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(ia);
    const double n = static_cast<double>(y.cols);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) {
        mg += g(i, j);
        mgy += g(i, j) * y(i, j);
      }
      mg /= n;
      mgy /= n;
      for (std::size_t j = 0; j < y.cols; ++j) ga(i, j) += (*inv_sd)[i] * (g(i, j) - mg - y(i, j) * mgy);
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape* tape = parts[0].tape;
  const std::size_t r = parts[0].value().rows;
  std::size_t c = 0;
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.tape != tape) throw ContractError("operands recorded on different tapes");
    if (p.value().rows != r) {
      throw ShapeError("concat_cols: " + parts[0].value().shape_str() + " with " + p.value().shape_str());
    }
    ids.push_back(p.id);
    offsets.push_back(c);
    c += p.value().cols;
  }
  Tensor out(r, c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pv.cols; ++j) out(i, offsets[k] + j) = pv(i, j);
  }
  return tape->record(std::move(out), ids, [ids, offsets](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      Tensor& gp = t.grad_buffer(ids[k]);
      for (std::size_t i = 0; i < gp.rows; ++i)
        for (std::size_t j = 0; j < gp.cols; ++j) gp(i, j) += g(i, offsets[k] + j);
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (begin + count > av.cols) {
    throw ShapeError("slice_cols [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + av.shape_str());
  }
  Tensor out(av.rows, count);
  for (std::size_t i = 0; i < av.rows; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, begin + j);
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, begin](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < g.cols; ++j) ga(i, begin + j) += g(i, j);
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (begin + count > av.rows) {
    throw ShapeError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + av.shape_str());
  }
  Tensor out(count, av.cols);
  std::copy(av.data.begin() + begin * av.cols, av.data.begin() + (begin + count) * av.cols, out.data.begin());
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, begin](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga.data[begin * ga.cols + k] += g.data[k];
  });
}

Var embedding(const Var& table, const std::vector<int>& indices) {
  const Tensor& tv = table.value();
  Tensor out(indices.size(), tv.cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int ix = indices[i];
    if (ix < 0 || static_cast<std::size_t>(ix) >= tv.rows) {
      throw ShapeError("embedding index " + std::to_string(ix) + " outside table " + tv.shape_str());
    }
    std::copy_n(tv.data.begin() + static_cast<std::size_t>(ix) * tv.cols, tv.cols, out.data.begin() + i * tv.cols);
  }
  const int it = table.id;
  return table.tape->record(std::move(out), {it}, [it, indices](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gt = t.grad_buffer(it);
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < g.cols; ++j) gt(static_cast<std::size_t>(indices[i]), j) += g(i, j);
  });
}

Var pick_cols(const Var& a, const std::vector<int>& cols) {
  const Tensor& av = a.value();
  if (cols.size() != av.rows) {
    throw ShapeError("pick_cols: " + std::to_string(cols.size()) + " indices for " + av.shape_str());
  }
  Tensor out(av.rows, 1);
  for (std::size_t i = 0; i < av.rows; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= av.cols) {
      throw ShapeError("pick_cols index " + std::to_string(cols[i]) + " outside " + av.shape_str());
    }
    out.data[i] = av(i, static_cast<std::size_t>(cols[i]));
  }
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, cols](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < cols.size(); ++i) ga(i, static_cast<std::size_t>(cols[i])) += g.data[i];
  });
}

Var repeat_rows(const Var& a, std::size_t k) {
  const Tensor& av = a.value();
  Tensor out(av.rows * k, av.cols);
  for (std::size_t i = 0; i < av.rows; ++i)
    for (std::size_t r = 0; r < k; ++r)
      std::copy_n(av.data.begin() + i * av.cols, av.cols, out.data.begin() + (i * k + r) * av.cols);
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, k](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.rows; ++i)
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += g(i * k + r, j);
  });
}

Var tile_rows(const Var& a, std::size_t k) {
  const Tensor& av = a.value();
  Tensor out(av.rows * k, av.cols);
  for (std::size_t r = 0; r < k; ++r) std::copy(av.data.begin(), av.data.end(), out.data.begin() + r * av.size());
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, k](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t q = 0; q < ga.size(); ++q) ga.data[q] += g.data[r * ga.size() + q];
  });
}

Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  const Tensor& av = a.value();
  if (rows * cols != av.size()) {
    throw ShapeError("reshape " + av.shape_str() + " to [" + std::to_string(rows) + ", " + std::to_string(cols) + "]");
  }
  Tensor out(rows, cols, av.data);
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t q = 0; q < g.size(); ++q) ga.data[q] += g.data[q];
  });
}

Var self_attention(const Var& qkv, std::size_t seq_len, std::size_t heads) {
  const Tensor& in = qkv.value();
  if (seq_len == 0 || in.rows % seq_len != 0 || in.cols % 3 != 0 || (in.cols / 3) % heads != 0) {
    throw ShapeError("self_attention: input " + in.shape_str() + " with seq_len " + std::to_string(seq_len) +
                     " and " + std::to_string(heads) + " heads");
  }
  const std::size_t H = in.cols / 3, dh = H / heads, B = in.rows / seq_len, L = seq_len;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  // Attention weights for backward, laid out [B][heads][L][L].
  auto probs = std::make_shared<std::vector<double>>(B * heads * L * L);
  Tensor out(in.rows, H);
  std::vector<double> row(L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs->data() + ((b * heads + h) * L) * L;
      for (std::size_t i = 0; i < L; ++i) {
        const double* q = &in.data[(b * L + i) * in.cols + h * dh];
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          const double* k = &in.data[(b * L + j) * in.cols + H + h * dh];
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += q[d] * k[d];
          row[j] = s * inv;
          m = std::max(m, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) z += (row[j] = std::exp(row[j] - m));
        for (std::size_t j = 0; j < L; ++j) P[i * L + j] = row[j] / z;
        double* o = &out.data[(b * L + i) * H + h * dh];
        for (std::size_t j = 0; j < L; ++j) {
          const double* v = &in.data[(b * L + j) * in.cols + 2 * H + h * dh];
          const double p = P[i * L + j];
          for (std::size_t d = 0; d < dh; ++d) o[d] += p * v[d];
        }
      }
    }
  }
  const int ia = qkv.id;
  return qkv.tape->record(std::move(out), {ia}, [ia, probs, B, L, H, dh, heads, inv](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& in = t.value(ia);
    Tensor& gin = t.grad_buffer(ia);
    const std::size_t C = in.cols;
    std::vector<double> dp(L);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* P = probs->data() + ((b * heads + h) * L) * L;
        for (std::size_t i = 0; i < L; ++i) {
          const double* go = &g.data[(b * L + i) * H + h * dh];
          double dot = 0.0;
          for (std::size_t j = 0; j < L; ++j) {
            const double* v = &in.data[(b * L + j) * C + 2 * H + h * dh];
            double s = 0.0;
            for (std::size_t d = 0; d < dh; ++d) s += go[d] * v[d];
            dp[j] = s;
            dot += s * P[i * L + j];
            double* gv = &gin.data[(b * L + j) * C + 2 * H + h * dh];
            const double p = P[i * L + j];
            for (std::size_t d = 0; d < dh; ++d) gv[d] += p * go[d];
          }
          const double* q = &in.data[(b * L + i) * C + h * dh];
          double* gq = &gin.data[(b * L + i) * C + h * dh];
          for (std::size_t j = 0; j < L; ++j) {
            const double ds = P[i * L + j] * (dp[j] - dot) * inv;
            const double* k = &in.data[(b * L + j) * C + H + h * dh];
            double* gk = &gin.data[(b * L + j) * C + H + h * dh];
            for (std::size_t d = 0; d < dh; ++d) {
              gq[d] += ds * k[d];
              gk[d] += ds * q[d];
            }
          }
        }
      }
    }
  });
}

StepReport AdamW::step(ParameterStore& params, const std::vector<Tensor>& grads) {
  return step(params, grads, config_.lr);
}

StepReport AdamW::step(ParameterStore& params, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params.size()) {
    throw ShapeError("adamw: " + std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                     " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(params[i].value)) {
      throw ShapeError("adamw: gradient " + grads[i].shape_str() + " for parameter '" + params[i].name + "' " +
                       params[i].value.shape_str());
    }
    for (double g : grads[i].data) {
      if (!std::isfinite(g)) {
        return {false, "non-finite gradient in '" + params[i].name + "' at step " + std::to_string(state_.step + 1)};
      }
    }
  }
  if (state_.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state_.m.emplace_back(params[i].value.rows, params[i].value.cols, 0.0);
      state_.v.emplace_back(params[i].value.rows, params[i].value.cols, 0.0);
    }
  }
  state_.step += 1;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value.data;
    auto& m = state_.m[i].data;
    auto& v = state_.v[i].data;
    const auto& g = grads[i].data;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double mh = m[k] / c1, vh = v[k] / c2;
      w[k] -= lr * (mh / (std::sqrt(vh) + config_.eps) + config_.weight_decay * w[k]);
    }
  }
  return {};
}

namespace {

double rel_err(double a, double n, double floor) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}); }

// Fourth-order central stencil; step eps^(1/5) balances roundoff and truncation.
double fd_step(double x) { return std::pow(std::numeric_limits<double>::epsilon(), 0.2) * std::max(1.0, std::abs(x)); }

template <class Eval>
double central_difference(double& slot, const Eval& eval) {
  const double x0 = slot, h = fd_step(x0);
  auto at = [&](double d) {
    slot = x0 + d;
    return eval();
  };
  const double d1 = at(h) - at(-h), d2 = at(2.0 * h) - at(-2.0 * h);
  slot = x0;
  return (8.0 * d1 - d2) / (12.0 * h);
}

}  // namespace

GradCheckResult grad_check(const TapeFunction& f, const std::vector<Tensor>& point, double tolerance) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> xs;
    for (const auto& p : point) xs.push_back(tape.leaf(p));
    Var y = f(tape, xs);
    tape.backward(y);
    for (const auto& x : xs) analytic.push_back(tape.grad(x));
  }
  auto eval = [&](const std::vector<Tensor>& pts) {
    Tape tape;
    std::vector<Var> xs;
    for (const auto& p : pts) xs.push_back(tape.constant(p));
    return f(tape, xs).value().item();
  };
  double gmax = 0.0;
  for (const auto& g : analytic)
    for (double x : g.data) gmax = std::max(gmax, std::abs(x));
  const double floor = 1e-6 * (1.0 + gmax);
  GradCheckResult res;
  std::vector<Tensor> work = point;
  for (std::size_t a = 0; a < point.size(); ++a) {
    for (std::size_t k = 0; k < point[a].size(); ++k) {
      const double num = central_difference(work[a].data[k], [&] { return eval(work); });
      res.max_rel_error = std::max(res.max_rel_error, rel_err(analytic[a].data[k], num, floor));
      res.checked += 1;
    }
  }
  res.passed = res.max_rel_error <= tolerance;
  return res;
}

GradCheckResult grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& point, double tolerance) {
  return grad_check([&f](Tape& t, const std::vector<Var>& xs) { return f(t, xs[0]); }, std::vector<Tensor>{point},
                    tolerance);
}

GradCheckResult grad_check_params(const std::function<Var(Tape&, ParameterStore&)>& f, ParameterStore& store,
                                  double tolerance, std::size_t max_coords_per_param) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var y = f(tape, store);
    tape.backward(y);
    analytic = tape.param_grads(store);
  }
  auto eval = [&]() {
    Tape tape;
    return f(tape, store).value().item();
  };
  double gmax = 0.0;
  for (const auto& g : analytic)
    for (double x : g.data) gmax = std::max(gmax, std::abs(x));
  const double floor = 1e-6 * (1.0 + gmax);
  GradCheckResult res;
  for (std::size_t a = 0; a < store.size(); ++a) {
    auto& w = store[a].value.data;
    const std::size_t n = w.size();
    const std::size_t stride = (max_coords_per_param == 0 || n <= max_coords_per_param) ? 1 : n / max_coords_per_param;
    for (std::size_t k = 0; k < n; k += stride) {
      const double num = central_difference(w[k], eval);
      res.max_rel_error = std::max(res.max_rel_error, rel_err(analytic[a].data[k], num, floor));
      res.checked += 1;
    }
  }
  res.passed = res.max_rel_error <= tolerance;
  return res;
}

}  // namespace mmdiff
