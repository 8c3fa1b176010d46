#include "mmdiff/score_net.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mmdiff/rng.hpp"

namespace mmdiff {

ScoreNetConfig ScoreNetConfig::tabular_attn(const Layout& layout) {
  ScoreNetConfig c;
  c.layout = layout;
  c.hidden_dim = 24;
  c.depth = 4;
  c.arch = Arch::attn;
  c.heads = 4;
  return c;
}

ScoreNetConfig ScoreNetConfig::toy_mlp(const Layout& layout) {
  ScoreNetConfig c;
  c.layout = layout;
  return c;
}

void ScoreNetConfig::validate() const {
  if (hidden_dim == 0) throw std::invalid_argument("hidden_dim must be positive");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
    throw std::invalid_argument("time_embed_dim must be even and >= 2, got " + std::to_string(time_embed_dim));
  }
  for (int k : layout.num_categories) {
    if (k < 1) throw std::invalid_argument("every discrete position needs at least one category besides the mask");
  }
  if (layout.cont_dim == 0 && layout.positions() == 0) throw std::invalid_argument("layout has no modalities");
  if (arch == Arch::attn && (heads == 0 || hidden_dim % heads != 0)) {
    throw std::invalid_argument("hidden_dim " + std::to_string(hidden_dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

std::string arch_name(Arch a) { return a == Arch::mlp ? "mlp" : "attn"; }

Arch parse_arch(const std::string& name) {
  if (name == "mlp") return Arch::mlp;
  if (name == "attn") return Arch::attn;
  throw std::invalid_argument("unknown arch '" + name + "' (expected mlp or attn)");
}

std::vector<double> time_frequencies(std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) {
    throw std::invalid_argument("time embedding dim must be even and >= 2, got " + std::to_string(dim));
  }
  const std::size_t half = dim / 2;
  std::vector<double> f(half, 1.0);
  for (std::size_t k = 1; k < half; ++k) {
    f[k] = std::pow(1e4, static_cast<double>(k) / static_cast<double>(half - 1));
  }
  return f;
}

std::vector<double> time_features(double t, std::size_t dim) {
  const auto f = time_frequencies(dim);
  std::vector<double> e(dim);
  for (std::size_t k = 0; k < f.size(); ++k) {
    e[k] = std::sin(f[k] * t);
    e[f.size() + k] = std::cos(f[k] * t);
  }
  return e;
}

namespace {

struct Builder {
  ParameterStore& store;
  Rng& rng;

  void linear(const std::string& name, std::size_t in, std::size_t out, bool zero = false) {
    Tensor w(in, out);
    if (!zero) {
      const double a = 1.0 / std::sqrt(static_cast<double>(in));
      for (auto& v : w.data) v = a * (2.0 * rng.uniform() - 1.0);
    }
    store.add(name + ".w", std::move(w));
    store.add(name + ".b", Tensor(1, out, 0.0));
  }
};

// Parameter access during a forward pass: as differentiable leaves when
// training, as constants otherwise.
struct Ctx {
  Tape& tape;
  const ParameterStore& store;
  bool train;

  Var p(const std::string& name) const {
    const std::size_t i = store.find(name);
    return train ? tape.param(store, i) : tape.constant(store[i].value);
  }
  Var linear(const std::string& name, const Var& x) const { return matmul(x, p(name + ".w")) + p(name + ".b"); }
  Var mlp2(const std::string& name, const Var& x) const {
    return linear(name + ".1", silu(linear(name + ".0", x)));
  }
};

Tensor features_of(const std::vector<double>& times, std::size_t dim) {
  Tensor out(times.size(), dim);
  for (std::size_t i = 0; i < times.size(); ++i) {
    const auto e = time_features(times[i], dim);
    std::copy(e.begin(), e.end(), out.data.begin() + i * dim);
  }
  return out;
}

std::vector<int> column(const StateBatch& b, std::size_t p, std::size_t positions) {
  std::vector<int> ids(b.n);
  for (std::size_t i = 0; i < b.n; ++i) ids[i] = b.y[i * positions + p];
  return ids;
}

Tensor precond(const std::vector<double>& t, const ContinuousSchedule& sched) {
  Tensor out(t.size(), 1);
  for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = 1.0 / std::max(sched.vp_coeffs(t[i]).std, 1e-2);
  return out;
}

}  // namespace

ScoreNet::ScoreNet(ScoreNetConfig config, std::uint64_t seed, ContinuousSchedule schedule)
    : config_(std::move(config)), schedule_(schedule) {
  config_.validate();
  init(seed);
}

ScoreNet::ScoreNet(ScoreNetConfig config, ParameterStore params, ContinuousSchedule schedule)
    : config_(std::move(config)), schedule_(schedule) {
  config_.validate();
  init(0);
  if (params.size() != params_.size()) {
    throw std::invalid_argument("parameter count " + std::to_string(params.size()) + " does not match architecture (" +
                                std::to_string(params_.size()) + ")");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != params_[i].name || !params[i].value.same_shape(params_[i].value)) {
      throw std::invalid_argument("parameter '" + params[i].name + "' " + params[i].value.shape_str() +
                                  " does not match '" + params_[i].name + "' " + params_[i].value.shape_str());
    }
  }
  params_ = std::move(params);
}

void ScoreNet::init(std::uint64_t seed) {
  Rng rng(seed, 0x5c0e);
  Builder b{params_, rng};
  const auto& L = config_.layout;
  const std::size_t H = config_.hidden_dim, D = config_.time_embed_dim, P = L.positions(), d = L.cont_dim;
  b.linear("temb.0", D, H);
  b.linear("temb.1", H, H);
  if (d > 0) {
    b.linear("semb.0", D, H);
    b.linear("semb.1", H, H);
  }
  if (config_.arch == Arch::mlp) {
    const std::size_t E = config_.token_embed_dim;
    for (std::size_t p = 0; p < P; ++p) {
      params_.add_normal("tok" + std::to_string(p), static_cast<std::size_t>(L.num_categories[p]) + 1, E, 1.0, rng);
    }
    b.linear("in", d + P * E, H);
    for (std::size_t k = 0; k < config_.depth; ++k) {
      const std::string n = "block" + std::to_string(k);
      b.linear(n + ".fc1", H, H);
      b.linear(n + ".cond", H, H);
      b.linear(n + ".fc2", H, H);
    }
    if (d > 0) {
      b.linear("cont.0", H, H);
      b.linear("cont.out", H, d, true);
    }
    if (P > 0) {
      b.linear("disc.0", H, H);
      b.linear("disc.out", H, L.total_categories(), true);
    }
    return;
  }
  const std::size_t seq = d + P, F = H * config_.mlp_ratio;
  if (d > 0) {
    b.linear("num.0", 1, H);
    b.linear("num.1", H, H);
    b.linear("num.2", H, H);
    params_.add_normal("type.num", 1, H, 0.02, rng);
  }
  for (std::size_t p = 0; p < P; ++p) {
    params_.add_normal("cat" + std::to_string(p), static_cast<std::size_t>(L.num_categories[p]) + 1, H, 0.02, rng);
  }
  if (P > 0) params_.add_normal("type.cat", 1, H, 0.02, rng);
  params_.add_normal("pos", seq, H, 0.02, rng);
  for (std::size_t k = 0; k < config_.depth; ++k) {
    const std::string n = "dit" + std::to_string(k);
    b.linear(n + ".mod", H, 6 * H, true);
    b.linear(n + ".qkv", H, 3 * H);
    b.linear(n + ".proj", H, H);
    b.linear(n + ".ff1", H, F);
    b.linear(n + ".ff2", F, H);
  }
  if (d > 0) {
    b.linear("cont.0", H, H);
    b.linear("cont.1", H, H);
    b.linear("cont.out", H, 1, true);
  }
  if (P > 0) {
    b.linear("disc.0", H, H);
    b.linear("disc.1", H, H);
    for (std::size_t p = 0; p < P; ++p) {
      b.linear("disc.out" + std::to_string(p), H, static_cast<std::size_t>(L.num_categories[p]), true);
    }
  }
}

NetOutputVars ScoreNet::forward(Tape& tape, const ParameterStore& params, const StateBatch& batch,
                                bool differentiable) const {
  validate_batch(config_.layout, batch);
  return config_.arch == Arch::mlp ? forward_mlp(tape, params, batch, differentiable)
                                   : forward_attn(tape, params, batch, differentiable);
}

NetOutputVars ScoreNet::forward_mlp(Tape& tape, const ParameterStore& ps, const StateBatch& b, bool diff) const {
  const Ctx c{tape, ps, diff};
  const auto& L = config_.layout;
  const std::size_t D = config_.time_embed_dim, P = L.positions(), d = L.cont_dim;
  Var temb = c.mlp2("temb", tape.constant(features_of(b.t, D)));
  std::vector<Var> parts;
  if (d > 0) parts.push_back(tape.constant(Tensor(b.n, d, b.x)));
  for (std::size_t p = 0; p < P; ++p) parts.push_back(embedding(c.p("tok" + std::to_string(p)), column(b, p, P)));
  Var h = c.linear("in", concat_cols(parts)) + temb;
  Var sc = silu(temb);
  for (std::size_t k = 0; k < config_.depth; ++k) {
    const std::string n = "block" + std::to_string(k);
    Var u = silu(c.linear(n + ".fc1", layer_norm_rows(h)) + c.linear(n + ".cond", sc));
    h = h + c.linear(n + ".fc2", u);
  }
  NetOutputVars out;
  if (d > 0) {
    Var semb = c.mlp2("semb", tape.constant(features_of(b.s, D)));
    Var raw = c.linear("cont.out", silu(c.linear("cont.0", h) + semb));
    out.cont_score = raw * tape.constant(precond(b.t, schedule_));
  }
  if (P > 0) {
    Var all = c.linear("disc.out", silu(c.linear("disc.0", h)));
    for (std::size_t p = 0; p < P; ++p) {
      out.logits.push_back(slice_cols(all, L.logit_offset(p), static_cast<std::size_t>(L.num_categories[p])));
    }
  }
  return out;
}

NetOutputVars ScoreNet::forward_attn(Tape& tape, const ParameterStore& ps, const StateBatch& b, bool diff) const {
  const Ctx c{tape, ps, diff};
  const auto& L = config_.layout;
  const std::size_t D = config_.time_embed_dim, P = L.positions(), d = L.cont_dim, H = config_.hidden_dim;
  const std::size_t seq = d + P;
  Var temb = c.mlp2("temb", tape.constant(features_of(b.t, D)));
  std::vector<Var> toks;
  if (d > 0) {
    Var type = c.p("type.num");
    Tensor xs(b.n, d, b.x);
    for (std::size_t j = 0; j < d; ++j) {
      Tensor col(b.n, 1);
      for (std::size_t i = 0; i < b.n; ++i) col.data[i] = xs(i, j);
      Var v = tape.constant(std::move(col));
      v = c.linear("num.2", silu(c.linear("num.1", silu(c.linear("num.0", v)))));
      toks.push_back(v + type);
    }
  }
  if (P > 0) {
    Var type = c.p("type.cat");
    for (std::size_t p = 0; p < P; ++p) {
      toks.push_back(embedding(c.p("cat" + std::to_string(p)), column(b, p, P)) + type);
    }
  }
  Var h = reshape(concat_cols(toks), b.n * seq, H) + tile_rows(c.p("pos"), b.n);
  Var cond = silu(temb);
  for (std::size_t k = 0; k < config_.depth; ++k) {
    const std::string n = "dit" + std::to_string(k);
    Var mod = repeat_rows(c.linear(n + ".mod", cond), seq);
    auto chunk = [&](std::size_t i) { return slice_cols(mod, i * H, H); };
    Var a = layer_norm_rows(h) * add_scalar(chunk(1), 1.0) + chunk(0);
    Var att = c.linear(n + ".proj", self_attention(c.linear(n + ".qkv", a), seq, config_.heads));
    h = h + chunk(2) * att;
    Var m = layer_norm_rows(h) * add_scalar(chunk(4), 1.0) + chunk(3);
    m = c.linear(n + ".ff2", silu(c.linear(n + ".ff1", m)));
    h = h + chunk(5) * m;
  }
  Var flat = reshape(layer_norm_rows(h), b.n, seq * H);
  NetOutputVars out;
  if (d > 0) {
    Var semb = c.mlp2("semb", tape.constant(features_of(b.s, D)));
    std::vector<Var> cols;
    for (std::size_t j = 0; j < d; ++j) {
      Var tj = slice_cols(flat, j * H, H) + semb;
      tj = silu(c.linear("cont.1", silu(c.linear("cont.0", tj))));
      cols.push_back(c.linear("cont.out", tj));
    }
    Var raw = d == 1 ? cols[0] : concat_cols(cols);
    out.cont_score = raw * tape.constant(precond(b.t, schedule_));
  }
  for (std::size_t p = 0; p < P; ++p) {
    Var tp = slice_cols(flat, (d + p) * H, H);
    tp = silu(c.linear("disc.1", silu(c.linear("disc.0", tp))));
    out.logits.push_back(c.linear("disc.out" + std::to_string(p), tp));
  }
  return out;
}

OutputBatch ScoreNet::evaluate(const StateBatch& batch) const { return evaluate_with(params_, batch); }

OutputBatch ScoreNet::evaluate_with(const ParameterStore& params, const StateBatch& batch) const {
  Tape tape;
  NetOutputVars v = forward(tape, params, batch, false);
  OutputBatch out;
  const auto& L = config_.layout;
  if (L.cont_dim > 0) out.cont_score = v.cont_score.value().data;
  if (L.positions() > 0) {
    const std::size_t T = L.total_categories();
    out.logits.assign(batch.n * T, 0.0);
    for (std::size_t p = 0; p < L.positions(); ++p) {
      const Tensor& lg = v.logits[p].value();
      const std::size_t off = L.logit_offset(p);
      for (std::size_t i = 0; i < batch.n; ++i)
        for (std::size_t k = 0; k < lg.cols; ++k) out.logits[i * T + off + k] = lg(i, k);
    }
  }
  return out;
}

}  // namespace mmdiff
