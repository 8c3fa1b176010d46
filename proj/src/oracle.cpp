#include "mmdiff/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "mmdiff/autodiff.hpp"
#include "mmdiff/discrete.hpp"
#include "mmdiff/rng.hpp"
#include "mmdiff/stats.hpp"

namespace mmdiff {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double logsumexp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double z = 0.0;
  for (double x : v) z += std::exp(x - m);
  return m + std::log(z);
}

// log P(y_s | y0 = k).
double log_label_kernel(int ys, std::size_t k, std::size_t K, double surv) {
  if (static_cast<std::size_t>(ys) == K) return std::log1p(-surv);
  return static_cast<std::size_t>(ys) == k ? std::log(surv) : -std::numeric_limits<double>::infinity();
}

}  // namespace

void ToyJointSpec::validate() const {
  const std::size_t K = priors.size();
  if (K == 0) throw std::invalid_argument("toy spec needs at least one label");
  if (means.size() != K || vars.size() != K) throw std::invalid_argument("toy spec arrays differ in length");
  const double total = std::accumulate(priors.begin(), priors.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("toy priors must sum to 1");
  for (std::size_t k = 0; k < K; ++k) {
    if (!(priors[k] > 0.0)) throw std::invalid_argument("toy priors must be positive");
    if (!(vars[k] > 0.0)) throw std::invalid_argument("toy variances must be positive");
    if (means[k].size() != dim) throw std::invalid_argument("toy mean has wrong dimension");
  }
}

ToyJointSpec ToyJointSpec::default_1d() {
  ToyJointSpec s;
  s.dim = 1;
  s.priors = {0.3, 0.5, 0.2};
  s.means = {{-2.0}, {0.5}, {3.0}};
  s.vars = {0.25, 0.25, 0.25};
  return s;
}

std::vector<double> toy_component_logpdf(const ToyJointSpec& spec, const std::vector<double>& xt, double t,
                                         const Schedules& sched) {
  const auto c = sched.cont.vp_coeffs(t);
  const std::size_t K = spec.labels();
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double v = c.mean_coef * c.mean_coef * spec.vars[k] + c.std * c.std;
    double sq = 0.0;
    for (std::size_t j = 0; j < spec.dim; ++j) {
      const double r = xt[j] - c.mean_coef * spec.means[k][j];
      sq += r * r;
    }
    out[k] = -0.5 * static_cast<double>(spec.dim) * (kLog2Pi + std::log(v)) - 0.5 * sq / v;
  }
  return out;
}

double toy_joint_density(const ToyJointSpec& spec, const std::vector<double>& xt, int ys, double t, double s,
                         const Schedules& sched) {
  const std::size_t K = spec.labels();
  if (ys < 0 || static_cast<std::size_t>(ys) > K) throw ContractError("label " + std::to_string(ys) + " out of range");
  const auto lp = toy_component_logpdf(spec, xt, t, sched);
  const double surv = sched.disc.coeffs(s).survival;
  double acc = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double lk = log_label_kernel(ys, k, K, surv);
    if (std::isfinite(lk)) acc += spec.priors[k] * std::exp(lp[k] + lk);
  }
  return acc;
}

double toy_x_density(const ToyJointSpec& spec, const std::vector<double>& xt, double t, const Schedules& sched) {
  const auto lp = toy_component_logpdf(spec, xt, t, sched);
  double acc = 0.0;
  for (std::size_t k = 0; k < spec.labels(); ++k) acc += spec.priors[k] * std::exp(lp[k]);
  return acc;
}

double toy_x_cdf(const ToyJointSpec& spec, double xt, double t, const Schedules& sched) {
  if (spec.dim != 1) throw ContractError("toy_x_cdf needs dim = 1");
  const auto c = sched.cont.vp_coeffs(t);
  double acc = 0.0;
  for (std::size_t k = 0; k < spec.labels(); ++k) {
    const double v = c.mean_coef * c.mean_coef * spec.vars[k] + c.std * c.std;
    acc += spec.priors[k] * normal_cdf((xt - c.mean_coef * spec.means[k][0]) / std::sqrt(v));
  }
  return acc;
}

std::vector<double> toy_posterior(const ToyJointSpec& spec, const std::vector<double>& xt, double t,
                                  const Schedules& sched) {
  auto lp = toy_component_logpdf(spec, xt, t, sched);
  for (std::size_t k = 0; k < lp.size(); ++k) lp[k] += std::log(spec.priors[k]);
  const double z = logsumexp(lp);
  for (auto& v : lp) v = std::exp(v - z);
  return lp;
}

ToyScores toy_scores(const ToyJointSpec& spec, const std::vector<double>& xt, int ys, double t, double s,
                     const Schedules& sched, bool want_ratios) {
  const std::size_t K = spec.labels(), d = spec.dim;
  const bool masked = static_cast<std::size_t>(ys) == K;
  if (want_ratios && !masked) throw ContractError("score ratios requested at an unmasked label");
  const auto c = sched.cont.vp_coeffs(t);
  const auto lp = toy_component_logpdf(spec, xt, t, sched);
  const double surv = sched.disc.coeffs(s).survival;
  std::vector<double> lw(K);
  for (std::size_t k = 0; k < K; ++k) lw[k] = std::log(spec.priors[k]) + lp[k] + log_label_kernel(ys, k, K, surv);
  const double z = logsumexp(lw);
  ToyScores out;
  out.cont.assign(d, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double w = std::exp(lw[k] - z);
    if (w == 0.0) continue;
    const double v = c.mean_coef * c.mean_coef * spec.vars[k] + c.std * c.std;
    for (std::size_t j = 0; j < d; ++j) out.cont[j] += -w * (xt[j] - c.mean_coef * spec.means[k][j]) / v;
  }
  if (want_ratios) {
    // p(x, k) / p(x, M) = surv prior_k N_k / ((1 - surv) sum_j prior_j N_j).
    std::vector<double> lq(K);
    for (std::size_t k = 0; k < K; ++k) lq[k] = std::log(spec.priors[k]) + lp[k];
    const double lz = logsumexp(lq);
    const double pref = surv / sched.disc.mask_prob(s);
    out.ratios.resize(K);
    for (std::size_t k = 0; k < K; ++k) out.ratios[k] = pref * std::exp(lq[k] - lz);
  }
  return out;
}

ToyOracleModel::ToyOracleModel(ToyJointSpec spec, Schedules sched)
    : spec_(std::move(spec)), sched_(sched), layout_(spec_.layout()) {
  spec_.validate();
}

OutputBatch ToyOracleModel::evaluate(const StateBatch& batch) const {
  validate_batch(layout_, batch);
  const std::size_t d = spec_.dim, K = spec_.labels();
  OutputBatch out;
  out.cont_score.resize(batch.n * d);
  out.logits.resize(batch.n * K);
  std::vector<double> x(d);
  for (std::size_t i = 0; i < batch.n; ++i) {
    std::copy(batch.x.begin() + i * d, batch.x.begin() + (i + 1) * d, x.begin());
    const ToyScores sc = toy_scores(spec_, x, batch.y[i], batch.t[i], batch.s[i], sched_, false);
    std::copy(sc.cont.begin(), sc.cont.end(), out.cont_score.begin() + i * d);
    const auto lp = toy_component_logpdf(spec_, x, batch.t[i], sched_);
    for (std::size_t k = 0; k < K; ++k) out.logits[i * K + k] = std::log(spec_.priors[k]) + lp[k];
  }
  return out;
}

PerturbedModel::PerturbedModel(const ScoreModel& base, double eps, std::uint64_t seed) : base_(base), eps_(eps) {
  Rng rng(seed, 0x7e57);
  const std::size_t K = base.layout().total_categories();
  coef_.resize(6 + 4 * K);
  for (auto& c : coef_) c = 2.0 * rng.uniform() - 1.0;
}

OutputBatch PerturbedModel::evaluate(const StateBatch& batch) const {
  OutputBatch out = base_.evaluate(batch);
  const Layout& L = base_.layout();
  const std::size_t d = L.cont_dim, P = L.positions(), T = L.total_categories();
  for (std::size_t i = 0; i < batch.n; ++i) {
    const double x = d > 0 ? batch.x[i * d] : 0.0;
    bool any_masked = false;
    for (std::size_t p = 0; p < P; ++p) any_masked = any_masked || batch.y[i * P + p] == L.mask_id(p);
    const double t = batch.t[i];
    const double dc = coef_[0] * std::sin((1.0 + coef_[1]) * x + 3.0 * coef_[2]) + coef_[3] * (any_masked ? 1.0 : 0.5) +
                      coef_[4] * t + 0.3 * coef_[5] * x;
    for (std::size_t j = 0; j < d; ++j) out.cont_score[i * d + j] += eps_ * dc;
    for (std::size_t k = 0; k < T; ++k) {
      const double* c = &coef_[6 + 4 * k];
      out.logits[i * T + k] += eps_ * (c[0] * std::cos((1.0 + c[1]) * x + 3.0 * c[2]) + c[3] * (1.0 + t));
    }
  }
  return out;
}

QuadGrid QuadGrid::standard() {
  QuadGrid g;
  for (int i = 0; i < 8; ++i) {
    const double v = 0.05 + 0.9 * (i + 0.5) / 8.0;
    g.t.push_back(v);
    g.s.push_back(v);
    g.t_w.push_back(1.0 / 8.0);
    g.s_w.push_back(1.0 / 8.0);
  }
  return g;
}

QuadGrid QuadGrid::with_atoms(std::size_t n, double lo, double p_zero) {
  QuadGrid g;
  g.t.push_back(0.0);
  g.t_w.push_back(p_zero);
  for (std::size_t i = 0; i < n; ++i) {
    g.t.push_back(lo + (1.0 - lo) * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
    g.t_w.push_back((1.0 - p_zero) / static_cast<double>(n));
  }
  g.s = g.t;
  g.s_w = g.t_w;
  return g;
}

namespace {

struct XGrid {
  std::vector<double> x, w;
};

XGrid make_xgrid(const ToyJointSpec& spec, const QuadGrid& grid) {
  double half = grid.x_half_width;
  if (half <= 0.0) {
    double reach = 0.0;
    for (std::size_t k = 0; k < spec.labels(); ++k) {
      reach = std::max(reach, std::abs(spec.means[k][0]) + 10.0 * std::max(1.0, std::sqrt(spec.vars[k])));
    }
    half = std::max(10.0, reach);
  }
  const std::size_t n = std::max<std::size_t>(grid.x_points, 2);
  const double h = 2.0 * half / static_cast<double>(n - 1);
  XGrid g;
  for (std::size_t i = 0; i < n; ++i) {
    g.x.push_back(-half + h * static_cast<double>(i));
    g.w.push_back((i == 0 || i + 1 == n) ? 0.5 * h : h);
  }
  return g;
}

// Model outputs on every x grid point for each label value (plus mask) at (t, s).
OutputBatch eval_grid(const ScoreModel& model, const XGrid& xg, std::size_t K, double t, double s) {
  StateBatch b;
  const std::size_t n = xg.x.size();
  b.n = n * (K + 1);
  for (std::size_t y = 0; y <= K; ++y) {
    for (std::size_t i = 0; i < n; ++i) {
      b.x.push_back(xg.x[i]);
      b.y.push_back(static_cast<int>(y));
    }
  }
  b.t.assign(b.n, t);
  b.s.assign(b.n, s);
  return model.evaluate(b);
}

void require_1d(const ToyJointSpec& spec, const ScoreModel& model) {
  spec.validate();
  if (spec.dim != 1) throw ContractError("quadrature checks need dim = 1");
  if (!(model.layout() == spec.layout())) throw ContractError("model layout does not match the toy spec");
}

enum class DiscForm { score_entropy, cross_entropy };

double gdsm_impl(const ToyJointSpec& spec, const ScoreModel& model, const Schedules& sched, const QuadGrid& grid,
                 double lambda_disc, DiscForm form) {
  require_1d(spec, model);
  const std::size_t K = spec.labels();
  const XGrid xg = make_xgrid(spec, grid);
  const std::size_t n = xg.x.size();
  double total = 0.0;
  for (std::size_t a = 0; a < grid.t.size(); ++a) {
    for (std::size_t b = 0; b < grid.s.size(); ++b) {
      const double t = grid.t[a], s = grid.s[b], w = grid.t_w[a] * grid.s_w[b];
      const OutputBatch o = eval_grid(model, xg, K, t, s);
      const auto c = sched.cont.vp_coeffs(t);
      const auto dc = sched.disc.coeffs(s);
      const double surv = dc.survival;
      double cell = 0.0;
      if (t > 0.0) {
        const double beta = sched.cont.beta(t), v = c.std * c.std, mu = c.mean_coef;
        for (std::size_t y = 0; y <= K; ++y) {
          for (std::size_t i = 0; i < n; ++i) {
            const double x = xg.x[i], st = o.cont_score[y * n + i];
            const double A = st + x / v, B = mu / v;
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
              const double py = y == K ? 1.0 - surv : (y == k ? surv : 0.0);
              if (py == 0.0) continue;
              const double vk = spec.vars[k], m = spec.means[k][0];
              const double vx = mu * mu * vk + v;
              const double n0 = std::exp(-0.5 * (x - mu * m) * (x - mu * m) / vx) / std::sqrt(2.0 * M_PI * vx);
              const double vp = 1.0 / (1.0 / vk + mu * mu / v);
              const double mp = vp * (m / vk + mu * x / v);
              acc += spec.priors[k] * py * n0 * (A * A - 2.0 * A * B * mp + B * B * (vp + mp * mp));
            }
            cell += xg.w[i] * beta * acc;
          }
        }
      }
      if (s > 0.0 && lambda_disc != 0.0) {
        const double pref = surv / sched.disc.mask_prob(s);
        const double sigma = dc.sigma;
        for (std::size_t i = 0; i < n; ++i) {
          const std::vector<double> lg(o.logits.begin() + (K * n + i) * K, o.logits.begin() + (K * n + i + 1) * K);
          const auto pr = softmax(lg);
          const auto lp = toy_component_logpdf(spec, {xg.x[i]}, t, sched);
          double acc = 0.0;
          for (std::size_t k = 0; k < K; ++k) {
            const double mass = spec.priors[k] * (1.0 - surv) * std::exp(lp[k]);
            if (form == DiscForm::score_entropy) {
              acc += mass * sigma * (pref - pref * (std::log(pref) + std::log(pr[k])));
            } else {
              acc += mass * sched.disc.unmask_rate(s) * -std::log(pr[k]);
            }
          }
          cell += xg.w[i] * lambda_disc * acc;
        }
      }
      total += w * cell;
    }
  }
  return total;
}

}  // namespace

double gesm_quadrature(const ToyJointSpec& spec, const ScoreModel& model, const Schedules& sched,
                       const QuadGrid& grid) {
  require_1d(spec, model);
  const std::size_t K = spec.labels();
  const XGrid xg = make_xgrid(spec, grid);
  const std::size_t n = xg.x.size();
  double total = 0.0;
  for (std::size_t a = 0; a < grid.t.size(); ++a) {
    for (std::size_t b = 0; b < grid.s.size(); ++b) {
      const double t = grid.t[a], s = grid.s[b], w = grid.t_w[a] * grid.s_w[b];
      const OutputBatch o = eval_grid(model, xg, K, t, s);
      const double beta = sched.cont.beta(t);
      const auto dc = sched.disc.coeffs(s);
      double cell = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> x{xg.x[i]};
        if (t > 0.0) {
          for (std::size_t y = 0; y <= K; ++y) {
            const double p = toy_joint_density(spec, x, static_cast<int>(y), t, s, sched);
            if (p == 0.0) continue;
            const double st = toy_scores(spec, x, static_cast<int>(y), t, s, sched, false).cont[0];
            const double diff = st - o.cont_score[y * n + i];
            cell += xg.w[i] * p * beta * diff * diff;
          }
        }
        if (s > 0.0) {
          const auto truth = toy_scores(spec, x, static_cast<int>(K), t, s, sched, true).ratios;
          const std::vector<double> lg(o.logits.begin() + (K * n + i) * K, o.logits.begin() + (K * n + i + 1) * K);
          const auto model_ratio = concrete_score_d(static_cast<int>(K), static_cast<int>(K), softmax(lg), s, sched.disc);
          for (std::size_t k = 0; k < K; ++k) {
            const double pk = toy_joint_density(spec, x, static_cast<int>(k), t, s, sched);
            if (pk == 0.0 || truth[k] == 0.0) continue;
            const double r = model_ratio[k] / truth[k];
            cell += xg.w[i] * pk * dc.sigma * (r - std::log(r) - 1.0);
          }
        }
      }
      total += w * cell;
    }
  }
  return total;
}

double gdsm_quadrature(const ToyJointSpec& spec, const ScoreModel& model, const Schedules& sched,
                       const QuadGrid& grid, double lambda_disc) {
  return gdsm_impl(spec, model, sched, grid, lambda_disc, DiscForm::score_entropy);
}

double expected_training_loss(const ToyJointSpec& spec, const ScoreModel& model, const Schedules& sched,
                              const QuadGrid& grid, double lambda_disc) {
  return gdsm_impl(spec, model, sched, grid, lambda_disc, DiscForm::cross_entropy);
}

std::vector<double> jump_phi(const RateMatrix& q, const std::function<std::vector<double>(double)>& f, double t,
                             bool include_time, double h) {
  q.validate();
  const std::size_t S = q.q.rows;
  const auto f0 = f(t);
  if (f0.size() != S) throw ShapeError("jump_phi: function has " + std::to_string(f0.size()) + " states, rates " + std::to_string(S));
  std::vector<double> lf(S), out(S);
  for (std::size_t x = 0; x < S; ++x) {
    if (!(f0[x] > 0.0)) throw ContractError("jump_phi needs a positive function");
    lf[x] = std::log(f0[x]);
  }
  std::vector<double> dt_f(S, 0.0), dt_lf(S, 0.0);
  if (include_time) {
    const auto fp = f(t + h), fm = f(t - h);
    for (std::size_t x = 0; x < S; ++x) {
      dt_f[x] = (fp[x] - fm[x]) / (2.0 * h);
      dt_lf[x] = (std::log(fp[x]) - std::log(fm[x])) / (2.0 * h);
    }
  }
  for (std::size_t x = 0; x < S; ++x) {
    double lf_gen = 0.0, llog_gen = 0.0;
    for (std::size_t y = 0; y < S; ++y) {
      if (y == x) continue;
      lf_gen += q.q(y, x) * (f0[y] - f0[x]);
      llog_gen += q.q(y, x) * (lf[y] - lf[x]);
    }
    out[x] = (dt_f[x] + lf_gen) / f0[x] - (dt_lf[x] + llog_gen);
  }
  return out;
}

std::vector<double> jump_phi_bregman(const RateMatrix& q, const std::vector<double>& f) {
  const std::size_t S = q.q.rows;
  std::vector<double> out(S, 0.0);
  for (std::size_t x = 0; x < S; ++x) {
    for (std::size_t y = 0; y < S; ++y) {
      if (y == x) continue;
      const double r = f[y] / f[x];
      out[x] += q.q(y, x) * (r - std::log(r) - 1.0);
    }
  }
  return out;
}

ReversalReport reversal_check(const ToyJointSpec& spec, const Schedules& sched, const TimeCoupling& coupling,
                              const ReversalOptions& opt) {
  if (spec.dim != 1) throw ContractError("reversal_check needs dim = 1");
  const ToyOracleModel model(spec, sched);
  const std::size_t K = spec.labels(), n = opt.chains;
  SamplerConfig cfg = SamplerConfig::unguided();
  cfg.steps = opt.steps;
  cfg.integrator = opt.integrator;

  std::vector<double> cps = opt.checkpoints_u;
  if (cps.empty()) {
    const bool staged = coupling.kind != TimeCoupling::Kind::synchronous;
    for (std::size_t c = 1; c <= opt.num_checkpoints; ++c) {
      const double frac = staged && c < opt.num_checkpoints ? (static_cast<double>(c) - 0.5) : static_cast<double>(c);
      cps.push_back(1.0 - frac / static_cast<double>(opt.num_checkpoints));
    }
  }
  const auto grid = time_grid(opt.steps, cfg.early_stop);
  // Step index whose end clock is nearest each requested checkpoint; step 0 is
  // the initial noise.
  std::vector<int> steps;
  for (double u : cps) {
    int best = opt.steps;
    double gap = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= opt.steps; ++i) {
      const double g = std::abs(grid[static_cast<std::size_t>(i)] - u);
      if (g < gap) {
        gap = g;
        best = i;
      }
    }
    steps.push_back(best);
  }
  std::vector<std::vector<double>> xs(steps.size(), std::vector<double>(n));
  std::vector<std::vector<int>> ys(steps.size(), std::vector<int>(n));
  cfg.observer = [&](const SamplerSnapshot& snap) {
    for (std::size_t c = 0; c < steps.size(); ++c) {
      if (snap.step != steps[c] || snap.step == opt.steps) continue;
      for (std::size_t i = 0; i < snap.state->n; ++i) {
        xs[c][snap.offset + i] = snap.state->x[i];
        ys[c][snap.offset + i] = snap.state->y[i];
      }
    }
  };
  const SampleResult final_state = sample_joint(model, coupling, n, sched, cfg, opt.seed);
  for (std::size_t c = 0; c < steps.size(); ++c) {
    if (steps[c] != opt.steps) continue;
    xs[c] = final_state.x;
    ys[c] = final_state.y;
  }
  auto clock = [&](double a) { return opt.steps == 0 ? a : std::max(cfg.early_stop, a); };

  ReversalReport rep;
  rep.coupling = coupling_name(coupling.kind);
  rep.chains = n;
  rep.threshold = opt.threshold;
  rep.passed = true;
  for (std::size_t c = 0; c < steps.size(); ++c) {
    CheckpointReport cr;
    cr.step = steps[c];
    const double u = grid[static_cast<std::size_t>(steps[c])];
    cr.t = clock(coupling.cont_time(u));
    cr.s = clock(coupling.disc_time(u));
    const double t = cr.t;
    const auto ks = ks_one_sample(xs[c], [&](double x) { return toy_x_cdf(spec, x, t, sched); });
    cr.ks_statistic = ks.statistic;
    cr.ks_p = ks.p_value;
    std::vector<double> counts(K + 1, 0.0), expect(K + 1);
    for (int y : ys[c]) counts[static_cast<std::size_t>(y)] += 1.0;
    const double surv = sched.disc.coeffs(cr.s).survival;
    for (std::size_t k = 0; k < K; ++k) expect[k] = surv * spec.priors[k];
    expect[K] = 1.0 - surv;
    const auto chi = chi2_gof(counts, expect);
    cr.chi2_statistic = chi.statistic;
    cr.chi2_p = chi.p_value;
    cr.mask_fraction = counts[K] / static_cast<double>(n);
    cr.expected_mask_fraction = expect[K];
    rep.passed = rep.passed && cr.ks_p > opt.threshold && cr.chi2_p > opt.threshold;
    rep.checkpoints.push_back(cr);
  }
  return rep;
}

}  // namespace mmdiff
