#include "mmdiff/multimodal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "mmdiff/continuous.hpp"
#include "mmdiff/discrete.hpp"

namespace mmdiff {

ProductState sample_forward_joint(const std::vector<double>& x0, const std::vector<int>& y0, double t, double s,
                                  const Layout& layout, const Schedules& sched, Rng& rng) {
  if (x0.size() != layout.cont_dim) {
    throw ShapeError("continuous part of size " + std::to_string(x0.size()) + " for dim " +
                     std::to_string(layout.cont_dim));
  }
  ProductState st;
  st.x = sample_forward_c(x0, t, sched.cont, rng);
  st.y = mask_forward_d(y0, layout, s, sched.disc, rng);
  st.t = t;
  st.s = s;
  return st;
}

namespace {

double draw_clock(const TimeDraw& d, double p_zero, Rng& rng) {
  const double u = rng.uniform();
  const double v = d.t_min + (1.0 - d.t_min) * rng.uniform();
  return u < p_zero ? 0.0 : v;
}

void check_rows(const std::vector<double>& x0, const std::vector<int>& y0, std::size_t n, const Layout& layout) {
  if (x0.size() != n * layout.cont_dim || y0.size() != n * layout.positions()) {
    throw ShapeError("clean batch of " + std::to_string(n) + " rows has " + std::to_string(x0.size()) +
                     " continuous and " + std::to_string(y0.size()) + " discrete entries");
  }
}

}  // namespace

NoisedBatch noise_batch_at(const std::vector<double>& x0, const std::vector<int>& y0, const std::vector<double>& t,
                           const std::vector<double>& s, const Layout& layout, const Schedules& sched, Rng& rng) {
  const std::size_t n = t.size(), d = layout.cont_dim, P = layout.positions();
  check_rows(x0, y0, n, layout);
  if (s.size() != n) throw ShapeError("clock vectors differ in length");
  NoisedBatch b;
  b.x0 = x0;
  b.y0 = y0;
  b.state.n = n;
  b.state.t = t;
  b.state.s = s;
  b.state.x.resize(n * d);
  b.state.y.resize(n * P);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> xi(x0.begin() + i * d, x0.begin() + (i + 1) * d);
    std::vector<int> yi(y0.begin() + i * P, y0.begin() + (i + 1) * P);
    const ProductState st = sample_forward_joint(xi, yi, t[i], s[i], layout, sched, rng);
    std::copy(st.x.begin(), st.x.end(), b.state.x.begin() + i * d);
    std::copy(st.y.begin(), st.y.end(), b.state.y.begin() + i * P);
  }
  return b;
}

NoisedBatch make_noised_batch(const std::vector<double>& x0, const std::vector<int>& y0, std::size_t n,
                              const Layout& layout, const Schedules& sched, const TimeDraw& draw, Rng& rng) {
  std::vector<double> t(n), s(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = draw_clock(draw, draw.p_zero_t, rng);
    s[i] = draw_clock(draw, draw.p_zero_s, rng);
  }
  return noise_batch_at(x0, y0, t, s, layout, sched, rng);
}

Var gdsm_loss_vars(Tape& tape, const NetOutputVars& out, const NoisedBatch& batch, const Layout& layout,
                   const Schedules& sched, double lambda_disc) {
  const std::size_t n = batch.state.n, d = layout.cont_dim, P = layout.positions();
  if (n == 0) throw ContractError("loss over an empty batch");
  std::vector<Var> terms;
  if (d > 0) {
    Tensor target(n, d), w(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = batch.state.t[i];
      if (t <= 0.0) continue;
      const auto c = sched.cont.vp_coeffs(t);
      const double var = c.std * c.std;
      for (std::size_t j = 0; j < d; ++j) {
        target(i, j) = -(batch.state.x[i * d + j] - c.mean_coef * batch.x0[i * d + j]) / var;
      }
      w.data[i] = sched.cont.beta(t);
    }
    Var sq = sum_cols(square(out.cont_score - tape.constant(std::move(target))));
    terms.push_back(sum(sq * tape.constant(std::move(w))));
  }
  if (P > 0 && lambda_disc != 0.0) {
    for (std::size_t p = 0; p < P; ++p) {
      Tensor w(n, 1);
      std::vector<int> cls(n);
      for (std::size_t i = 0; i < n; ++i) {
        cls[i] = batch.y0[i * P + p];
        if (batch.state.y[i * P + p] == layout.mask_id(p)) w.data[i] = -lambda_disc * sched.disc.unmask_rate(batch.state.s[i]);
      }
      Var picked = pick_cols(log_softmax_rows(out.logits[p]), cls);
      terms.push_back(sum(picked * tape.constant(std::move(w))));
    }
  }
  Var total = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) total = total + terms[k];
  return scale(total, 1.0 / static_cast<double>(n));
}

double gdsm_loss_on(const ScoreModel& model, const NoisedBatch& batch, const Schedules& sched, double lambda_disc) {
  const Layout& L = model.layout();
  const OutputBatch o = model.evaluate(batch.state);
  const std::size_t n = batch.state.n, T = L.total_categories();
  Tape tape;
  NetOutputVars v;
  if (L.cont_dim > 0) v.cont_score = tape.constant(Tensor(n, L.cont_dim, o.cont_score));
  for (std::size_t p = 0; p < L.positions(); ++p) {
    const std::size_t K = static_cast<std::size_t>(L.num_categories[p]), off = L.logit_offset(p);
    Tensor lg(n, K);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < K; ++k) lg(i, k) = o.logits[i * T + off + k];
    v.logits.push_back(tape.constant(std::move(lg)));
  }
  return gdsm_loss_vars(tape, v, batch, L, sched, lambda_disc).value().item();
}

double gdsm_loss(const ScoreModel& model, const std::vector<double>& x0, const std::vector<int>& y0, std::size_t n,
                 const Schedules& sched, double lambda_disc, const TimeDraw& draw, Rng& rng) {
  const NoisedBatch b = make_noised_batch(x0, y0, n, model.layout(), sched, draw, rng);
  return gdsm_loss_on(model, b, sched, lambda_disc);
}

void GuidanceSpec::validate() const {
  if (!(interval_lo <= interval_hi)) throw std::invalid_argument("guidance interval needs lo <= hi");
  if (!(condition_noise >= 0.0 && condition_noise <= 1.0)) {
    throw std::invalid_argument("condition noise must lie in [0, 1]");
  }
}

std::vector<int> remask_forward(const std::vector<int>& y, const Layout& layout, double s_from, double s_to,
                                const DiscreteSchedule& sched, Rng& rng) {
  const std::size_t P = layout.positions();
  const double keep = sched.coeffs(s_to).survival / sched.coeffs(s_from).survival;
  std::vector<int> out(y);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t p = i % P;
    if (rng.uniform() >= keep) out[i] = layout.mask_id(p);
  }
  return out;
}

std::vector<double> renoise_forward(const std::vector<double>& x, double t_from, double t_to,
                                    const ContinuousSchedule& sched, Rng& rng) {
  const auto a = sched.vp_coeffs(t_from), b = sched.vp_coeffs(t_to);
  const double m = b.mean_coef / a.mean_coef;
  const double sd = std::sqrt(std::max(0.0, b.std * b.std - m * m * a.std * a.std));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = m * x[i] + sd * rng.normal();
  return out;
}

std::vector<double> guided_score_c(const ScoreModel& model, const StateBatch& batch, double omega, double sigma,
                                   const Schedules& sched, Rng& rng) {
  if (omega == 1.0) return model.evaluate(batch).cont_score;
  for (double sc : batch.s) {
    if (!(sigma > sc)) {
      throw ContractError("condition noise " + std::to_string(sigma) + " must exceed condition clock " +
                          std::to_string(sc));
    }
  }
  const auto cond = model.evaluate(batch).cont_score;
  StateBatch noisy = batch;
  noisy.y = remask_forward(batch.y, model.layout(), batch.s.empty() ? 0.0 : batch.s[0], sigma, sched.disc, rng);
  std::fill(noisy.s.begin(), noisy.s.end(), sigma);
  const auto unc = model.evaluate(noisy).cont_score;
  std::vector<double> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = omega * cond[i] + (1.0 - omega) * unc[i];
  return out;
}

std::vector<double> guided_logits_d(const ScoreModel& model, const StateBatch& batch, double omega, double sigma,
                                    const Schedules& sched, Rng& rng) {
  if (omega == 1.0) return model.evaluate(batch).logits;
  for (double tc : batch.t) {
    if (!(sigma > tc)) {
      throw ContractError("condition noise " + std::to_string(sigma) + " must exceed condition clock " +
                          std::to_string(tc));
    }
  }
  const auto cond = model.evaluate(batch).logits;
  StateBatch noisy = batch;
  noisy.x = renoise_forward(batch.x, batch.t.empty() ? 0.0 : batch.t[0], sigma, sched.cont, rng);
  std::fill(noisy.t.begin(), noisy.t.end(), sigma);
  const auto unc = model.evaluate(noisy).logits;
  std::vector<double> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = omega * cond[i] + (1.0 - omega) * unc[i];
  return out;
}

TimeCoupling TimeCoupling::custom(std::vector<double> knots, std::vector<double> alpha_cont,
                                  std::vector<double> alpha_disc) {
  TimeCoupling c{Kind::custom, std::move(knots), std::move(alpha_cont), std::move(alpha_disc)};
  c.validate();
  return c;
}

namespace {

double interp(const std::vector<double>& xs, const std::vector<double>& ys, double u) {
  if (u <= xs.front()) return ys.front();
  if (u >= xs.back()) return ys.back();
  const auto it = std::upper_bound(xs.begin(), xs.end(), u);
  const std::size_t k = static_cast<std::size_t>(it - xs.begin());
  const double w = (u - xs[k - 1]) / (xs[k] - xs[k - 1]);
  return ys[k - 1] + w * (ys[k] - ys[k - 1]);
}

void check_table(const std::vector<double>& knots, const std::vector<double>& a, const char* which) {
  if (a.size() != knots.size()) throw std::invalid_argument(std::string(which) + " table length != knot count");
  if (a.front() != 0.0 || a.back() != 1.0) throw std::invalid_argument(std::string(which) + " must map 0->0 and 1->1");
  for (std::size_t k = 1; k < a.size(); ++k) {
    if (a[k] < a[k - 1]) throw std::invalid_argument(std::string(which) + " must be non-decreasing");
  }
}

}  // namespace

double TimeCoupling::cont_time(double u) const {
  switch (kind) {
    case Kind::synchronous: return u;
    case Kind::staged_disc_first: return std::min(1.0, 2.0 * u);
    case Kind::staged_cont_first: return std::max(0.0, 2.0 * u - 1.0);
    case Kind::custom: return interp(knots, alpha_cont, u);
  }
  return u;
}

double TimeCoupling::disc_time(double u) const {
  switch (kind) {
    case Kind::synchronous: return u;
    case Kind::staged_disc_first: return std::max(0.0, 2.0 * u - 1.0);
    case Kind::staged_cont_first: return std::min(1.0, 2.0 * u);
    case Kind::custom: return interp(knots, alpha_disc, u);
  }
  return u;
}

void TimeCoupling::validate() const {
  if (kind != Kind::custom) return;
  if (knots.size() < 2 || knots.front() != 0.0 || knots.back() != 1.0) {
    throw std::invalid_argument("custom coupling knots must run from 0 to 1");
  }
  for (std::size_t k = 1; k < knots.size(); ++k) {
    if (!(knots[k] > knots[k - 1])) throw std::invalid_argument("custom coupling knots must increase strictly");
  }
  check_table(knots, alpha_cont, "continuous map");
  check_table(knots, alpha_disc, "discrete map");
}

std::string coupling_name(TimeCoupling::Kind k) {
  switch (k) {
    case TimeCoupling::Kind::synchronous: return "synchronous";
    case TimeCoupling::Kind::staged_cont_first: return "staged-cont-first";
    case TimeCoupling::Kind::staged_disc_first: return "staged-disc-first";
    case TimeCoupling::Kind::custom: return "custom";
  }
  return "custom";
}

TimeCoupling parse_coupling(const std::string& name) {
  if (name == "synchronous") return TimeCoupling::synchronous();
  if (name == "staged-cont-first") return TimeCoupling::staged_cont_first();
  if (name == "staged-disc-first") return TimeCoupling::staged_disc_first();
  throw std::invalid_argument("unknown coupling '" + name + "'");
}

SamplerConfig SamplerConfig::unguided() {
  SamplerConfig c;
  c.guidance.omega = 1.0;
  return c;
}

void SamplerConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (!(early_stop > 0.0 && early_stop < 1.0)) throw std::invalid_argument("early_stop must lie in (0, 1)");
  if (chunk == 0) throw std::invalid_argument("chunk must be positive");
  guidance.validate();
}

std::vector<double> time_grid(int steps, double early_stop) {
  std::vector<double> u(static_cast<std::size_t>(steps) + 1, 1.0);
  for (int i = 1; i <= steps; ++i) {
    u[static_cast<std::size_t>(i)] = 1.0 - (1.0 - early_stop) * static_cast<double>(i) / static_cast<double>(steps);
  }
  if (steps > 0) u.back() = early_stop;
  return u;
}

void for_each_chunk(std::size_t n, std::size_t chunk, std::size_t workers,
                    const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  const std::size_t nchunks = (n + chunk - 1) / chunk;
  if (workers <= 1 || nchunks <= 1) {
    for (std::size_t c = 0; c < nchunks; ++c) fn(c, c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < nchunks; c += workers) fn(c, c * chunk, std::min(n, (c + 1) * chunk));
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

constexpr std::uint64_t kGuidanceStream = 0x9d1a;

StateBatch make_state(const std::vector<double>& x, const std::vector<int>& y, std::size_t n, double t, double s) {
  StateBatch b;
  b.n = n;
  b.x = x;
  b.y = y;
  b.t.assign(n, t);
  b.s.assign(n, s);
  return b;
}

std::vector<double> normals(std::size_t m, Rng& rng) {
  std::vector<double> x(m);
  for (auto& v : x) v = rng.normal();
  return x;
}

// x0-probabilities per row and position from concatenated logits, then one leap.
std::vector<int> leap_rows(const std::vector<int>& y, const std::vector<double>& logits, std::size_t n,
                           const Layout& L, double s, double ds, const DiscreteSchedule& sched, Rng& rng,
                           bool force) {
  const std::size_t P = L.positions(), T = L.total_categories();
  std::vector<int> out(y.size());
  std::vector<std::vector<double>> probs(P);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> row(y.begin() + i * P, y.begin() + (i + 1) * P);
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t off = L.logit_offset(p), K = static_cast<std::size_t>(L.num_categories[p]);
      probs[p] = softmax(std::vector<double>(logits.begin() + i * T + off, logits.begin() + i * T + off + K));
    }
    const auto nr = tau_leap_step(row, probs, L, s, ds, sched, rng, force);
    std::copy(nr.begin(), nr.end(), out.begin() + i * P);
  }
  return out;
}

void notify(const SamplerConfig& cfg, int step, double u, double t, double s, std::size_t offset,
            const std::vector<double>& x, const std::vector<int>& y, std::size_t n) {
  if (!cfg.observer) return;
  const StateBatch st = make_state(x, y, n, t, s);
  cfg.observer(SamplerSnapshot{step, u, t, s, offset, &st});
}

}  // namespace

SampleResult sample_cond_d_given_c(const ScoreModel& model, const std::vector<double>& x_cond, std::size_t n,
                                   double t_cond, const Schedules& sched, const SamplerConfig& config,
                                   std::uint64_t seed) {
  config.validate();
  const Layout& L = model.layout();
  const std::size_t d = L.cont_dim, P = L.positions();
  if (x_cond.size() != n * d) throw ShapeError("condition batch size mismatch in sample_cond_d_given_c");
  SampleResult res{n, x_cond, std::vector<int>(n * P)};
  const auto grid = time_grid(config.steps, config.early_stop);
  Rng base(seed);
  for_each_chunk(n, config.chunk, config.workers, [&](std::size_t c, std::size_t b, std::size_t e) {
    Rng rng = base.split(c), grng = base.split(c).split(kGuidanceStream);
    const std::size_t m = e - b;
    std::vector<double> x(x_cond.begin() + b * d, x_cond.begin() + e * d);
    std::vector<int> y(m * P);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < P; ++p) y[i * P + p] = L.mask_id(p);
    for (int i = 0; i < config.steps; ++i) {
      const double s = grid[i], sn = grid[i + 1];
      const double omega = config.guidance.omega_at(s);
      const auto logits =
          guided_logits_d(model, make_state(x, y, m, t_cond, s), omega, config.guidance.condition_noise, sched, grng);
      y = leap_rows(y, logits, m, L, s, s - sn, sched.disc, rng, i + 1 == config.steps);
      notify(config, i + 1, sn, t_cond, sn, b, x, y, m);
    }
    std::copy(y.begin(), y.end(), res.y.begin() + b * P);
  });
  return res;
}

SampleResult sample_cond_c_given_d(const ScoreModel& model, const std::vector<int>& y_cond, std::size_t n,
                                   double s_cond, const Schedules& sched, const SamplerConfig& config,
                                   std::uint64_t seed) {
  config.validate();
  const Layout& L = model.layout();
  const std::size_t d = L.cont_dim, P = L.positions();
  if (y_cond.size() != n * P) throw ShapeError("condition batch size mismatch in sample_cond_c_given_d");
  SampleResult res{n, std::vector<double>(n * d), y_cond};
  const auto grid = time_grid(config.steps, config.early_stop);
  Rng base(seed);
  for_each_chunk(n, config.chunk, config.workers, [&](std::size_t c, std::size_t b, std::size_t e) {
    Rng rng = base.split(c), grng = base.split(c).split(kGuidanceStream);
    const std::size_t m = e - b;
    const std::vector<int> y(y_cond.begin() + b * P, y_cond.begin() + e * P);
    std::vector<double> x = normals(m * d, rng);
    for (int i = 0; i < config.steps; ++i) {
      const double t = grid[i], tn = grid[i + 1];
      const double omega = config.guidance.omega_at(t);
      const ScoreFn score = [&](const std::vector<double>& xs, double tau) {
        return guided_score_c(model, make_state(xs, y, m, tau, s_cond), omega, config.guidance.condition_noise,
                              sched, grng);
      };
      if (config.integrator == Integrator::heun) {
        x = heun_step(x, t, tn - t, score, sched.cont);
      } else {
        x = em_step(x, t, tn - t, score(x, t), sched.cont, rng);
      }
      notify(config, i + 1, tn, tn, s_cond, b, x, y, m);
    }
    std::copy(x.begin(), x.end(), res.x.begin() + b * d);
  });
  return res;
}

SampleResult sample_joint(const ScoreModel& model, const TimeCoupling& coupling, std::size_t n,
                          const Schedules& sched, const SamplerConfig& config, std::uint64_t seed) {
  config.validate();
  coupling.validate();
  const Layout& L = model.layout();
  const std::size_t d = L.cont_dim, P = L.positions();
  SampleResult res{n, std::vector<double>(n * d), std::vector<int>(n * P)};
  const auto grid = time_grid(config.steps, config.early_stop);
  const double eps = config.early_stop;
  auto tclock = [&](double u) { return std::max(eps, coupling.cont_time(u)); };
  auto sclock = [&](double u) { return std::max(eps, coupling.disc_time(u)); };
  const double s_final = sclock(grid.back());
  Rng base(seed);
  for_each_chunk(n, config.chunk, config.workers, [&](std::size_t c, std::size_t b, std::size_t e) {
    Rng rng = base.split(c), grng = base.split(c).split(kGuidanceStream);
    const std::size_t m = e - b;
    std::vector<double> x = normals(m * d, rng);
    std::vector<int> y(m * P);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < P; ++p) y[i * P + p] = L.mask_id(p);
    for (int i = 0; i < config.steps; ++i) {
      const double u = grid[i], un = grid[i + 1];
      const double t = tclock(u), tn = tclock(un), s = sclock(u), sn = sclock(un);
      double w_x = 1.0, w_y = 1.0, sig_y = 1.0, sig_x = 1.0;
      if (config.joint_guidance) {
        const double w = config.guidance.omega_at(u);
        sig_y = config.joint_fixed_sigma > 0.0 ? config.joint_fixed_sigma : std::min(1.0, s + config.joint_sigma_offset);
        sig_x = config.joint_fixed_sigma > 0.0 ? config.joint_fixed_sigma : std::min(1.0, t + config.joint_sigma_offset);
        w_x = sig_y > s ? w : 1.0;
        w_y = sig_x > t ? w : 1.0;
      }
      const StateBatch st = make_state(x, y, m, t, s);
      std::vector<double> score, logits;
      if (w_x == 1.0 && w_y == 1.0) {
        OutputBatch o = model.evaluate(st);
        score = std::move(o.cont_score);
        logits = std::move(o.logits);
      } else {
        if (d > 0) score = guided_score_c(model, st, w_x, sig_y, sched, grng);
        if (P > 0) logits = guided_logits_d(model, st, w_y, sig_x, sched, grng);
      }
      if (d > 0 && tn < t) {
        if (config.integrator == Integrator::heun) {
          const auto v_old = flow_velocity(x, score, sched.cont.beta(t));
          std::vector<double> xh(x.size());
          for (std::size_t k = 0; k < x.size(); ++k) xh[k] = x[k] + v_old[k] * (tn - t);
          const StateBatch sh = make_state(xh, y, m, tn, s);
          const auto score2 = w_x == 1.0 ? model.evaluate(sh).cont_score : guided_score_c(model, sh, w_x, sig_y, sched, grng);
          const auto v_new = flow_velocity(xh, score2, sched.cont.beta(tn));
          for (std::size_t k = 0; k < x.size(); ++k) x[k] += 0.5 * (v_old[k] + v_new[k]) * (tn - t);
        } else {
          x = em_step(x, t, tn - t, score, sched.cont, rng);
        }
      }
      if (P > 0 && sn < s) {
        y = leap_rows(y, logits, m, L, s, s - sn, sched.disc, rng, sn <= s_final);
      }
      notify(config, i + 1, un, tn, sn, b, x, y, m);
    }
    std::copy(x.begin(), x.end(), res.x.begin() + b * d);
    std::copy(y.begin(), y.end(), res.y.begin() + b * P);
  });
  return res;
}

}  // namespace mmdiff
