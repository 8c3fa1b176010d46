#include "mmdiff/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>

#include "mmdiff/continuous.hpp"
#include "mmdiff/discrete.hpp"
#include "mmdiff/multimodal.hpp"
#include "mmdiff/oracle.hpp"
#include "mmdiff/score_net.hpp"
#include "mmdiff/so3.hpp"
#include "mmdiff/stats.hpp"

namespace mmdiff {

namespace {

constexpr double kPi = 3.14159265358979323846;

using Clock = std::chrono::steady_clock;

// Times body and turns exceptions into failures.
CheckResult timed(std::string id, std::string title, double limit, const std::function<void(CheckResult&)>& body) {
  CheckResult r;
  r.id = std::move(id);
  r.title = std::move(title);
  r.time_limit = limit;
  const auto t0 = Clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  r.measured["seconds"] = r.seconds;
  if (limit > 0.0 && r.seconds > limit) {
    r.passed = false;
    r.detail += (r.detail.empty() ? "" : "; ") + std::string("over the time limit");
  }
  return r;
}

std::vector<double> label_hist(const std::vector<int>& y, std::size_t K) {
  std::vector<double> c(K, 0.0);
  for (int v : y) {
    if (v < 0 || static_cast<std::size_t>(v) >= K) throw std::runtime_error("label outside the vocabulary");
    c[static_cast<std::size_t>(v)] += 1.0;
  }
  return normalize(c);
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

}  // namespace

CheckResult check_explicit_optimum(const VerifyOptions&) {
  return timed("explicit_optimum", "explicit objective vanishes at the exact scores and only there", 10.0,
               [](CheckResult& r) {
                 const Schedules sched;
                 const auto spec = ToyJointSpec::default_1d();
                 const ToyOracleModel oracle(spec, sched);
                 const auto grid = QuadGrid::standard();
                 const double g0 = gesm_quadrature(spec, oracle, sched, grid);
                 double min_perturbed = 1e300;
                 for (std::uint64_t seed = 1; seed <= 20; ++seed) {
                   const PerturbedModel pm(oracle, 0.02 + 0.01 * static_cast<double>(seed % 7), seed);
                   min_perturbed = std::min(min_perturbed, gesm_quadrature(spec, pm, sched, grid));
                 }
                 r.measured["oracle"] = g0;
                 r.measured["min_perturbed"] = min_perturbed;
                 r.passed = g0 <= 1e-3 && g0 >= -1e-6 && min_perturbed > 0.0;
               });
}

CheckResult check_objective_gap(const VerifyOptions&) {
  return timed("objective_gap", "denoising and explicit objectives differ by a model-independent constant", 30.0,
               [](CheckResult& r) {
                 const Schedules sched;
                 const auto spec = ToyJointSpec::default_1d();
                 const ToyOracleModel oracle(spec, sched);
                 const auto grid = QuadGrid::standard();
                 std::vector<double> gaps;
                 for (std::uint64_t k = 0; k < 5; ++k) {
                   const PerturbedModel pm(oracle, 0.05 + 0.05 * static_cast<double>(k), 200 + k);
                   gaps.push_back(gdsm_quadrature(spec, pm, sched, grid) - gesm_quadrature(spec, pm, sched, grid));
                 }
                 const auto [lo, hi] = std::minmax_element(gaps.begin(), gaps.end());
                 r.measured["gaps"] = gaps;
                 r.measured["max_pairwise"] = *hi - *lo;
                 r.passed = *hi - *lo <= 2e-3;
               });
}

CheckResult check_conditional_identity(const VerifyOptions& opt) {
  return timed("conditional_identity", "joint and conditional continuous scores coincide", 0.0, [&](CheckResult& r) {
    const Schedules sched;
    const auto spec = ToyJointSpec::default_1d();
    const int K = static_cast<int>(spec.labels());
    Rng rng(opt.seed, 0xc1d);
    double worst_joint = 0.0, worst_two_sided = 0.0;
    for (int i = 0; i < 200; ++i) {
      const double x = 4.0 * rng.normal(), t = 0.02 + 0.97 * rng.uniform(), s = 0.02 + 0.97 * rng.uniform();
      const int ys = static_cast<int>(rng.below(static_cast<std::size_t>(K) + 1));
      const auto c = sched.cont.vp_coeffs(t);
      // grad log p(x_t | y_s) from the label-conditional mixture, written out directly.
      std::vector<double> logw, grad;
      for (int k = 0; k < K; ++k) {
        if (ys != K && ys != k) continue;
        const double m = c.mean_coef * spec.means[static_cast<std::size_t>(k)][0];
        const double v = c.mean_coef * c.mean_coef * spec.vars[static_cast<std::size_t>(k)] + c.std * c.std;
        logw.push_back(std::log(spec.priors[static_cast<std::size_t>(k)]) - 0.5 * std::log(v) - 0.5 * (x - m) * (x - m) / v);
        grad.push_back(-(x - m) / v);
      }
      const double mx = *std::max_element(logw.begin(), logw.end());
      double z = 0.0, g = 0.0;
      for (std::size_t j = 0; j < logw.size(); ++j) {
        const double w = std::exp(logw[j] - mx);
        z += w;
        g += w * grad[j];
      }
      const double conditional = g / z;
      const double joint = toy_scores(spec, {x}, ys, t, s, sched, false).cont[0];
      worst_joint = std::max(worst_joint, std::abs(joint - conditional) / std::max(1.0, std::abs(conditional)));

      // Two-sided condition (x0, y0): the label factor has no x-gradient.
      const double x0 = spec.means[0][0] + rng.normal();
      Tape tape;
      Var xv = tape.leaf(Tensor::scalar(x));
      const double label_log = std::log(sched.disc.coeffs(s).survival);
      Var lp = add_scalar(scale(square(add_scalar(xv, -c.mean_coef * x0)), -0.5 / (c.std * c.std)),
                          -std::log(c.std) - 0.5 * std::log(2.0 * kPi) + label_log);
      tape.backward(sum(lp));
      const double target = cond_score_c({x0}, {x}, t, sched.cont)[0];
      worst_two_sided = std::max(worst_two_sided, std::abs(tape.grad(xv).item() - target) / std::max(1.0, std::abs(target)));
    }
    r.measured["max_rel_joint_vs_conditional"] = worst_joint;
    r.measured["max_rel_two_sided"] = worst_two_sided;
    r.passed = worst_joint <= 1e-12 && worst_two_sided <= 1e-12;
  });
}

CheckResult check_time_reversal(const VerifyOptions& opt) {
  return timed("time_reversal", "backward chains match the forward marginals", 120.0, [&](CheckResult& r) {
    const Schedules sched;
    const auto spec = ToyJointSpec::default_1d();
    ReversalOptions ro;
    ro.chains = opt.chains;
    ro.seed = opt.seed;
    bool ok = true;
    nlohmann::json reps = nlohmann::json::array();
    for (const auto& cp : {TimeCoupling::synchronous(), TimeCoupling::staged_disc_first(), TimeCoupling::staged_cont_first()}) {
      const ReversalReport rep = reversal_check(spec, sched, cp, ro);
      double min_p = 1.0;
      for (const auto& c : rep.checkpoints) min_p = std::min({min_p, c.ks_p, c.chi2_p});
      ok = ok && rep.passed && rep.checkpoints.size() == 5;
      reps.push_back({{"coupling", rep.coupling}, {"checkpoints", rep.checkpoints.size()}, {"min_p", min_p},
                      {"passed", rep.passed}});
    }
    r.measured["couplings"] = reps;
    r.passed = ok;
  });
}

CheckResult check_discrete_ratios(const VerifyOptions& opt) {
  return timed("discrete_ratios", "ratios from x0 probabilities equal density quotients", 0.0, [&](CheckResult& r) {
    const Schedules sched;
    const auto spec = ToyJointSpec::default_1d();
    const ToyOracleModel oracle(spec, sched);
    const int K = static_cast<int>(spec.labels());
    Rng rng(opt.seed, 0xd15);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double x = 4.0 * rng.normal(), t = 0.01 + 0.98 * rng.uniform(), s = 0.01 + 0.98 * rng.uniform();
      const StateBatch b{1, {x}, {K}, {t}, {s}};
      const auto ratio = concrete_score_d(K, K, softmax(oracle.evaluate(b).logits), s, sched.disc);
      const double pm = toy_joint_density(spec, {x}, K, t, s, sched);
      for (int k = 0; k < K; ++k) {
        const double truth = toy_joint_density(spec, {x}, k, t, s, sched) / pm;
        worst = std::max(worst, std::abs(ratio[static_cast<std::size_t>(k)] - truth) / std::max(1e-300, std::abs(truth)));
      }
    }
    const DiscreteSchedule d0{0.0};
    double worst_w = 0.0;
    for (int i = 1; i < 1000; ++i) {
      const double s = i / 1000.0;
      worst_w = std::max(worst_w, std::abs(d0.unmask_rate(s) * s - 1.0));
    }
    r.measured["max_rel_ratio_error"] = worst;
    r.measured["max_weight_identity_error"] = worst_w;
    r.passed = worst <= 1e-9 && worst_w <= 1e-12;
  });
}

CheckResult check_guidance_reductions(const VerifyOptions& opt) {
  return timed("guidance_reductions", "guidance reduces to the unguided sampler and to free guidance", 0.0,
               [&](CheckResult& r) {
                 const Schedules sched;
                 const auto spec = ToyJointSpec::default_1d();
                 const ToyOracleModel model(spec, sched);
                 const std::size_t n = 500;

                 auto trajectory = [&](SamplerConfig cfg, bool given_label) {
                   std::vector<double> traj;
                   cfg.observer = [&](const SamplerSnapshot& sn) {
                     traj.insert(traj.end(), sn.state->x.begin(), sn.state->x.end());
                     for (int v : sn.state->y) traj.push_back(v);
                   };
                   if (given_label) {
                     sample_cond_c_given_d(model, std::vector<int>(n, 1), n, 0.0, sched, cfg, opt.seed);
                   } else {
                     sample_cond_d_given_c(model, std::vector<double>(n, 0.4), n, 0.0, sched, cfg, opt.seed);
                   }
                   return traj;
                 };
                 SamplerConfig one;
                 one.guidance.omega = 1.0;
                 one.guidance.interval_lo = 0.0;
                 one.guidance.interval_hi = 1.0;
                 const bool c_same = same_bits(trajectory(one, true), trajectory(SamplerConfig::unguided(), true));
                 const bool d_same = same_bits(trajectory(one, false), trajectory(SamplerConfig::unguided(), false));

                 Schedules d0 = sched;
                 d0.disc = DiscreteSchedule{0.0};
                 const ToyOracleModel m0(spec, d0);
                 Rng rng(opt.seed, 0x6cf);
                 StateBatch b{4, {-1.0, 0.2, 2.5, 0.9}, {0, 1, 2, 1}, {0.3, 0.6, 0.1, 0.9}, {0.0, 0.0, 0.0, 0.0}};
                 bool cfg_same = true;
                 for (double omega : {0.0, 2.0, 4.0, 7.5}) {
                   const auto guided = guided_score_c(m0, b, omega, 1.0, d0, rng);
                   StateBatch u = b;
                   u.y.assign(4, 3);
                   u.s.assign(4, 1.0);
                   const auto c = m0.evaluate(b).cont_score, un = m0.evaluate(u).cont_score;
                   std::vector<double> classic(4);
                   for (std::size_t i = 0; i < 4; ++i) classic[i] = omega * c[i] + (1.0 - omega) * un[i];
                   cfg_same = cfg_same && same_bits(guided, classic);
                 }
                 r.measured["omega_one_continuous_bitwise"] = c_same;
                 r.measured["omega_one_discrete_bitwise"] = d_same;
                 r.measured["free_guidance_bitwise"] = cfg_same;
                 r.passed = c_same && d_same && cfg_same;
               });
}

CheckResult check_toy_samplers(const VerifyOptions& opt) {
  return timed("toy_samplers", "conditional and joint samplers reproduce the toy joint", 300.0, [&](CheckResult& r) {
    const Schedules sched;
    const auto spec = ToyJointSpec::default_1d();
    const ToyOracleModel model(spec, sched);
    const std::size_t n = opt.chains;
    const auto cfg = SamplerConfig::unguided();
    const std::size_t K = spec.labels();

    double worst_tv = 0.0;
    for (double xc : {-2.0, 0.5, 3.0, -0.75}) {
      const auto s = sample_cond_d_given_c(model, std::vector<double>(n, xc), n, 0.0, sched, cfg, opt.seed);
      worst_tv = std::max(worst_tv, total_variation(label_hist(s.y, K), toy_posterior(spec, {xc}, 0.0, sched)));
    }
    double worst_mean = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const auto s = sample_cond_c_given_d(model, std::vector<int>(n, static_cast<int>(k)), n, 0.0, sched, cfg,
                                           opt.seed + 1);
      worst_mean = std::max(worst_mean, std::abs(mean_of(s.x) - spec.means[k][0]));
    }
    const auto j = sample_joint(model, TimeCoupling::synchronous(), n, sched, cfg, opt.seed + 2);
    const double lo = -3.5, hi = 4.5;
    const std::size_t B = 16;
    std::vector<double> emp(K * B, 0.0), truth(K * B, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double f = std::clamp((j.x[i] - lo) / (hi - lo) * B, 0.0, static_cast<double>(B - 1));
      emp[static_cast<std::size_t>(j.y[i]) * B + static_cast<std::size_t>(f)] += 1.0 / static_cast<double>(n);
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double m = spec.means[k][0], sd = std::sqrt(spec.vars[k]);
      for (std::size_t b = 0; b < B; ++b) {
        const double a = b == 0 ? -1e300 : lo + (hi - lo) * static_cast<double>(b) / B;
        const double e = b + 1 == B ? 1e300 : lo + (hi - lo) * static_cast<double>(b + 1) / B;
        truth[k * B + b] = spec.priors[k] * (normal_cdf((e - m) / sd) - normal_cdf((a - m) / sd));
      }
    }
    const double joint_tv = total_variation(emp, truth);
    r.measured["label_posterior_max_tv"] = worst_tv;
    r.measured["conditional_mean_max_error"] = worst_mean;
    r.measured["joint_histogram_tv"] = joint_tv;
    r.passed = worst_tv <= 0.02 && worst_mean <= 0.05 && joint_tv <= 0.03;
  });
}

CheckResult check_loss_gradient(const VerifyOptions& opt) {
  return timed("loss_gradient", "training loss gradient matches central differences", 0.0, [&](CheckResult& r) {
    const Layout L{2, {3, 2}};
    auto cfg = ScoreNetConfig::toy_mlp(L);
    cfg.hidden_dim = 16;
    cfg.depth = 2;
    cfg.time_embed_dim = 8;
    cfg.token_embed_dim = 4;
    ScoreNet net(cfg, opt.seed, ContinuousSchedule::tabular_vp());
    Rng rng(opt.seed, 0x9ad);
    for (auto& p : net.params().all())
      for (auto& v : p.value.data) v = 0.3 * rng.normal();
    const Schedules sched;
    const std::vector<double> x0{0.1, -0.2, 1.0, 0.5, -1.5, 0.3, 0.0, 2.0};
    const std::vector<int> y0{0, 1, 2, 0, 1, 1, 2, 1};
    // Clocks chosen so both terms are active on some rows and absent on others.
    const auto batch = noise_batch_at(x0, y0, {0.3, 0.7, 0.0, 0.95}, {0.5, 0.0, 0.8, 0.2}, L, sched, rng);
    const GradCheckResult g = grad_check_params(
        [&](Tape& tape, ParameterStore& ps) {
          return gdsm_loss_vars(tape, net.forward(tape, ps, batch.state), batch, L, sched, 1.0);
        },
        net.params(), 1e-5);
    r.measured["max_rel_error"] = g.max_rel_error;
    r.measured["coordinates"] = g.checked;
    r.passed = g.passed && g.max_rel_error <= 1e-5 && g.checked == net.params().num_scalars();
  });
}

CheckResult check_so3_kernel(const VerifyOptions& opt) {
  return timed("so3_kernel", "rotation heat kernel, score and oracle walk", 0.0, [&](CheckResult& r) {
    double worst_images = 0.0, worst_mass = 0.0, worst_fd = 0.0;
    for (double t : {0.01, 0.1, 0.5, 0.9}) {
      double mx = 0.0, d = 0.0;
      for (int i = 0; i <= 200; ++i) {
        const double th = kPi * i / 200.0;
        const double a = igso3_f_series(th, t, std::max(heat_kernel_order(t), 200)), b = igso3_f_images(th, t);
        mx = std::max(mx, std::abs(a));
        d = std::max(d, std::abs(a - b));
      }
      worst_images = std::max(worst_images, d / mx);
    }
    for (double t : {0.01, 0.3, 3.0, 50.0}) {
      const int M = 20000;
      double I = 0.0;
      for (int i = 0; i < M; ++i) I += igso3_angle_density(kPi * (i + 0.5) / M, t) * kPi / M;
      worst_mass = std::max(worst_mass, std::abs(I - 1.0));
      for (double th : {0.05, 1.0, 2.5}) {
        const double h = 1e-6;
        const double fd = (igso3_log_f(th + h, t) - igso3_log_f(th - h, t)) / (2 * h);
        worst_fd = std::max(worst_fd, std::abs(igso3_dlog_f(th, t) - fd) / std::max(1.0, std::abs(fd)));
      }
    }
    const So3ToySpec spec = So3ToySpec::six_modes();
    const So3Schedule sched;
    const So3PointMassOracle oracle(spec, sched);
    std::vector<int> labels(300);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 6);
    So3SamplerConfig sc;
    sc.omega = 1.0;
    const auto out = sample_so3_conditional(oracle, labels, sched, sc, opt.seed);
    double near = 0.0;
    for (const auto& s : out) near += geodesic_distance(s.x.matrix(), spec.center_rotation(s.label)) < 0.3;
    near /= static_cast<double>(out.size());
    r.measured["series_vs_images_rel"] = worst_images;
    r.measured["mass_error"] = worst_mass;
    r.measured["score_fd_rel"] = worst_fd;
    r.measured["oracle_within_0.3"] = near;
    r.passed = worst_images <= 1e-9 && worst_mass <= 1e-4 && worst_fd <= 1e-4 && near >= 0.85;
  });
}

std::vector<CheckFn> all_checks() {
  return {check_explicit_optimum,    check_objective_gap, check_conditional_identity,
          check_time_reversal,       check_discrete_ratios, check_guidance_reductions,
          check_toy_samplers,        check_loss_gradient, check_so3_kernel};
}

std::vector<CheckResult> run_verify(const VerifyOptions& opt, const std::function<void(const CheckResult&)>& progress) {
  std::vector<CheckResult> out;
  for (const auto& fn : all_checks()) {
    out.push_back(fn(opt));
    if (progress) progress(out.back());
  }
  return out;
}

nlohmann::json verify_report(const std::vector<CheckResult>& results) {
  nlohmann::json checks = nlohmann::json::array();
  bool all = true;
  for (const auto& r : results) {
    all = all && r.passed;
    nlohmann::json j{{"id", r.id}, {"title", r.title}, {"passed", r.passed}, {"measured", r.measured}};
    if (r.time_limit > 0.0) j["time_limit_seconds"] = r.time_limit;
    if (!r.detail.empty()) j["detail"] = r.detail;
    checks.push_back(std::move(j));
  }
  return {{"passed", all}, {"checks", checks}};
}

}  // namespace mmdiff
