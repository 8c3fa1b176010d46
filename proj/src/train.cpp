#include "mmdiff/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mmdiff/rng.hpp"

namespace mmdiff {

void TrainConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("train.steps must be positive");
  if (batch == 0) throw std::invalid_argument("train.batch must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("train.lr must be positive");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("train.ema_decay must lie in [0, 1)");
  if (!(lambda_disc >= 0.0)) throw std::invalid_argument("train.lambda_disc must be >= 0");
  if (!(draw.t_min > 0.0 && draw.t_min < 1.0)) throw std::invalid_argument("train.t_min must lie in (0, 1)");
}

double warmup_lr(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup == 0) return cfg.lr;
  return cfg.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup));
}

double ema_decay_at(double decay, std::size_t n) {
  return std::min(decay, (1.0 + static_cast<double>(n)) / (10.0 + static_cast<double>(n)));
}

TrainResult train_score_net(ScoreNet& net, const std::vector<double>& x0, const std::vector<int>& y0,
                            std::size_t rows, const Schedules& sched, const TrainConfig& cfg,
                            const TrainObserver& observer) {
  cfg.validate();
  const Layout& L = net.layout();
  const std::size_t d = L.cont_dim, P = L.positions();
  if (rows == 0) throw std::invalid_argument("training set is empty");
  if (x0.size() != rows * d || y0.size() != rows * P) throw ShapeError("training rows do not match the layout");

  ParameterStore& params = net.params();
  params.round_to(cfg.precision);
  AdamW opt({cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8});
  TrainResult res;
  res.ema = params;
  Rng rng(cfg.seed, 0x7a1);
  std::vector<double> bx(cfg.batch * d);
  std::vector<int> by(cfg.batch * P);
  double last_finite = std::nan("");
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const std::size_t r = static_cast<std::size_t>(rng.below(rows));
      std::copy(x0.begin() + r * d, x0.begin() + (r + 1) * d, bx.begin() + i * d);
      std::copy(y0.begin() + r * P, y0.begin() + (r + 1) * P, by.begin() + i * P);
    }
    const NoisedBatch batch = make_noised_batch(bx, by, cfg.batch, L, sched, cfg.draw, rng);
    Tape tape;
    const Var loss = gdsm_loss_vars(tape, net.forward(tape, batch.state), batch, L, sched, cfg.lambda_disc);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) {
      std::ostringstream msg;
      msg << "non-finite loss " << lv << " at step " << step << " (lr " << warmup_lr(cfg, step)
          << ", last finite loss " << last_finite << ")";
      throw TrainingError(msg.str());
    }
    last_finite = lv;
    tape.backward(loss);
    const double lr = warmup_lr(cfg, step);
    const StepReport rep = opt.step(params, tape.param_grads(params), lr);
    if (rep.applied) {
      params.round_to(cfg.precision);
      const double k = ema_decay_at(cfg.ema_decay, step - 1 - res.rejected);
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& e = res.ema[p].value.data;
        const auto& w = params[p].value.data;
        for (std::size_t j = 0; j < e.size(); ++j) e[j] = k * e[j] + (1.0 - k) * w[j];
      }
    } else {
      ++res.rejected;
    }
    res.curve.push_back({step, lr, lv, rep.applied});
    if (observer) observer(res.curve.back());
  }
  res.ema.round_to(cfg.precision);
  return res;
}

void write_loss_csv(const std::string& path, const std::vector<TrainRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write loss curve to " + path);
  out << "step,lr,loss,applied\n";
  out.precision(17);
  for (const auto& r : curve) out << r.step << ',' << r.lr << ',' << r.loss << ',' << (r.applied ? 1 : 0) << '\n';
}

}  // namespace mmdiff
