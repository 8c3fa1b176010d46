#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmdiff/autodiff.hpp"
#include "mmdiff/multimodal.hpp"
#include "mmdiff/schedules.hpp"
#include "mmdiff/score_net.hpp"

namespace mmdiff {

struct TrainConfig {
  std::size_t steps = 10000;
  std::size_t batch = 2048;
  double lr = 1e-3;
  double weight_decay = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.9;
  std::size_t warmup = 200;
  double ema_decay = 0.9999;
  double lambda_disc = 1.0;
  TimeDraw draw;
  Precision precision = Precision::f64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainRecord {
  std::size_t step = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  bool applied = true;
};

struct TrainResult {
  ParameterStore ema;
  std::vector<TrainRecord> curve;
  std::size_t rejected = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// lr min(1, step / warmup) for 1-based steps.
double warmup_lr(const TrainConfig& cfg, std::size_t step);
// Shadow decay at update n (0-based): min(decay, (1 + n) / (10 + n)).
double ema_decay_at(double decay, std::size_t n);

using TrainObserver = std::function<void(const TrainRecord&)>;

// Minibatch GDSM training of `net` on encoded rows (x0: rows x cont_dim,
// y0: rows x positions). Rows are drawn with replacement. Throws
// TrainingError on a non-finite loss.
TrainResult train_score_net(ScoreNet& net, const std::vector<double>& x0, const std::vector<int>& y0,
                            std::size_t rows, const Schedules& sched, const TrainConfig& cfg,
                            const TrainObserver& observer = {});

void write_loss_csv(const std::string& path, const std::vector<TrainRecord>& curve);

}  // namespace mmdiff
