#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmdiff/autodiff.hpp"
#include "mmdiff/model.hpp"
#include "mmdiff/schedules.hpp"

namespace mmdiff {

enum class Arch { mlp, attn };

struct ScoreNetConfig {
  Layout layout;
  std::size_t hidden_dim = 256;
  std::size_t depth = 4;
  Arch arch = Arch::mlp;
  std::size_t time_embed_dim = 32;
  std::size_t heads = 4;             // attn only
  std::size_t token_embed_dim = 16;  // mlp only
  std::size_t mlp_ratio = 4;         // attn block feed-forward width factor

  // Preset mirroring the tabular backbone: 4 DiT blocks, hidden 24, 4 heads.
  static ScoreNetConfig tabular_attn(const Layout& layout);
  static ScoreNetConfig toy_mlp(const Layout& layout);

  void validate() const;
};

std::string arch_name(Arch a);
Arch parse_arch(const std::string& name);

// Sinusoidal features [sin(f_k t), cos(f_k t)] with f_k geometric from 1 to 1e4.
std::vector<double> time_features(double t, std::size_t dim);
// Frequencies used by time_features.
std::vector<double> time_frequencies(std::size_t dim);

struct NetOutputVars {
  Var cont_score;            // n x cont_dim
  std::vector<Var> logits;   // per position, n x num_categories[p]
};

class ScoreNet : public ScoreModel {
 public:
  ScoreNet(ScoreNetConfig config, std::uint64_t seed, ContinuousSchedule schedule);
  // Wraps existing parameters (checkpoint load); names and shapes must match.
  ScoreNet(ScoreNetConfig config, ParameterStore params, ContinuousSchedule schedule);

  const Layout& layout() const override { return config_.layout; }
  OutputBatch evaluate(const StateBatch& batch) const override;

  // Records the forward pass on `tape` using parameters from `params`
  // (which must have this net's structure, e.g. the EMA copy).
  // With differentiable = false parameters enter as constants.
  NetOutputVars forward(Tape& tape, const ParameterStore& params, const StateBatch& batch,
                        bool differentiable = true) const;
  NetOutputVars forward(Tape& tape, const StateBatch& batch) const { return forward(tape, params_, batch); }
  // evaluate() against another parameter set with this structure.
  OutputBatch evaluate_with(const ParameterStore& params, const StateBatch& batch) const;

  const ScoreNetConfig& config() const { return config_; }
  const ContinuousSchedule& schedule() const { return schedule_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

 private:
  void init(std::uint64_t seed);
  NetOutputVars forward_mlp(Tape& tape, const ParameterStore& ps, const StateBatch& b, bool diff) const;
  NetOutputVars forward_attn(Tape& tape, const ParameterStore& ps, const StateBatch& b, bool diff) const;

  ScoreNetConfig config_;
  ContinuousSchedule schedule_;
  ParameterStore params_;
};

}  // namespace mmdiff
