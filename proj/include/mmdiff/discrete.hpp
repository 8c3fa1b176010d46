#pragma once

#include <cstddef>
#include <vector>

#include "mmdiff/autodiff.hpp"
#include "mmdiff/model.hpp"
#include "mmdiff/rng.hpp"
#include "mmdiff/schedules.hpp"

namespace mmdiff {

// Each clean token independently becomes the position's mask id with
// probability mask_prob(s). Throws ContractError if y0 already holds a mask.
std::vector<int> mask_forward_d(const std::vector<int>& y0, const Layout& layout, double s,
                                const DiscreteSchedule& sched, Rng& rng);

// Dense generator over a small state space. Column convention: entry (x, y)
// is the rate of jumping y -> x, so columns sum to zero.
struct RateMatrix {
  Tensor q;

  std::size_t states() const { return q.rows; }
  // Throws ContractError on negative off-diagonals or nonzero column sums.
  void validate(double tol = 1e-12) const;
};

// Absorbing generator over K categories plus the mask state (last index).
RateMatrix mask_generator(std::size_t categories);

// exp(sigma_bar(s) Q_mask) p0 for p0 over K categories plus the mask state.
std::vector<double> exact_marginal_d(const std::vector<double>& p0, double s, const DiscreteSchedule& sched);
// exp(scale Q) p for a general generator; at most 64 states.
std::vector<double> propagate(const RateMatrix& q, double scale, const std::vector<double>& p);

// Ratios p(y with position -> k) / p(y) for a masked position:
// survival / (1 - survival) * x0_probs.
std::vector<double> concrete_score_d(int current_token, int mask_id, const std::vector<double>& x0_probs, double s,
                                     const DiscreteSchedule& sched);

// Weighted cross entropy over masked positions of one sequence. logits[p]
// covers the true categories of position p.
double ce_loss_d(const std::vector<std::vector<double>>& logits, const std::vector<int>& y0,
                 const std::vector<int>& ys, const Layout& layout, double s, const DiscreteSchedule& sched);

// One reverse leap from s to s - ds. Masked positions unmask with
// probability min(1, unmask_rate(s) ds), or always when force_unmask is set;
// the new category is drawn from x0_probs[p]. Unmasked positions never change.
std::vector<int> tau_leap_step(const std::vector<int>& ys, const std::vector<std::vector<double>>& x0_probs,
                               const Layout& layout, double s, double ds, const DiscreteSchedule& sched, Rng& rng,
                               bool force_unmask = false);

// Index drawn from a probability vector with one uniform.
int sample_categorical(const std::vector<double>& probs, Rng& rng);
std::vector<double> softmax(const std::vector<double>& logits);

}  // namespace mmdiff
