#include "mmdiff/model.hpp"

#include <numeric>
#include <string>

#include "mmdiff/autodiff.hpp"

namespace mmdiff {

std::size_t Layout::total_categories() const {
  return static_cast<std::size_t>(std::accumulate(num_categories.begin(), num_categories.end(), 0));
}

std::size_t Layout::logit_offset(std::size_t p) const {
  std::size_t off = 0;
  for (std::size_t q = 0; q < p; ++q) off += static_cast<std::size_t>(num_categories[q]);
  return off;
}

void validate_batch(const Layout& layout, const StateBatch& batch) {
  const std::size_t n = batch.n, P = layout.positions();
  if (batch.x.size() != n * layout.cont_dim || batch.y.size() != n * P || batch.t.size() != n ||
      batch.s.size() != n) {
    throw ShapeError("state batch of " + std::to_string(n) + " rows has x " + std::to_string(batch.x.size()) +
                     ", y " + std::to_string(batch.y.size()) + ", t " + std::to_string(batch.t.size()) + ", s " +
                     std::to_string(batch.s.size()) + " entries");
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < P; ++p) {
      const int v = batch.y[i * P + p];
      if (v < 0 || v > layout.mask_id(p)) {
        throw ContractError("token id " + std::to_string(v) + " invalid at position " + std::to_string(p) +
                            " (vocabulary " + std::to_string(layout.num_categories[p]) + " + mask)");
      }
    }
  }
}

}  // namespace mmdiff
