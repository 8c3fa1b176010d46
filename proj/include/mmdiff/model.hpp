#pragma once

#include <cstddef>
#include <vector>

namespace mmdiff {

// Shape of a product state: a real vector of cont_dim entries and one token
// per discrete position. Position p holds ids 0..num_categories[p]-1 plus the
// mask id num_categories[p].
struct Layout {
  std::size_t cont_dim = 0;
  std::vector<int> num_categories;

  std::size_t positions() const { return num_categories.size(); }
  int mask_id(std::size_t p) const { return num_categories[p]; }
  std::size_t total_categories() const;
  // Start of position p inside a concatenated logit row.
  std::size_t logit_offset(std::size_t p) const;
  bool operator==(const Layout& o) const { return cont_dim == o.cont_dim && num_categories == o.num_categories; }
};

// n joint states with per-sample clocks. x is n x cont_dim row-major, y is
// n x positions row-major.
struct StateBatch {
  std::size_t n = 0;
  std::vector<double> x;
  std::vector<int> y;
  std::vector<double> t;
  std::vector<double> s;
};

struct OutputBatch {
  std::vector<double> cont_score;  // n x cont_dim
  std::vector<double> logits;      // n x total_categories, true categories only
};

class ScoreModel {
 public:
  virtual ~ScoreModel() = default;
  virtual const Layout& layout() const = 0;
  virtual OutputBatch evaluate(const StateBatch& batch) const = 0;
};

void validate_batch(const Layout& layout, const StateBatch& batch);

}  // namespace mmdiff
