#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmdiff/autodiff.hpp"
#include "mmdiff/tabular.hpp"

namespace mmdiff {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File layout: the 5 bytes "MDCK1", a little-endian u64 header length, the
// JSON header, then the payload. Each tensor is stored as little-endian f32
// when every value survives the round trip through float, else as f64, so
// loading is always bitwise exact.
struct CheckpointTensor {
  std::string name;
  std::string group;  // "raw" or "ema" for parameter groups
  Tensor value;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  void add_group(const std::string& group, const ParameterStore& params);
  bool has_group(const std::string& group) const;
  // Parameters of one group in stored order; throws CheckpointError when absent.
  ParameterStore group(const std::string& group) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws CheckpointError on a bad tag, malformed header, overlapping or
// out-of-range extents, payload length mismatch or checksum mismatch.
Checkpoint load_checkpoint(const std::string& path);

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);

// Tabular model as groups "raw" and "ema" plus meta holding the schema,
// preprocessor, network config and schedules. `extra` is merged into meta.
Checkpoint tabular_checkpoint(const TabularModel& model, const nlohmann::json& extra = nlohmann::json::object());
// With `expected` set, a schema mismatch throws CheckpointError listing the differences.
TabularModel tabular_from_checkpoint(const Checkpoint& ckpt, const TabularSchema* expected = nullptr);

}  // namespace mmdiff
