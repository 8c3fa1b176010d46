#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

namespace mmdiff {

struct CheckResult {
  std::string id;
  std::string title;
  bool passed = false;
  double seconds = 0.0;
  double time_limit = 0.0;  // 0: none
  nlohmann::json measured = nlohmann::json::object();
  std::string detail;
};

struct VerifyOptions {
  // Chains for the sampler-based checks.
  std::size_t chains = 10000;
  std::uint64_t seed = 1;
};

// Each check is self-contained and deterministic for a given seed. A check
// that exceeds its time limit fails.
CheckResult check_explicit_optimum(const VerifyOptions& opt);
CheckResult check_objective_gap(const VerifyOptions& opt);
CheckResult check_conditional_identity(const VerifyOptions& opt);
CheckResult check_time_reversal(const VerifyOptions& opt);
CheckResult check_discrete_ratios(const VerifyOptions& opt);
CheckResult check_guidance_reductions(const VerifyOptions& opt);
CheckResult check_toy_samplers(const VerifyOptions& opt);
CheckResult check_loss_gradient(const VerifyOptions& opt);
CheckResult check_so3_kernel(const VerifyOptions& opt);

using CheckFn = std::function<CheckResult(const VerifyOptions&)>;
// The checks above in order.
std::vector<CheckFn> all_checks();

// Runs every check; progress reports one result at a time.
std::vector<CheckResult> run_verify(const VerifyOptions& opt,
                                    const std::function<void(const CheckResult&)>& progress = {});
nlohmann::json verify_report(const std::vector<CheckResult>& results);

}  // namespace mmdiff
