// One PASS/FAIL line per acceptance criterion. Optional arguments select
// criteria by number, e.g. `acceptance 9 11`.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "mmdiff/so3.hpp"
#include "mmdiff/tabular.hpp"
#include "mmdiff/verify.hpp"

using namespace mmdiff;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool passed = false;
  json measured = json::object();
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome from_check(const CheckResult& r) {
  Outcome o{r.passed, r.measured, r.detail};
  if (r.time_limit > 0.0) o.measured["time_limit_seconds"] = r.time_limit;
  return o;
}

Outcome tabular_fixture() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t rows = 40000;
  const Dataset real = planted_fixture(rows, 1);
  TabularTrainOptions opt;
  opt.hidden_dim = 128;
  opt.depth = 3;
  opt.train.steps = 10000;
  opt.train.batch = 256;
  opt.train.seed = 1;
  const TabularModel model = train_tabular(real, opt);
  const double train_s = seconds_since(t0);
  const Dataset syn = synthesize(model, rows, tabular_sampler_defaults(), 7, true);
  const ShapeReport shape = metric_shape(real, syn);
  const TrendReport trend = metric_trend(real, syn);
  Outcome o;
  o.measured = {{"shape", shape.score}, {"trend", trend.score}, {"steps", opt.train.steps},
                {"train_seconds", train_s}, {"seconds", seconds_since(t0)}};
  o.passed = shape.score >= 98.0 && trend.score >= 95.0 && seconds_since(t0) <= 900.0;
  return o;
}

Outcome so3_guidance() {
  const auto t0 = std::chrono::steady_clock::now();
  const So3ToySpec spec = So3ToySpec::six_modes();
  const So3Schedule sched;
  Rng rng(1);
  const auto data = toy_dataset_so3(spec, 20000, rng);
  So3Net net(So3NetConfig{}, sched, 7);
  So3TrainConfig tc;
  tc.seed = 1;
  const So3TrainResult tr = train_so3(net, data, tc);
  const So3Net ema(So3NetConfig{}, sched, tr.ema);
  std::vector<int> labels(3000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 6);
  So3SamplerConfig sc;
  sc.omega = 4.0;
  const double guided = in_cell_rate(spec, sample_so3_conditional(ema, labels, sched, sc, 5));
  sc.omega = 1.0;
  const double plain = in_cell_rate(spec, sample_so3_conditional(ema, labels, sched, sc, 5));
  Outcome o;
  o.measured = {{"in_cell_omega4", guided}, {"in_cell_omega1", plain}, {"seconds", seconds_since(t0)}};
  o.passed = guided >= 0.9 && guided > plain && seconds_since(t0) <= 600.0;
  return o;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "mmdiff_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  save_csv((root / "fixture.csv").string(), planted_fixture(3000, 2));
  Outcome o;
  o.passed = true;
  std::vector<std::string> ck, syn, loss;
  for (int run = 0; run < 2; ++run) {
    const std::string dir = (root / ("run" + std::to_string(run))).string();
    std::ostringstream out, err;
    const int a = cli::run({"train", "--data", (root / "fixture.csv").string(), "--steps", "300", "--batch", "128",
                            "--hidden", "64", "--depth", "2", "--seed", "3", "-o", dir},
                           out, err);
    const int b = cli::run({"sample", "--checkpoint", dir + "/model.mdck", "-n", "2000", "--sampler-steps", "40",
                            "--workers", "1", "--seed", "4", "-o", dir},
                           out, err);
    if (a != 0 || b != 0) {
      o.passed = false;
      o.detail = err.str();
    }
    ck.push_back(read_bytes(dir + "/model.mdck"));
    syn.push_back(read_bytes(dir + "/synthetic.csv"));
    loss.push_back(read_bytes(dir + "/loss.csv"));
  }
  const bool same_ck = !ck[0].empty() && ck[0] == ck[1];
  const bool same_syn = !syn[0].empty() && syn[0] == syn[1];
  const bool same_loss = !loss[0].empty() && loss[0] == loss[1];
  o.measured = {{"checkpoint_identical", same_ck}, {"samples_identical", same_syn}, {"loss_identical", same_loss},
                {"checkpoint_bytes", ck[0].size()}};
  o.passed = o.passed && same_ck && same_syn && same_loss;
  fs::remove_all(root);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const VerifyOptions vo;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"explicit objective minimized only by the exact scores", [&] { return from_check(check_explicit_optimum(vo)); }},
      {"denoising and explicit objectives agree up to a constant", [&] { return from_check(check_objective_gap(vo)); }},
      {"joint and conditional scores coincide", [&] { return from_check(check_conditional_identity(vo)); }},
      {"time reversal marginals, synchronous and staged", [&] { return from_check(check_time_reversal(vo)); }},
      {"discrete ratios and weight identity", [&] { return from_check(check_discrete_ratios(vo)); }},
      {"guidance reductions", [&] { return from_check(check_guidance_reductions(vo)); }},
      {"toy samplers end to end", [&] { return from_check(check_toy_samplers(vo)); }},
      {"training loss gradient", [&] { return from_check(check_loss_gradient(vo)); }},
      {"tabular fixture Shape and Trend", tabular_fixture},
      {"SO(3) label-conditional generation with guidance", so3_guidance},
      {"fixed-seed train and sample are bitwise reproducible", cli_determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.passed = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.measured.contains("seconds")) o.measured["seconds"] = seconds_since(t0);
    failed += !o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << ' ' << id << " " << criteria[i].first << ' ' << o.measured.dump();
    if (!o.detail.empty()) std::cout << " (" << o.detail << ')';
    std::cout << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
