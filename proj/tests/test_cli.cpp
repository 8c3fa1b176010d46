#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "mmdiff/tabular.hpp"

using namespace mmdiff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mmdiff_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run({}).code == cli::kConfigError);
  const Run u = run({"train", "--no-such-flag"});
  CHECK(u.code == cli::kConfigError);
  CHECK(u.err.find("no-such-flag") != std::string::npos);
  CHECK(run({"frobnicate"}).code == cli::kConfigError);
  CHECK(run({"train", "--set", "nodot"}).code == cli::kConfigError);
  CHECK(run({"train", "--help"}).code == cli::kOk);
}

TEST_CASE("config errors name the key") {
  const fs::path d = temp_dir("cfg");
  const Run missing = run({"train", "-o", d.string()});
  CHECK(missing.code == cli::kConfigError);
  CHECK(missing.err.find("paths.data") != std::string::npos);
  const Run bad = run({"train", "--data", "x.csv", "--set", "model.width=3", "-o", d.string()});
  CHECK(bad.code == cli::kConfigError);
  CHECK(bad.err.find("model.width") != std::string::npos);
  std::ofstream(d / "c.toml") << "[sampler]\nomega = \"strong\"\n";
  CHECK(run({"sample", "-c", (d / "c.toml").string(), "-o", d.string()}).code == cli::kConfigError);
}

TEST_CASE("missing inputs and corrupt files") {
  const fs::path d = temp_dir("rt");
  const Run absent = run({"train", "--data", (d / "absent.csv").string(), "-o", d.string()});
  CHECK(absent.code == cli::kConfigError);
  CHECK(absent.err.find("paths.data") != std::string::npos);
  std::ofstream(d / "junk.mdck") << "not a checkpoint";
  CHECK(run({"sample", "--checkpoint", (d / "junk.mdck").string(), "-o", d.string()}).code == cli::kRuntimeError);
}

TEST_CASE("train, sample and eval pipeline") {
  const fs::path d = temp_dir("pipe");
  save_csv((d / "real.csv").string(), planted_fixture(1500, 3));
  REQUIRE(run({"train", "--data", (d / "real.csv").string(), "--steps", "60", "--batch", "64", "--hidden", "32",
               "--depth", "1", "-o", d.string()})
              .code == cli::kOk);
  for (const char* f : {"model.mdck", "loss.csv", "schema.json", "resolved_config.toml"}) CHECK(fs::exists(d / f));
  REQUIRE(run({"sample", "--checkpoint", (d / "model.mdck").string(), "-n", "300", "--sampler-steps", "10", "-o",
               d.string()})
              .code == cli::kOk);
  const Dataset syn = load_csv((d / "synthetic.csv").string());
  CHECK(syn.size() == 300);
  const Run e = run({"eval", "--data", (d / "real.csv").string(), "--synthetic", (d / "synthetic.csv").string(), "-o",
                     d.string()});
  REQUIRE(e.code == cli::kOk);
  std::ifstream in(d / "metrics.json");
  const auto m = nlohmann::json::parse(in);
  CHECK(m.contains("shape"));
  CHECK(m.contains("trend"));
  fs::remove_all(d);
}
