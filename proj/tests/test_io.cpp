#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mmdiff/checkpoint.hpp"
#include "mmdiff/config.hpp"
#include "mmdiff/rng.hpp"

using namespace mmdiff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mmdiff_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Checkpoint sample_checkpoint() {
  Rng rng(1);
  ParameterStore raw, ema;
  raw.add_normal("w", 3, 4, 1.0, rng);
  raw.add("b", Tensor(1, 4, 0.25));
  ema = raw;
  ema[0].value.data[0] = 1.0 / 3.0;
  ema[1].value.data[2] = static_cast<float>(0.1);
  Checkpoint c;
  c.meta = {{"schema", {{"columns", {"a", "b"}}}}, {"schedule", "tabular-vp"}, {"ema", true}};
  c.add_group("raw", raw);
  c.add_group("ema", ema);
  c.tensors.push_back({"odd", "extra", Tensor(1, 3, {-0.0, std::nan(""), -1e300})});
  return c;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::uint64_t x, y;
    std::memcpy(&x, &a.data[i], 8);
    std::memcpy(&y, &b.data[i], 8);
    if (x != y) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise") {
  const fs::path dir = temp_dir("ckpt");
  const Checkpoint c = sample_checkpoint();
  save_checkpoint((dir / "m.mdck").string(), c);
  const Checkpoint back = load_checkpoint((dir / "m.mdck").string());
  CHECK(back.meta == c.meta);
  REQUIRE(back.tensors.size() == c.tensors.size());
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == c.tensors[i].name);
    CHECK(back.tensors[i].group == c.tensors[i].group);
    CHECK(bitwise_equal(back.tensors[i].value, c.tensors[i].value));
  }
  CHECK(encode_checkpoint(back) == encode_checkpoint(c));
  CHECK_FALSE(fs::exists(dir / "m.mdck.tmp"));

  std::ifstream in(dir / "m.mdck", std::ios::binary);
  char tag[5];
  in.read(tag, 5);
  CHECK(std::string(tag, 5) == "MDCK1");
}

TEST_CASE("checkpoint groups select raw or EMA weights") {
  const Checkpoint c = decode_checkpoint(encode_checkpoint(sample_checkpoint()));
  CHECK(c.has_group("raw"));
  CHECK(c.has_group("ema"));
  CHECK_FALSE(c.has_group("other"));
  const ParameterStore raw = c.group("raw"), ema = c.group("ema");
  REQUIRE(raw.size() == 2);
  CHECK(raw[0].name == "w");
  CHECK(raw[0].value.data[0] != ema[0].value.data[0]);
  CHECK(ema[0].value.data[0] == 1.0 / 3.0);
  CHECK_THROWS_AS(c.group("other"), CheckpointError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::vector<unsigned char> good = encode_checkpoint(sample_checkpoint());
  SUBCASE("truncated") {
    for (std::size_t cut : {std::size_t{3}, std::size_t{12}, good.size() / 2, good.size() - 1}) {
      std::vector<unsigned char> b(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
      CHECK_THROWS_AS(decode_checkpoint(b), CheckpointError);
    }
  }
  SUBCASE("trailing bytes") {
    std::vector<unsigned char> b = good;
    b.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(b), CheckpointError);
  }
  SUBCASE("flipped payload bit") {
    std::vector<unsigned char> b = good;
    b.back() ^= 1;
    CHECK_THROWS_AS(decode_checkpoint(b), CheckpointError);
  }
  SUBCASE("bad tag") {
    std::vector<unsigned char> b = good;
    b[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(b), CheckpointError);
  }
  SUBCASE("truncated file on disk") {
    const fs::path dir = temp_dir("trunc");
    const fs::path p = dir / "t.mdck";
    {
      std::ofstream out(p, std::ios::binary);
      out.write(reinterpret_cast<const char*>(good.data()), static_cast<std::streamsize>(good.size() - 10));
    }
    CHECK_THROWS_AS(load_checkpoint(p.string()), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.mdck").string()), CheckpointError);
  }
}

TEST_CASE("empty config gives the documented defaults") {
  const RunConfig c = parse_config("");
  CHECK(c.sampler.steps == 50);
  CHECK(c.sampler.omega == 5.0);
  CHECK(c.sampler.interval_lo == 0.3);
  CHECK(c.sampler.interval_hi == 0.8);
  CHECK(c.sampler.condition_noise == 0.77);
  CHECK(c.sampler.early_stop == 1e-5);
  CHECK(c.train.lr == 1e-3);
  CHECK(c.train.batch == 2048);
  CHECK(c.train.warmup == 200);
  CHECK(c.train.precision == Precision::f32);
  CHECK(c.model.hidden == 256);
  CHECK(c.schedule.continuous == "tabular-vp");
  CHECK(c.sampler.resolve(Integrator::euler_maruyama).integrator == Integrator::euler_maruyama);
}

TEST_CASE("file values and overrides") {
  const std::string text = "[sampler]\nomega = 2.0\nsteps = 30\n[train]\nsteps = 7\n";
  const RunConfig f = parse_config(text);
  CHECK(f.sampler.omega == 2.0);
  CHECK(f.sampler.steps == 30);
  CHECK(f.train.steps == 7);
  const RunConfig o = parse_config(text, {{"sampler.omega", "3.0"}, {"paths.data", "rows.csv"}, {"sampler.interval", "[0.1, 0.9]"}});
  CHECK(o.sampler.omega == 3.0);
  CHECK(o.sampler.steps == 30);
  CHECK(o.paths.data == "rows.csv");
  CHECK(o.sampler.interval_lo == 0.1);
  CHECK(o.sampler.interval_hi == 0.9);
  // Integer literals are accepted where reals are expected.
  CHECK(parse_config("", {{"sampler.omega", "4"}}).sampler.omega == 4.0);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(parse_config("[sampler]\ninterval = [0.8, 0.3]\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[sampler]\nomgea = 1.0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[samplr]\nomega = 1.0\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[sampler]\nomega = \"big\"\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[schedule]\ncontinuous = \"cosine\"\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("", {{"omega", "1"}}), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nsteps = -3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[sampler\n"), ConfigError);
  try {
    parse_config("[model]\nwidth = 3\n");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("model.width") != std::string::npos);
  }
}

TEST_CASE("required paths are named") {
  const RunConfig c = parse_config("");
  try {
    c.validate_paths("train");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("paths.data") != std::string::npos);
  }
  CHECK_THROWS_AS(c.validate_paths("sample"), ConfigError);
  CHECK_NOTHROW(c.validate_paths("verify"));
}

TEST_CASE("resolved config echo re-parses to the same values") {
  const fs::path dir = temp_dir("echo");
  const RunConfig c = parse_config("", {{"sampler.omega", "2.5"}, {"train.seed", "9"}, {"paths.output", dir.string()}});
  echo_config(c, dir.string());
  const RunConfig back = load_config((dir / "resolved_config.toml").string());
  CHECK(back.to_toml() == c.to_toml());
  CHECK(back.sampler.omega == 2.5);
  CHECK(c.to_json()["train"]["seed"] == 9);
}

TEST_CASE("tabular model survives a checkpoint") {
  const Dataset d = planted_fixture(400, 4);
  TabularTrainOptions opt;
  opt.hidden_dim = 16;
  opt.depth = 2;
  opt.train.steps = 5;
  opt.train.batch = 32;
  const TabularModel m = train_tabular(d, opt);
  const Checkpoint c = decode_checkpoint(encode_checkpoint(tabular_checkpoint(m, {{"note", "x"}})));
  CHECK(c.meta["note"] == "x");
  const TabularModel back = tabular_from_checkpoint(c, &d.schema);
  auto cfg = tabular_sampler_defaults();
  cfg.steps = 5;
  CHECK(synthesize(back, 50, cfg, 3).rows == synthesize(m, 50, cfg, 3).rows);
  CHECK(synthesize(back, 50, cfg, 3, false).rows == synthesize(m, 50, cfg, 3, false).rows);

  TabularSchema other = d.schema;
  other.columns[1].name = "bb";
  try {
    tabular_from_checkpoint(c, &other);
    FAIL("expected a schema mismatch");
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bb") != std::string::npos);
  }
}
