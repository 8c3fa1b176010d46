#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmdiff/checkpoint.hpp"
#include "mmdiff/config.hpp"
#include "mmdiff/so3.hpp"
#include "mmdiff/tabular.hpp"
#include "mmdiff/train.hpp"
#include "mmdiff/verify.hpp"

namespace mmdiff::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Logger {
 public:
  explicit Logger(std::ostream& err) : err_(err), t0_(std::chrono::steady_clock::now()) {}

  void operator()(const std::string& level, const std::string& event, json fields = json::object()) const {
    json line{{"elapsed", std::round(elapsed() * 1000.0) / 1000.0}, {"level", level}, {"event", event}};
    for (auto& [k, v] : fields.items()) line[k] = v;
    err_ << line.dump() << '\n' << std::flush;
  }
  double elapsed() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::ostream& err_;
  std::chrono::steady_clock::time_point t0_;
};

// TOML literal for a string flag value.
std::string toml_string(const std::string& s) { return json(s).dump(); }

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  // Dotted key -> TOML literal, in flag declaration order.
  std::vector<std::pair<std::string, std::string>> mapped;
  std::size_t chains = 10000;
  std::size_t so3_steps = 4000;
  std::size_t so3_train_rows = 20000;
};

class Binder {
 public:
  Binder(CLI::App* app, Flags& flags) : app_(app), flags_(flags) {}

  void str(const std::string& name, const std::string& key, const std::string& help) {
    auto& slot = strings_[key];
    app_->add_option(name, slot, help)->each([this, key](const std::string& v) {
      flags_.mapped.emplace_back(key, toml_string(v));
    });
  }
  void num(const std::string& name, const std::string& key, const std::string& help) {
    auto& slot = strings_[key];
    app_->add_option(name, slot, help)->each([this, key](const std::string& v) {
      flags_.mapped.emplace_back(key, v);
    });
  }
  // Sets a fixed literal when present.
  void toggle(const std::string& name, const std::string& key, const std::string& literal, const std::string& help) {
    app_->add_flag_callback(name, [this, key, literal] { flags_.mapped.emplace_back(key, literal); }, help);
  }

 private:
  CLI::App* app_;
  Flags& flags_;
  std::map<std::string, std::string> strings_;
};

void add_common(CLI::App* app, Flags& f, Binder& b) {
  app->add_option("-c,--config", f.config, "TOML config file");
  app->add_option("--set", f.sets, "Override a config value: section.key=value (repeatable)");
  b.str("-o,--output", "paths.output", "Output directory");
}

void add_train_flags(Binder& b) {
  b.str("--data", "paths.data", "Training CSV");
  b.str("--schema", "paths.schema", "Schema sidecar JSON");
  b.num("--steps", "train.steps", "Training steps");
  b.num("--batch", "train.batch", "Batch size");
  b.num("--lr", "train.lr", "Peak learning rate");
  b.num("--seed", "train.seed", "Training seed");
  b.str("--arch", "model.arch", "mlp or attn");
  b.num("--hidden", "model.hidden", "Hidden width");
  b.num("--depth", "model.depth", "Blocks");
  b.str("--precision", "train.precision", "f32 or f64");
  b.str("--numeric-mode", "model.numeric_mode", "zscore or quantile");
  b.str("--checkpoint", "paths.checkpoint", "Where to write the checkpoint (default: <output>/model.mdck)");
}

void add_sample_flags(Binder& b) {
  b.str("--checkpoint", "paths.checkpoint", "Checkpoint to sample from");
  b.str("--schema", "paths.schema", "Expected schema sidecar JSON");
  b.str("--synthetic", "paths.synthetic", "Where to write samples (default: <output>/synthetic.csv)");
  b.num("-n,--n", "sampler.n", "Rows to generate");
  b.num("--sampler-steps", "sampler.steps", "Reverse steps");
  b.num("--omega", "sampler.omega", "Guidance strength");
  b.str("--integrator", "sampler.integrator", "auto, heun or euler-maruyama");
  b.num("--workers", "sampler.workers", "Worker threads");
  b.num("--chunk", "sampler.chunk", "Chains per work item");
  b.num("--seed", "sampler.seed", "Sampling seed");
  b.toggle("--raw", "sampler.use_ema", "false", "Use raw weights instead of the EMA copy");
}

void add_eval_flags(Binder& b) {
  b.str("--data", "paths.data", "Real CSV");
  b.str("--synthetic", "paths.synthetic", "Synthetic CSV");
  b.str("--schema", "paths.schema", "Schema sidecar JSON");
}

std::vector<std::pair<std::string, std::string>> overrides_of(const Flags& f) {
  std::vector<std::pair<std::string, std::string>> o;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
    o.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  o.insert(o.end(), f.mapped.begin(), f.mapped.end());
  return o;
}

fs::path prepare_output(const RunConfig& cfg) {
  const fs::path dir = cfg.output_dir();
  echo_config(cfg, dir.string());
  return dir;
}

std::optional<TabularSchema> declared_schema(const RunConfig& cfg) {
  if (cfg.paths.schema.empty()) return std::nullopt;
  return load_schema_sidecar(cfg.paths.schema);
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

int cmd_train(const RunConfig& cfg, std::ostream& out, const Logger& log) {
  cfg.validate_paths("train");
  const fs::path dir = prepare_output(cfg);
  const auto schema = declared_schema(cfg);
  CsvOptions co;
  if (schema) co.schema = &*schema;
  LoadReport rep;
  const Dataset data = load_csv(cfg.paths.data, co, &rep);
  if (!rep.rejected_lines.empty())
    log("warn", "data.rows_rejected", {{"count", rep.rejected_lines.size()}, {"lines", rep.rejected_lines}});
  log("info", "data.loaded", {{"rows", data.size()}, {"columns", data.schema.columns.size()}});

  const TabularTrainOptions opt = cfg.tabular_options();
  const std::size_t every = std::max<std::size_t>(1, opt.train.steps / 20);
  TrainResult tr;
  const TabularModel model = train_tabular(data, opt, &tr, [&](const TrainRecord& r) {
    if (r.step % every == 0 || r.step == 1 || !r.applied)
      log(r.applied ? "info" : "warn", "train.step", {{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"applied", r.applied}});
  });
  const json jc = cfg.to_json();
  const json meta{{"train", jc["train"]}, {"model", jc["model"]}};
  const fs::path ck = cfg.paths.checkpoint.empty() ? dir / "model.mdck" : fs::path(cfg.paths.checkpoint);
  if (ck.has_parent_path()) fs::create_directories(ck.parent_path());
  save_checkpoint(ck.string(), tabular_checkpoint(model, meta));
  write_loss_csv((dir / "loss.csv").string(), tr.curve);
  write_json(dir / "schema.json", model.prep.schema().to_json());
  log("info", "train.done", {{"checkpoint", ck.string()}, {"rejected_updates", tr.rejected}});
  out << json{{"checkpoint", ck.string()},
              {"loss_csv", (dir / "loss.csv").string()},
              {"schema", (dir / "schema.json").string()},
              {"steps", tr.curve.size()},
              {"final_loss", tr.curve.empty() ? 0.0 : tr.curve.back().loss}}
             .dump(2)
      << '\n';
  return kOk;
}

int cmd_sample(const RunConfig& cfg, std::ostream& out, const Logger& log) {
  cfg.validate_paths("sample");
  const fs::path dir = prepare_output(cfg);
  const auto schema = declared_schema(cfg);
  const TabularModel model = tabular_from_checkpoint(load_checkpoint(cfg.paths.checkpoint), schema ? &*schema : nullptr);
  SamplerConfig sc = cfg.sampler.resolve(Integrator::euler_maruyama);
  log("info", "sample.start", {{"n", cfg.sampler.n}, {"steps", sc.steps}, {"workers", sc.workers}, {"ema", cfg.sampler.use_ema}});
  const Dataset syn = synthesize(model, cfg.sampler.n, sc, cfg.sampler.seed, cfg.sampler.use_ema);
  const fs::path dest = cfg.paths.synthetic.empty() ? dir / "synthetic.csv" : fs::path(cfg.paths.synthetic);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  save_csv(dest.string(), syn);
  log("info", "sample.done", {{"rows", syn.size()}, {"path", dest.string()}});
  out << json{{"synthetic", dest.string()}, {"rows", syn.size()}}.dump(2) << '\n';
  return kOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out, const Logger& log) {
  cfg.validate_paths("eval");
  const fs::path dir = prepare_output(cfg);
  const auto schema = declared_schema(cfg);
  CsvOptions co;
  if (schema) co.schema = &*schema;
  const Dataset real = load_csv(cfg.paths.data, co);
  // Synthetic cells are read against the real table's columns; new
  // categories are kept so they count against Shape.
  TabularSchema loose = real.schema;
  for (auto& c : loose.columns) c.categories.clear();
  CsvOptions so;
  so.schema = &loose;
  LoadReport rep;
  const Dataset synth = load_csv(cfg.paths.synthetic, so, &rep);
  if (!rep.rejected_lines.empty()) log("warn", "synthetic.rows_rejected", {{"count", rep.rejected_lines.size()}});
  const ShapeReport shape = metric_shape(real, synth);
  const TrendReport trend = metric_trend(real, synth);
  json m = metrics_json(shape, trend);
  m["rows_real"] = real.size();
  m["rows_synthetic"] = synth.size();
  write_json(dir / "metrics.json", m);
  log("info", "eval.done", {{"shape", shape.score}, {"trend", trend.score}});
  out << m.dump(2) << '\n';
  return kOk;
}

int cmd_verify(const RunConfig& cfg, const Flags& f, std::ostream& out, const Logger& log) {
  cfg.validate_paths("verify");
  const fs::path dir = prepare_output(cfg);
  VerifyOptions vo;
  vo.chains = f.chains;
  vo.seed = cfg.sampler.seed == 0 ? 1 : cfg.sampler.seed;
  const auto results = run_verify(vo, [&](const CheckResult& r) {
    log(r.passed ? "info" : "error", "verify.check", {{"id", r.id}, {"passed", r.passed}, {"seconds", r.seconds}});
  });
  const json rep = verify_report(results);
  write_json(dir / "verify.json", rep);
  out << rep.dump(2) << '\n';
  return rep["passed"].get<bool>() ? kOk : kRuntimeError;
}

int cmd_demo_so3(const RunConfig& cfg, const Flags& f, bool omega_given, bool n_given, bool steps_given,
                 std::ostream& out, const Logger& log) {
  const fs::path dir = prepare_output(cfg);
  const So3ToySpec spec = So3ToySpec::six_modes();
  const So3Schedule sched;
  Rng rng(cfg.train.seed, 0x50d);
  const auto data = toy_dataset_so3(spec, f.so3_train_rows, rng);
  So3TrainConfig tc;
  tc.steps = f.so3_steps;
  tc.seed = cfg.train.seed;
  So3Net net(So3NetConfig{}, sched, cfg.model.init_seed);
  log("info", "so3.train.start", {{"steps", tc.steps}, {"rows", data.size()}});
  const So3TrainResult tr = train_so3(net, data, tc);
  const So3Net ema(So3NetConfig{}, sched, tr.ema);
  Checkpoint ck;
  ck.meta = {{"kind", "so3"}, {"labels", spec.labels()}, {"tau_min", sched.tau_min}, {"tau_max", sched.tau_max}, {"ema", true}};
  ck.add_group("raw", net.params());
  ck.add_group("ema", tr.ema);
  save_checkpoint((dir / "so3_model.mdck").string(), ck);

  So3SamplerConfig sc;
  if (omega_given) sc.omega = cfg.sampler.omega;
  if (steps_given) sc.steps = cfg.sampler.steps;
  sc.condition_noise = cfg.sampler.condition_noise;
  const std::size_t n = n_given ? cfg.sampler.n : 1200;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(spec.labels()));
  const auto samples = sample_so3_conditional(ema, labels, sched, sc, cfg.sampler.seed);
  std::ofstream csv(dir / "so3_samples.csv");
  if (!csv) throw std::runtime_error("cannot write so3_samples.csv");
  csv << "lat,lon,theta,label\n";
  for (const auto& s : samples) {
    const double lat = std::asin(std::clamp(s.x.axis(2), -1.0, 1.0));
    const double lon = std::atan2(s.x.axis(1), s.x.axis(0));
    csv << format_number(lat) << ',' << format_number(lon) << ',' << format_number(s.x.angle) << ',' << s.label << '\n';
  }
  const double rate = in_cell_rate(spec, samples);
  const json summary{{"samples", (dir / "so3_samples.csv").string()},
                     {"checkpoint", (dir / "so3_model.mdck").string()},
                     {"omega", sc.omega},
                     {"in_cell_rate", rate},
                     {"final_loss", tr.losses.empty() ? 0.0 : tr.losses.back()}};
  write_json(dir / "so3_summary.json", summary);
  log("info", "so3.done", {{"in_cell_rate", rate}});
  out << summary.dump(2) << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal diffusion: tabular synthesis, oracle checks and an SO(3) demo", "mmdiff"};
  app.require_subcommand(1);
  Flags f;
  auto* train = app.add_subcommand("train", "Train a tabular model on a CSV");
  auto* sample = app.add_subcommand("sample", "Generate rows from a checkpoint");
  auto* eval = app.add_subcommand("eval", "Shape and Trend of synthetic rows against real rows");
  auto* verify = app.add_subcommand("verify", "Run the oracle checks and print a JSON report");
  auto* demo = app.add_subcommand("demo-so3", "Train and sample the labeled SO(3) toy");
  Binder bt(train, f), bs(sample, f), be(eval, f), bv(verify, f), bd(demo, f);
  add_common(train, f, bt);
  add_train_flags(bt);
  add_common(sample, f, bs);
  add_sample_flags(bs);
  add_common(eval, f, be);
  add_eval_flags(be);
  add_common(verify, f, bv);
  verify->add_option("--chains", f.chains, "Chains for the sampler checks")->check(CLI::PositiveNumber);
  bv.num("--seed", "sampler.seed", "Seed (default 1)");
  add_common(demo, f, bd);
  demo->add_option("--steps", f.so3_steps, "Training steps")->check(CLI::PositiveNumber);
  demo->add_option("--rows", f.so3_train_rows, "Training rows")->check(CLI::PositiveNumber);
  bd.num("-n,--n", "sampler.n", "Samples (default 1200)");
  bd.num("--omega", "sampler.omega", "Guidance strength (default 4)");
  bd.num("--sampler-steps", "sampler.steps", "Reverse steps (default 200)");
  bd.num("--seed", "train.seed", "Training seed");
  bd.num("--sample-seed", "sampler.seed", "Sampling seed");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kConfigError;
  }

  const Logger log(err);
  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  RunConfig cfg;
  try {
    cfg = load_config(f.config, overrides_of(f));
  } catch (const ConfigError& e) {
    log("error", "config", {{"message", e.what()}});
    return kConfigError;
  }
  log("info", "start", {{"command", name}, {"output", cfg.output_dir()}});
  try {
    if (name == "train") return cmd_train(cfg, out, log);
    if (name == "sample") return cmd_sample(cfg, out, log);
    if (name == "eval") return cmd_eval(cfg, out, log);
    if (name == "verify") return cmd_verify(cfg, f, out, log);
    auto given = [&](const std::string& key) {
      for (const auto& [k, v] : overrides_of(f))
        if (k == key) return true;
      return false;
    };
    // The tabular sampler defaults do not apply to the rotation demo; only
    // explicit flags or --set values do.
    return cmd_demo_so3(cfg, f, given("sampler.omega"), given("sampler.n"), given("sampler.steps"), out, log);
  } catch (const ConfigError& e) {
    log("error", "config", {{"message", e.what()}});
    return kConfigError;
  } catch (const std::exception& e) {
    log("error", "failed", {{"message", e.what()}});
    return kRuntimeError;
  }
}

}  // namespace mmdiff::cli
