#include "mmdiff/config.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "toml.hpp"

namespace mmdiff {

namespace fs = std::filesystem;

Schedules ScheduleSection::resolve() const {
  Schedules s;
  try {
    s.cont = continuous_preset(continuous);
    s.disc = discrete_preset(discrete);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  if (!std::isnan(beta_start)) s.cont.beta_start = beta_start;
  if (!std::isnan(beta_end)) s.cont.beta_end = beta_end;
  if (!std::isnan(scale)) s.cont.scale = scale;
  if (!std::isnan(delta)) s.disc.delta = delta;
  try {
    s.cont.validate();
    s.disc.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  return s;
}

SamplerConfig SamplerSection::resolve(Integrator automatic) const {
  SamplerConfig c;
  c.steps = steps;
  c.guidance = {omega, interval_lo, interval_hi, condition_noise};
  c.early_stop = early_stop;
  if (integrator == "auto") {
    c.integrator = automatic;
  } else if (integrator == "heun") {
    c.integrator = Integrator::heun;
  } else if (integrator == "euler-maruyama") {
    c.integrator = Integrator::euler_maruyama;
  } else {
    throw ConfigError("sampler.integrator: unknown value '" + integrator + "' (auto, heun, euler-maruyama)");
  }
  c.workers = workers;
  c.chunk = chunk;
  return c;
}

namespace {

std::string precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

[[noreturn]] void type_error(const std::string& key, const char* want) {
  throw ConfigError(key + ": expected " + want);
}

double as_double(const toml::node& n, const std::string& key) {
  if (auto v = n.as_floating_point()) return v->get();
  if (auto v = n.as_integer()) return static_cast<double>(v->get());
  type_error(key, "a number");
}

std::int64_t as_int(const toml::node& n, const std::string& key) {
  if (auto v = n.as_integer()) return v->get();
  type_error(key, "an integer");
}

std::size_t as_count(const toml::node& n, const std::string& key) {
  const std::int64_t v = as_int(n, key);
  if (v < 0) throw ConfigError(key + ": must be >= 0");
  return static_cast<std::size_t>(v);
}

bool as_bool(const toml::node& n, const std::string& key) {
  if (auto v = n.as_boolean()) return v->get();
  type_error(key, "true or false");
}

std::string as_string(const toml::node& n, const std::string& key) {
  if (auto v = n.as_string()) return v->get();
  type_error(key, "a string");
}

using Setter = std::function<void(const toml::node&, const std::string&)>;
using Binding = std::map<std::string, std::map<std::string, Setter>>;

Binding bind(RunConfig& c) {
  Binding b;
  auto& sch = b["schedule"];
  sch["continuous"] = [&](auto& n, auto& k) { c.schedule.continuous = as_string(n, k); };
  sch["discrete"] = [&](auto& n, auto& k) { c.schedule.discrete = as_string(n, k); };
  sch["beta_start"] = [&](auto& n, auto& k) { c.schedule.beta_start = as_double(n, k); };
  sch["beta_end"] = [&](auto& n, auto& k) { c.schedule.beta_end = as_double(n, k); };
  sch["scale"] = [&](auto& n, auto& k) { c.schedule.scale = as_double(n, k); };
  sch["delta"] = [&](auto& n, auto& k) { c.schedule.delta = as_double(n, k); };

  auto& mod = b["model"];
  mod["arch"] = [&](auto& n, auto& k) {
    try {
      c.model.arch = parse_arch(as_string(n, k));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(k + ": " + e.what());
    }
  };
  mod["hidden"] = [&](auto& n, auto& k) { c.model.hidden = as_count(n, k); };
  mod["depth"] = [&](auto& n, auto& k) { c.model.depth = as_count(n, k); };
  mod["time_embed"] = [&](auto& n, auto& k) { c.model.time_embed = as_count(n, k); };
  mod["heads"] = [&](auto& n, auto& k) { c.model.heads = as_count(n, k); };
  mod["token_embed"] = [&](auto& n, auto& k) { c.model.token_embed = as_count(n, k); };
  mod["mlp_ratio"] = [&](auto& n, auto& k) { c.model.mlp_ratio = as_count(n, k); };
  mod["numeric_mode"] = [&](auto& n, auto& k) {
    try {
      c.model.numeric_mode = parse_numeric_mode(as_string(n, k));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(k + ": " + e.what());
    }
  };
  mod["allow_unknown"] = [&](auto& n, auto& k) { c.model.allow_unknown = as_bool(n, k); };
  mod["init_seed"] = [&](auto& n, auto& k) { c.model.init_seed = as_count(n, k); };

  auto& tr = b["train"];
  tr["steps"] = [&](auto& n, auto& k) { c.train.steps = as_count(n, k); };
  tr["batch"] = [&](auto& n, auto& k) { c.train.batch = as_count(n, k); };
  tr["lr"] = [&](auto& n, auto& k) { c.train.lr = as_double(n, k); };
  tr["weight_decay"] = [&](auto& n, auto& k) { c.train.weight_decay = as_double(n, k); };
  tr["beta1"] = [&](auto& n, auto& k) { c.train.beta1 = as_double(n, k); };
  tr["beta2"] = [&](auto& n, auto& k) { c.train.beta2 = as_double(n, k); };
  tr["warmup"] = [&](auto& n, auto& k) { c.train.warmup = as_count(n, k); };
  tr["ema_decay"] = [&](auto& n, auto& k) { c.train.ema_decay = as_double(n, k); };
  tr["lambda_disc"] = [&](auto& n, auto& k) { c.train.lambda_disc = as_double(n, k); };
  tr["seed"] = [&](auto& n, auto& k) { c.train.seed = as_count(n, k); };
  tr["precision"] = [&](auto& n, auto& k) {
    const std::string v = as_string(n, k);
    if (v == "f32") {
      c.train.precision = Precision::f32;
    } else if (v == "f64") {
      c.train.precision = Precision::f64;
    } else {
      throw ConfigError(k + ": expected \"f32\" or \"f64\"");
    }
  };
  tr["t_min"] = [&](auto& n, auto& k) { c.train.draw.t_min = as_double(n, k); };
  tr["p_zero_t"] = [&](auto& n, auto& k) { c.train.draw.p_zero_t = as_double(n, k); };
  tr["p_zero_s"] = [&](auto& n, auto& k) { c.train.draw.p_zero_s = as_double(n, k); };

  auto& sa = b["sampler"];
  sa["steps"] = [&](auto& n, auto& k) { c.sampler.steps = static_cast<int>(as_count(n, k)); };
  sa["omega"] = [&](auto& n, auto& k) { c.sampler.omega = as_double(n, k); };
  sa["interval"] = [&](const toml::node& n, const std::string& k) {
    const auto* arr = n.as_array();
    if (!arr || arr->size() != 2) type_error(k, "an array [lo, hi]");
    c.sampler.interval_lo = as_double(*arr->get(0), k);
    c.sampler.interval_hi = as_double(*arr->get(1), k);
  };
  sa["interval_lo"] = [&](auto& n, auto& k) { c.sampler.interval_lo = as_double(n, k); };
  sa["interval_hi"] = [&](auto& n, auto& k) { c.sampler.interval_hi = as_double(n, k); };
  sa["condition_noise"] = [&](auto& n, auto& k) { c.sampler.condition_noise = as_double(n, k); };
  sa["early_stop"] = [&](auto& n, auto& k) { c.sampler.early_stop = as_double(n, k); };
  sa["integrator"] = [&](auto& n, auto& k) { c.sampler.integrator = as_string(n, k); };
  sa["n"] = [&](auto& n, auto& k) { c.sampler.n = as_count(n, k); };
  sa["workers"] = [&](auto& n, auto& k) { c.sampler.workers = as_count(n, k); };
  sa["chunk"] = [&](auto& n, auto& k) { c.sampler.chunk = as_count(n, k); };
  sa["use_ema"] = [&](auto& n, auto& k) { c.sampler.use_ema = as_bool(n, k); };
  sa["seed"] = [&](auto& n, auto& k) { c.sampler.seed = as_count(n, k); };

  auto& pa = b["paths"];
  pa["data"] = [&](auto& n, auto& k) { c.paths.data = as_string(n, k); };
  pa["schema"] = [&](auto& n, auto& k) { c.paths.schema = as_string(n, k); };
  pa["checkpoint"] = [&](auto& n, auto& k) { c.paths.checkpoint = as_string(n, k); };
  pa["synthetic"] = [&](auto& n, auto& k) { c.paths.synthetic = as_string(n, k); };
  pa["output"] = [&](auto& n, auto& k) { c.paths.output = as_string(n, k); };
  return b;
}

toml::table parse_toml(const std::string& text, const std::string& origin) {
  try {
    return toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << origin << ": " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(msg.str());
  }
}

void apply_override(toml::table& tbl, const std::string& dotted, const std::string& value) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == dotted.size()) {
    throw ConfigError("override key '" + dotted + "' must look like section.key");
  }
  const std::string sec = dotted.substr(0, dot), key = dotted.substr(dot + 1);
  if (!tbl.contains(sec)) tbl.insert(sec, toml::table{});
  auto* section = tbl[sec].as_table();
  if (!section) throw ConfigError("'" + sec + "' is not a section");
  toml::table parsed;
  bool ok = true;
  try {
    parsed = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    ok = false;
  }
  if (ok && parsed.contains("v")) {
    section->insert_or_assign(key, *parsed.get("v"));
  } else {
    section->insert_or_assign(key, value);
  }
}

RunConfig from_table(const toml::table& tbl) {
  RunConfig c;
  Binding b = bind(c);
  for (const auto& [sec_key, sec_node] : tbl) {
    const std::string sec(sec_key.str());
    const auto it = b.find(sec);
    if (it == b.end()) throw ConfigError("unknown config section [" + sec + "]");
    const auto* section = sec_node.as_table();
    if (!section) throw ConfigError("'" + sec + "' must be a [section]");
    for (const auto& [key_key, node] : *section) {
      const std::string key(key_key.str());
      const auto setter = it->second.find(key);
      if (setter == it->second.end()) throw ConfigError("unknown config key " + sec + "." + key);
      setter->second(node, sec + "." + key);
    }
  }
  c.validate();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  try {
    (void)schedule.resolve();
    train.validate();
    GuidanceSpec{sampler.omega, sampler.interval_lo, sampler.interval_hi, sampler.condition_noise}.validate();
    (void)sampler.resolve(Integrator::heun);
    if (!(sampler.early_stop > 0.0 && sampler.early_stop < 1.0)) {
      throw ConfigError("sampler.early_stop must lie in (0, 1)");
    }
    if (sampler.chunk == 0) throw ConfigError("sampler.chunk must be positive");
    if (sampler.workers == 0) throw ConfigError("sampler.workers must be positive");
    if (model.hidden == 0 || model.depth == 0) throw ConfigError("model.hidden and model.depth must be positive");
    if (model.time_embed < 2 || model.time_embed % 2) throw ConfigError("model.time_embed must be even and >= 2");
    if (model.arch == Arch::attn && (model.heads == 0 || model.hidden % model.heads)) {
      throw ConfigError("model.hidden must be a multiple of model.heads");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

void RunConfig::validate_paths(const std::string& sub) const {
  auto need_file = [](const std::string& key, const std::string& value) {
    if (value.empty()) throw ConfigError(key + " is required (set it in the config file or with a flag)");
    if (!fs::is_regular_file(value)) throw ConfigError(key + ": no such file '" + value + "'");
  };
  auto need_value = [](const std::string& key, const std::string& value) {
    if (value.empty()) throw ConfigError(key + " is required (set it in the config file or with a flag)");
  };
  if (!paths.schema.empty() && !fs::is_regular_file(paths.schema)) {
    throw ConfigError("paths.schema: no such file '" + paths.schema + "'");
  }
  if (sub == "train") {
    need_file("paths.data", paths.data);
  } else if (sub == "sample") {
    need_file("paths.checkpoint", paths.checkpoint);
  } else if (sub == "eval") {
    need_file("paths.data", paths.data);
    need_file("paths.synthetic", paths.synthetic);
  } else if (sub == "verify" || sub == "demo-so3") {
    // No inputs.
  } else {
    need_value("subcommand", std::string());
  }
}

std::string RunConfig::output_dir() const {
  if (!paths.output.empty()) return paths.output;
  if (const char* root = std::getenv("MMDIFF_OUTPUT_ROOT"); root && *root) return root;
  return "mmdiff-out";
}

TabularTrainOptions RunConfig::tabular_options() const {
  TabularTrainOptions o;
  o.arch = model.arch;
  o.hidden_dim = model.hidden;
  o.depth = model.depth;
  o.time_embed_dim = model.time_embed;
  o.heads = model.heads;
  o.token_embed_dim = model.token_embed;
  o.mlp_ratio = model.mlp_ratio;
  o.numeric_mode = model.numeric_mode;
  o.allow_unknown = model.allow_unknown;
  o.sched = schedule.resolve();
  o.train = train;
  o.init_seed = model.init_seed;
  return o;
}

std::string RunConfig::to_toml() const {
  toml::table sch{{"continuous", schedule.continuous}, {"discrete", schedule.discrete}};
  if (!std::isnan(schedule.beta_start)) sch.insert("beta_start", schedule.beta_start);
  if (!std::isnan(schedule.beta_end)) sch.insert("beta_end", schedule.beta_end);
  if (!std::isnan(schedule.scale)) sch.insert("scale", schedule.scale);
  if (!std::isnan(schedule.delta)) sch.insert("delta", schedule.delta);
  auto i64 = [](std::size_t v) { return static_cast<std::int64_t>(v); };
  toml::table mod{{"arch", arch_name(model.arch)},
                  {"hidden", i64(model.hidden)},
                  {"depth", i64(model.depth)},
                  {"time_embed", i64(model.time_embed)},
                  {"heads", i64(model.heads)},
                  {"token_embed", i64(model.token_embed)},
                  {"mlp_ratio", i64(model.mlp_ratio)},
                  {"numeric_mode", numeric_mode_name(model.numeric_mode)},
                  {"allow_unknown", model.allow_unknown},
                  {"init_seed", i64(model.init_seed)}};
  toml::table tr{{"steps", i64(train.steps)},
                 {"batch", i64(train.batch)},
                 {"lr", train.lr},
                 {"weight_decay", train.weight_decay},
                 {"beta1", train.beta1},
                 {"beta2", train.beta2},
                 {"warmup", i64(train.warmup)},
                 {"ema_decay", train.ema_decay},
                 {"lambda_disc", train.lambda_disc},
                 {"seed", i64(train.seed)},
                 {"precision", precision_name(train.precision)},
                 {"t_min", train.draw.t_min},
                 {"p_zero_t", train.draw.p_zero_t},
                 {"p_zero_s", train.draw.p_zero_s}};
  toml::table sa{{"steps", sampler.steps},
                 {"omega", sampler.omega},
                 {"interval", toml::array{sampler.interval_lo, sampler.interval_hi}},
                 {"condition_noise", sampler.condition_noise},
                 {"early_stop", sampler.early_stop},
                 {"integrator", sampler.integrator},
                 {"n", i64(sampler.n)},
                 {"workers", i64(sampler.workers)},
                 {"chunk", i64(sampler.chunk)},
                 {"use_ema", sampler.use_ema},
                 {"seed", i64(sampler.seed)}};
  toml::table pa{{"data", paths.data},
                 {"schema", paths.schema},
                 {"checkpoint", paths.checkpoint},
                 {"synthetic", paths.synthetic},
                 {"output", output_dir()}};
  toml::table root{{"schedule", sch}, {"model", mod}, {"train", tr}, {"sampler", sa}, {"paths", pa}};
  std::ostringstream out;
  out << root << '\n';
  return out.str();
}

nlohmann::json RunConfig::to_json() const {
  const toml::table t = parse_toml(to_toml(), "resolved config");
  std::ostringstream out;
  out << toml::json_formatter{t};
  return nlohmann::json::parse(out.str());
}

RunConfig parse_config(const std::string& text, const std::vector<std::pair<std::string, std::string>>& overrides) {
  toml::table tbl = parse_toml(text, "config");
  for (const auto& [k, v] : overrides) apply_override(tbl, k, v);
  return from_table(tbl);
}

RunConfig load_config(const std::string& path, const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  try {
    return parse_config(text, overrides);
  } catch (const ConfigError& e) {
    if (path.empty()) throw;
    throw ConfigError(path + ": " + e.what());
  }
}

void echo_config(const RunConfig& cfg, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
  std::ofstream out(fs::path(dir) / "resolved_config.toml");
  if (!out) throw ConfigError("cannot write resolved config into '" + dir + "'");
  out << cfg.to_toml();
}

}  // namespace mmdiff
