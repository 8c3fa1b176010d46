#include "mmdiff/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace mmdiff {

using nlohmann::json;

namespace {

constexpr char kTag[5] = {'M', 'D', 'C', 'K', '1'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t fnv1a(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

bool fits_f32(const Tensor& t) {
  for (double v : t.data) {
    const float f = static_cast<float>(v);
    if (std::bit_cast<std::uint64_t>(static_cast<double>(f)) != std::bit_cast<std::uint64_t>(v)) return false;
  }
  return true;
}

template <class T>
void append(std::vector<unsigned char>& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

}  // namespace

void Checkpoint::add_group(const std::string& group, const ParameterStore& params) {
  for (const auto& p : params.all()) tensors.push_back({p.name, group, p.value});
}

bool Checkpoint::has_group(const std::string& group) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const CheckpointTensor& t) { return t.group == group; });
}

ParameterStore Checkpoint::group(const std::string& group) const {
  ParameterStore ps;
  for (const auto& t : tensors)
    if (t.group == group) ps.add(t.name, t.value);
  if (ps.size() == 0) throw CheckpointError("checkpoint has no tensor group '" + group + "'");
  return ps;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> payload;
  json entries = json::array();
  for (const auto& t : ckpt.tensors) {
    if (t.value.data.size() != t.value.rows * t.value.cols) throw CheckpointError("tensor '" + t.name + "' has a bad shape");
    const bool f32 = fits_f32(t.value);
    const std::size_t offset = payload.size();
    for (double v : t.value.data) {
      if (f32) {
        append(payload, static_cast<float>(v));
      } else {
        append(payload, v);
      }
    }
    entries.push_back({{"name", t.name},
                       {"group", t.group},
                       {"dtype", f32 ? "f32" : "f64"},
                       {"shape", {t.value.rows, t.value.cols}},
                       {"offset", offset},
                       {"bytes", payload.size() - offset}});
  }
  const json header{{"format", "MDCK1"},
                    {"tensors", entries},
                    {"meta", ckpt.meta},
                    {"payload_bytes", payload.size()},
                    {"payload_fnv1a", fnv1a(payload.data(), payload.size())}};
  const std::string h = header.dump();
  std::vector<unsigned char> out(kTag, kTag + 5);
  append(out, static_cast<std::uint64_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 13 || std::memcmp(bytes.data(), kTag, 5) != 0) throw CheckpointError("not an MDCK1 checkpoint");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 5, 8);
  if (hlen > bytes.size() - 13) throw CheckpointError("truncated checkpoint header");
  json header;
  try {
    header = json::parse(bytes.begin() + 13, bytes.begin() + 13 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const unsigned char* payload = bytes.data() + 13 + hlen;
  const std::size_t have = bytes.size() - 13 - hlen;
  Checkpoint ck;
  try {
    if (header.at("format").get<std::string>() != "MDCK1") throw CheckpointError("unsupported checkpoint format");
    const std::size_t want = header.at("payload_bytes").get<std::size_t>();
    if (have != want) {
      throw CheckpointError("payload length " + std::to_string(have) + " bytes, header declares " + std::to_string(want) +
                            (have < want ? " (truncated)" : ""));
    }
    if (fnv1a(payload, have) != header.at("payload_fnv1a").get<std::uint64_t>()) {
      throw CheckpointError("payload checksum mismatch");
    }
    ck.meta = header.at("meta");
    std::vector<std::pair<std::size_t, std::size_t>> extents;
    for (const auto& e : header.at("tensors")) {
      CheckpointTensor t;
      t.name = e.at("name").get<std::string>();
      t.group = e.at("group").get<std::string>();
      const std::string dtype = e.at("dtype").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw CheckpointError("tensor '" + t.name + "' shape must have two extents");
      const std::size_t off = e.at("offset").get<std::size_t>(), len = e.at("bytes").get<std::size_t>();
      const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
      if (width == 0) throw CheckpointError("tensor '" + t.name + "' has unknown dtype '" + dtype + "'");
      const std::size_t count = shape[0] * shape[1];
      if (len != count * width || off > have || len > have - off) {
        throw CheckpointError("tensor '" + t.name + "' extent is out of range");
      }
      extents.emplace_back(off, len);
      t.value = Tensor(shape[0], shape[1]);
      for (std::size_t i = 0; i < count; ++i) {
        if (width == 4) {
          float f;
          std::memcpy(&f, payload + off + 4 * i, 4);
          t.value.data[i] = f;
        } else {
          std::memcpy(&t.value.data[i], payload + off + 8 * i, 8);
        }
      }
      ck.tensors.push_back(std::move(t));
    }
    std::sort(extents.begin(), extents.end());
    for (std::size_t i = 1; i < extents.size(); ++i) {
      if (extents[i - 1].first + extents[i - 1].second > extents[i].first) throw CheckpointError("tensor extents overlap");
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  // Write beside the target, then rename, so readers never see a partial file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError("'" + path + "': " + e.what());
  }
}

namespace {

json net_json(const ScoreNetConfig& c) {
  return {{"arch", arch_name(c.arch)},
          {"hidden_dim", c.hidden_dim},
          {"depth", c.depth},
          {"time_embed_dim", c.time_embed_dim},
          {"heads", c.heads},
          {"token_embed_dim", c.token_embed_dim},
          {"mlp_ratio", c.mlp_ratio},
          {"cont_dim", c.layout.cont_dim},
          {"num_categories", c.layout.num_categories}};
}

ScoreNetConfig net_from_json(const json& j) {
  ScoreNetConfig c;
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.token_embed_dim = j.at("token_embed_dim").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.layout.cont_dim = j.at("cont_dim").get<std::size_t>();
  c.layout.num_categories = j.at("num_categories").get<std::vector<int>>();
  c.validate();
  return c;
}

json schedules_json(const Schedules& s) {
  return {{"continuous",
           {{"preset", preset_name(s.cont)},
            {"beta_start", s.cont.beta_start},
            {"beta_end", s.cont.beta_end},
            {"scale", s.cont.scale}}},
          {"discrete", {{"preset", "loglinear-mask"}, {"delta", s.disc.delta}}}};
}

Schedules schedules_from_json(const json& j) {
  Schedules s;
  const json& c = j.at("continuous");
  s.cont = continuous_preset(c.at("preset").get<std::string>());
  s.cont.beta_start = c.at("beta_start").get<double>();
  s.cont.beta_end = c.at("beta_end").get<double>();
  s.cont.scale = c.at("scale").get<double>();
  s.disc = discrete_preset(j.at("discrete").at("preset").get<std::string>());
  s.disc.delta = j.at("discrete").at("delta").get<double>();
  s.cont.validate();
  s.disc.validate();
  return s;
}

}  // namespace

Checkpoint tabular_checkpoint(const TabularModel& model, const json& extra) {
  Checkpoint c;
  c.meta = extra.is_object() ? extra : json::object();
  c.meta["kind"] = "tabular";
  c.meta["schema"] = model.prep.schema().to_json();
  c.meta["preprocessor"] = model.prep.to_json();
  c.meta["net"] = net_json(model.net);
  c.meta["schedule"] = schedules_json(model.sched);
  c.meta["ema"] = true;
  c.add_group("raw", model.raw);
  c.add_group("ema", model.ema);
  return c;
}

TabularModel tabular_from_checkpoint(const Checkpoint& ckpt, const TabularSchema* expected) {
  if (ckpt.meta.value("kind", std::string()) != "tabular") throw CheckpointError("not a tabular checkpoint");
  TabularModel m;
  try {
    const TabularSchema found = TabularSchema::from_json(ckpt.meta.at("schema"));
    if (expected) {
      const auto diff = schema_diff(*expected, found);
      if (!diff.empty()) {
        std::string msg = "checkpoint schema does not match the expected schema:";
        for (const auto& d : diff) msg += "\n  " + d;
        throw CheckpointError(msg);
      }
    }
    m.prep = Preprocessor::from_json(ckpt.meta.at("preprocessor"));
    m.net = net_from_json(ckpt.meta.at("net"));
    m.sched = schedules_from_json(ckpt.meta.at("schedule"));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad tabular checkpoint meta: ") + e.what());
  }
  m.raw = ckpt.group("raw");
  m.ema = ckpt.group("ema");
  // Shapes must fit the recorded network.
  try {
    const ScoreNet probe(m.net, m.raw, m.sched.cont);
    const ScoreNet probe_ema(m.net, m.ema, m.sched.cont);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint tensors do not fit the network: ") + e.what());
  }
  return m;
}

}  // namespace mmdiff
