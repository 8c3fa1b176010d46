#include "mmdiff/tabular.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "mmdiff/discrete.hpp"
#include "mmdiff/stats.hpp"

namespace mmdiff {

using nlohmann::json;

std::string kind_name(ColumnKind k) { return k == ColumnKind::numerical ? "numerical" : "categorical"; }

ColumnKind parse_kind(const std::string& s) {
  if (s == "numerical" || s == "num") return ColumnKind::numerical;
  if (s == "categorical" || s == "cat") return ColumnKind::categorical;
  throw SchemaError("unknown column kind '" + s + "' (expected numerical or categorical)");
}

void TabularSchema::validate() const {
  if (columns.empty()) throw SchemaError("schema has no columns");
  std::set<std::string> names;
  for (const auto& c : columns) {
    if (!names.insert(c.name).second) throw SchemaError("duplicate column name '" + c.name + "'");
    if (c.kind == ColumnKind::categorical) {
      std::set<std::string> seen(c.categories.begin(), c.categories.end());
      if (seen.size() != c.categories.size()) throw SchemaError("column '" + c.name + "' lists a category twice");
    } else if (!c.categories.empty()) {
      throw SchemaError("numerical column '" + c.name + "' has categories");
    }
  }
  if (!target.empty() && !names.count(target)) throw SchemaError("target column '" + target + "' not in schema");
}

std::vector<std::size_t> TabularSchema::numerical() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i].kind == ColumnKind::numerical) out.push_back(i);
  return out;
}

std::vector<std::size_t> TabularSchema::categorical() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i].kind == ColumnKind::categorical) out.push_back(i);
  return out;
}

std::size_t TabularSchema::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i].name == name) return i;
  throw SchemaError("no column named '" + name + "'");
}

Layout TabularSchema::layout() const {
  Layout L;
  L.cont_dim = numerical().size();
  for (std::size_t i : categorical()) L.num_categories.push_back(static_cast<int>(columns[i].categories.size()));
  return L;
}

json TabularSchema::to_json() const {
  json cols = json::array();
  for (const auto& c : columns) {
    json e{{"name", c.name}, {"kind", kind_name(c.kind)}};
    if (c.kind == ColumnKind::categorical) e["categories"] = c.categories;
    cols.push_back(e);
  }
  json j{{"columns", cols}};
  if (!target.empty()) j["target"] = target;
  return j;
}

TabularSchema TabularSchema::from_json(const json& j) {
  TabularSchema s;
  if (!j.is_object() || !j.contains("columns") || !j["columns"].is_array()) {
    throw SchemaError("schema JSON needs a \"columns\" array");
  }
  for (const auto& e : j["columns"]) {
    ColumnSpec c;
    c.name = e.at("name").get<std::string>();
    c.kind = parse_kind(e.value("kind", std::string("numerical")));
    if (e.contains("categories")) c.categories = e["categories"].get<std::vector<std::string>>();
    s.columns.push_back(std::move(c));
  }
  s.target = j.value("target", std::string());
  return s;
}

std::vector<std::string> schema_diff(const TabularSchema& expected, const TabularSchema& found) {
  std::vector<std::string> out;
  const std::size_t n = std::max(expected.columns.size(), found.columns.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= expected.columns.size()) {
      out.push_back("column " + std::to_string(i) + ": unexpected '" + found.columns[i].name + "'");
      continue;
    }
    if (i >= found.columns.size()) {
      out.push_back("column " + std::to_string(i) + ": missing '" + expected.columns[i].name + "'");
      continue;
    }
    const auto& e = expected.columns[i];
    const auto& f = found.columns[i];
    if (e.name != f.name) out.push_back("column " + std::to_string(i) + ": expected name '" + e.name + "', found '" + f.name + "'");
    if (e.kind != f.kind) {
      out.push_back("column '" + e.name + "': expected " + kind_name(e.kind) + ", found " + kind_name(f.kind));
    } else if (e.categories != f.categories) {
      out.push_back("column '" + e.name + "': expected " + std::to_string(e.categories.size()) + " categories, found " +
                    std::to_string(f.categories.size()) + " (or a different order)");
    }
  }
  if (expected.target != found.target) out.push_back("target: expected '" + expected.target + "', found '" + found.target + "'");
  return out;
}

namespace {

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r')) --e;
  if (b == e) return false;
  if (*b == '+') ++b;
  const auto r = std::from_chars(b, e, out);
  return r.ec == std::errc() && r.ptr == e && std::isfinite(out);
}

}  // namespace

std::vector<double> Dataset::numeric_column(std::size_t col) const {
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!parse_double(rows[i][col], out[i])) {
      throw CsvError("row " + std::to_string(i) + ", column '" + schema.columns[col].name + "': '" + rows[i][col] +
                     "' is not a number");
    }
  }
  return out;
}

std::vector<int> Dataset::category_codes(std::size_t col) const {
  std::map<std::string, int> idx;
  const auto& cats = schema.columns[col].categories;
  for (std::size_t k = 0; k < cats.size(); ++k) idx[cats[k]] = static_cast<int>(k);
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto it = idx.find(rows[i][col]);
    out[i] = it == idx.end() ? -1 : it->second;
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv_records(std::istream& in) {
  std::vector<std::vector<std::string>> recs;
  std::vector<std::string> rec;
  std::string cell;
  bool quoted = false, any = false, was_quoted = false;
  char ch;
  auto end_cell = [&]() {
    rec.push_back(cell);
    cell.clear();
    was_quoted = false;
  };
  auto end_record = [&]() {
    end_cell();
    if (!(rec.size() == 1 && rec[0].empty())) recs.push_back(rec);
    rec.clear();
    any = false;
  };
  while (in.get(ch)) {
    any = true;
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get(ch);
          cell.push_back('"');
        } else {
          quoted = false;
        }
      } else {
        cell.push_back(ch);
      }
      continue;
    }
    if (ch == '"' && cell.empty() && !was_quoted) {
      quoted = true;
      was_quoted = true;
    } else if (ch == ',') {
      end_cell();
    } else if (ch == '\n') {
      end_record();
    } else if (ch == '\r') {
      if (in.peek() == '\n') in.get(ch);
      end_record();
    } else {
      cell.push_back(ch);
    }
  }
  if (quoted) throw CsvError("unterminated quoted cell at end of input");
  if (any || !cell.empty() || !rec.empty()) end_record();
  return recs;
}

Dataset parse_csv(std::istream& in, const CsvOptions& opt, LoadReport* report) {
  const auto recs = read_csv_records(in);
  if (recs.empty()) throw CsvError("CSV has no header row");
  const auto& header = recs[0];
  Dataset ds;
  if (opt.schema) {
    ds.schema = *opt.schema;
    if (ds.schema.columns.size() != header.size()) {
      throw SchemaError("declared schema has " + std::to_string(ds.schema.columns.size()) + " columns, header has " +
                        std::to_string(header.size()));
    }
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (ds.schema.columns[j].name != header[j]) {
        throw SchemaError("column " + std::to_string(j) + ": schema declares '" + ds.schema.columns[j].name +
                          "', header has '" + header[j] + "'");
      }
    }
  } else {
    for (const auto& [name, kind] : opt.overrides) {
      if (std::find(header.begin(), header.end(), name) == header.end()) {
        throw SchemaError("override names unknown column '" + name + "'");
      }
    }
    for (std::size_t j = 0; j < header.size(); ++j) {
      ColumnSpec c;
      c.name = header[j];
      const auto it = opt.overrides.find(c.name);
      if (it != opt.overrides.end()) {
        c.kind = it->second;
      } else {
        bool numeric = recs.size() > 1;
        double v;
        for (std::size_t i = 1; i < recs.size() && numeric; ++i) {
          numeric = j < recs[i].size() && parse_double(recs[i][j], v);
        }
        c.kind = numeric ? ColumnKind::numerical : ColumnKind::categorical;
      }
      ds.schema.columns.push_back(std::move(c));
    }
  }
  if (!opt.target.empty()) ds.schema.target = opt.target;
  ds.schema.validate();

  const std::size_t m = header.size();
  const auto num = ds.schema.numerical();
  std::vector<std::size_t> bad;
  for (std::size_t i = 1; i < recs.size(); ++i) {
    if (recs[i].size() != m) {
      throw CsvError("line " + std::to_string(i + 1) + ": " + std::to_string(recs[i].size()) + " cells, expected " +
                     std::to_string(m));
    }
    bool ok = true;
    double v;
    for (std::size_t j : num) ok = ok && parse_double(recs[i][j], v);
    if (!ok) {
      bad.push_back(i + 1);
      continue;
    }
    ds.rows.push_back(recs[i]);
  }
  if (!bad.empty() && opt.strict) {
    std::ostringstream msg;
    msg << bad.size() << " row(s) with unparseable numerical cells at line(s)";
    for (std::size_t k = 0; k < std::min<std::size_t>(bad.size(), 10); ++k) msg << ' ' << bad[k];
    if (bad.size() > 10) msg << " ...";
    throw CsvError(msg.str());
  }
  if (report) report->rejected_lines = bad;
  // Fill missing inventories.
  for (std::size_t j : ds.schema.categorical()) {
    auto& cats = ds.schema.columns[j].categories;
    if (!cats.empty()) continue;
    std::set<std::string> seen;
    for (const auto& r : ds.rows) seen.insert(r[j]);
    cats.assign(seen.begin(), seen.end());
  }
  return ds;
}

Dataset load_csv(const std::string& path, const CsvOptions& opt, LoadReport* report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CsvError("cannot open '" + path + "'");
  return parse_csv(in, opt, report);
}

namespace {

void write_cell(std::ostream& out, const std::string& s) {
  const bool quote = s.find_first_of(",\"\r\n") != std::string::npos || (!s.empty() && s.front() == '"');
  if (!quote) {
    out << s;
    return;
  }
  out << '"';
  for (char c : s) {
    if (c == '"') out << '"';
    out << c;
  }
  out << '"';
}

void write_row(std::ostream& out, const std::vector<std::string>& cells) {
  for (std::size_t j = 0; j < cells.size(); ++j) {
    if (j) out << ',';
    write_cell(out, cells[j]);
  }
  out << '\n';
}

}  // namespace

void write_csv(std::ostream& out, const Dataset& data) {
  std::vector<std::string> header;
  for (const auto& c : data.schema.columns) header.push_back(c.name);
  write_row(out, header);
  for (const auto& r : data.rows) write_row(out, r);
}

void save_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CsvError("cannot write '" + path + "'");
  write_csv(out, data);
}

TabularSchema load_schema_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open schema sidecar '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw SchemaError("schema sidecar '" + path + "': " + e.what());
  }
  return TabularSchema::from_json(j);
}

std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string numeric_mode_name(NumericMode m) { return m == NumericMode::zscore ? "zscore" : "quantile"; }

NumericMode parse_numeric_mode(const std::string& s) {
  if (s == "zscore") return NumericMode::zscore;
  if (s == "quantile") return NumericMode::quantile;
  throw std::invalid_argument("unknown numeric mode '" + s + "' (expected zscore or quantile)");
}

Preprocessor Preprocessor::fit(const Dataset& data, NumericMode mode, bool allow_unknown) {
  Preprocessor p;
  p.schema_ = data.schema;
  p.mode_ = mode;
  p.allow_unknown_ = allow_unknown;
  for (std::size_t j : p.schema_.categorical()) {
    auto& cats = p.schema_.columns[j].categories;
    if (cats.empty()) {
      std::set<std::string> seen;
      for (const auto& r : data.rows) seen.insert(r[j]);
      cats.assign(seen.begin(), seen.end());
    }
    if (allow_unknown && std::find(cats.begin(), cats.end(), kUnknown) == cats.end()) cats.push_back(kUnknown);
    if (cats.empty()) throw SchemaError("categorical column '" + p.schema_.columns[j].name + "' has no categories");
    std::map<std::string, int> m;
    for (std::size_t k = 0; k < cats.size(); ++k) m[cats[k]] = static_cast<int>(k);
    p.codes_.push_back(std::move(m));
  }
  p.schema_.validate();
  for (std::size_t j : p.schema_.numerical()) {
    NumStats st;
    const auto v = data.numeric_column(j);
    if (!v.empty()) {
      st.mean = mean_of(v);
      const double var = v.size() > 1 ? variance_of(v) : 0.0;
      st.std = std::max(std::sqrt(var), 1e-8);
    }
    if (mode == NumericMode::quantile) {
      if (v.empty()) throw std::invalid_argument("quantile preprocessing needs data");
      std::vector<double> sorted = v;
      std::sort(sorted.begin(), sorted.end());
      const std::size_t n = sorted.size(), K = std::min<std::size_t>(n, 1000);
      // Knots span the sample from its minimum to its maximum.
      const double q_lo = 0.5 / static_cast<double>(n);
      for (std::size_t k = 0; k < K; ++k) {
        const double frac = K == 1 ? 0.5 : static_cast<double>(k) / static_cast<double>(K - 1);
        const double q = K == 1 ? 0.5 : q_lo + frac * (1.0 - 2.0 * q_lo);
        const double pos = q * static_cast<double>(n) - 0.5;
        const std::size_t lo = static_cast<std::size_t>(std::clamp(std::floor(pos), 0.0, static_cast<double>(n - 1)));
        const std::size_t hi = std::min(lo + 1, n - 1);
        const double w = std::clamp(pos - static_cast<double>(lo), 0.0, 1.0);
        const double x = sorted[lo] + w * (sorted[hi] - sorted[lo]);
        const double z = normal_quantile(q);
        if (!st.knots.empty() && x <= st.knots.back()) {
          // Ties: keep one knot at the mean score of the run.
          st.scores.back() = 0.5 * (st.scores.back() + z);
          continue;
        }
        st.knots.push_back(x);
        st.scores.push_back(z);
      }
    }
    p.stats_.push_back(std::move(st));
  }
  return p;
}

double Preprocessor::encode_value(const NumStats& st, double v) const {
  if (mode_ == NumericMode::zscore || st.knots.size() < 2) return (v - st.mean) / st.std;
  const auto& k = st.knots;
  const auto& s = st.scores;
  if (v <= k.front()) return s.front() + (v - k.front()) / st.std;
  if (v >= k.back()) return s.back() + (v - k.back()) / st.std;
  const std::size_t i = static_cast<std::size_t>(std::upper_bound(k.begin(), k.end(), v) - k.begin());
  const double w = (v - k[i - 1]) / (k[i] - k[i - 1]);
  return s[i - 1] + w * (s[i] - s[i - 1]);
}

double Preprocessor::decode_value(const NumStats& st, double z) const {
  if (mode_ == NumericMode::zscore || st.knots.size() < 2) return z * st.std + st.mean;
  const auto& k = st.knots;
  const auto& s = st.scores;
  if (z <= s.front()) return k.front() + (z - s.front()) * st.std;
  if (z >= s.back()) return k.back() + (z - s.back()) * st.std;
  const std::size_t i = static_cast<std::size_t>(std::upper_bound(s.begin(), s.end(), z) - s.begin());
  const double w = (z - s[i - 1]) / (s[i] - s[i - 1]);
  return k[i - 1] + w * (k[i] - k[i - 1]);
}

EncodedTable Preprocessor::apply(const Dataset& data) const {
  const auto diff = schema_diff(schema_, data.schema);
  // Inventories may legitimately differ (the data's own inference); names and kinds must not.
  if (data.schema.columns.size() != schema_.columns.size()) throw SchemaError("dataset does not match the fitted schema");
  for (std::size_t j = 0; j < schema_.columns.size(); ++j) {
    if (schema_.columns[j].name != data.schema.columns[j].name || schema_.columns[j].kind != data.schema.columns[j].kind) {
      throw SchemaError("dataset does not match the fitted schema: " + (diff.empty() ? std::string() : diff[0]));
    }
  }
  const auto num = schema_.numerical(), cat = schema_.categorical();
  EncodedTable e;
  e.n = data.size();
  e.x.resize(e.n * num.size());
  e.y.resize(e.n * cat.size());
  for (std::size_t a = 0; a < num.size(); ++a) {
    const auto v = data.numeric_column(num[a]);
    for (std::size_t i = 0; i < e.n; ++i) e.x[i * num.size() + a] = encode_value(stats_[a], v[i]);
  }
  for (std::size_t b = 0; b < cat.size(); ++b) {
    const auto& m = codes_[b];
    for (std::size_t i = 0; i < e.n; ++i) {
      const std::string& cell = data.rows[i][cat[b]];
      const auto it = m.find(cell);
      int code;
      if (it != m.end()) {
        code = it->second;
      } else if (allow_unknown_) {
        code = m.at(kUnknown);
      } else {
        throw SchemaError("column '" + schema_.columns[cat[b]].name + "': unseen category '" + cell + "' in row " +
                          std::to_string(i));
      }
      e.y[i * cat.size() + b] = code;
    }
  }
  return e;
}

Dataset Preprocessor::invert(const EncodedTable& e) const {
  const auto num = schema_.numerical(), cat = schema_.categorical();
  if (e.x.size() != e.n * num.size() || e.y.size() != e.n * cat.size()) throw ShapeError("encoded table shape mismatch");
  Dataset d;
  d.schema = schema_;
  d.rows.assign(e.n, std::vector<std::string>(schema_.columns.size()));
  for (std::size_t i = 0; i < e.n; ++i) {
    for (std::size_t a = 0; a < num.size(); ++a) {
      d.rows[i][num[a]] = format_number(decode_value(stats_[a], e.x[i * num.size() + a]));
    }
    for (std::size_t b = 0; b < cat.size(); ++b) {
      const int code = e.y[i * cat.size() + b];
      const auto& cats = schema_.columns[cat[b]].categories;
      if (code < 0 || static_cast<std::size_t>(code) >= cats.size()) {
        throw ContractError("code " + std::to_string(code) + " invalid for column '" + schema_.columns[cat[b]].name + "'");
      }
      d.rows[i][cat[b]] = cats[static_cast<std::size_t>(code)];
    }
  }
  return d;
}

json Preprocessor::to_json() const {
  json stats = json::array();
  for (const auto& s : stats_) stats.push_back({{"mean", s.mean}, {"std", s.std}, {"knots", s.knots}, {"scores", s.scores}});
  return {{"schema", schema_.to_json()},
          {"mode", numeric_mode_name(mode_)},
          {"allow_unknown", allow_unknown_},
          {"numeric", stats}};
}

Preprocessor Preprocessor::from_json(const json& j) {
  Preprocessor p;
  p.schema_ = TabularSchema::from_json(j.at("schema"));
  p.schema_.validate();
  p.mode_ = parse_numeric_mode(j.at("mode").get<std::string>());
  p.allow_unknown_ = j.at("allow_unknown").get<bool>();
  for (const auto& s : j.at("numeric")) {
    NumStats st;
    st.mean = s.at("mean").get<double>();
    st.std = s.at("std").get<double>();
    st.knots = s.at("knots").get<std::vector<double>>();
    st.scores = s.at("scores").get<std::vector<double>>();
    p.stats_.push_back(std::move(st));
  }
  if (p.stats_.size() != p.schema_.numerical().size()) throw SchemaError("preprocessor statistics do not match schema");
  for (std::size_t j2 : p.schema_.categorical()) {
    std::map<std::string, int> m;
    const auto& cats = p.schema_.columns[j2].categories;
    for (std::size_t k = 0; k < cats.size(); ++k) m[cats[k]] = static_cast<int>(k);
    p.codes_.push_back(std::move(m));
  }
  return p;
}

namespace {

void require_same_columns(const Dataset& real, const Dataset& synth) {
  const auto& a = real.schema.columns;
  const auto& b = synth.schema.columns;
  bool ok = a.size() == b.size();
  for (std::size_t j = 0; ok && j < a.size(); ++j) ok = a[j].name == b[j].name && a[j].kind == b[j].kind;
  if (!ok) {
    const auto d = schema_diff(real.schema, synth.schema);
    throw SchemaError("real and synthetic tables differ: " + (d.empty() ? std::string("columns") : d[0]));
  }
}

// Codes into the union of both inventories so TV sees every value.
std::pair<std::vector<int>, std::vector<int>> joint_codes(const Dataset& real, const Dataset& synth, std::size_t col,
                                                          std::size_t& levels) {
  std::map<std::string, int> idx;
  auto code = [&](const std::string& s) {
    const auto it = idx.find(s);
    if (it != idx.end()) return it->second;
    const int c = static_cast<int>(idx.size());
    idx.emplace(s, c);
    return c;
  };
  std::pair<std::vector<int>, std::vector<int>> out;
  for (const auto& r : real.rows) out.first.push_back(code(r[col]));
  for (const auto& r : synth.rows) out.second.push_back(code(r[col]));
  levels = idx.size();
  return out;
}

std::vector<double> freq(const std::vector<int>& codes, std::size_t levels) {
  std::vector<double> f(levels, 0.0);
  for (int c : codes) f[static_cast<std::size_t>(c)] += 1.0;
  return normalize(f);
}

std::vector<double> joint_freq(const std::vector<int>& a, std::size_t la, const std::vector<int>& b, std::size_t lb) {
  std::vector<double> f(la * lb, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) f[static_cast<std::size_t>(a[i]) * lb + static_cast<std::size_t>(b[i])] += 1.0;
  return normalize(f);
}

// Equal-frequency bin edges of the real column; interior edges only, deduplicated.
std::vector<double> bin_edges(std::vector<double> v, std::size_t bins) {
  std::sort(v.begin(), v.end());
  std::vector<double> edges;
  const std::size_t n = v.size();
  for (std::size_t k = 1; k < bins; ++k) {
    const double e = v[std::min(n - 1, k * n / bins)];
    if (edges.empty() || e > edges.back()) edges.push_back(e);
  }
  return edges;
}

std::vector<int> bucket(const std::vector<double>& v, const std::vector<double>& edges) {
  std::vector<int> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<int>(std::upper_bound(edges.begin(), edges.end(), v[i]) - edges.begin());
  }
  return out;
}

bool is_constant(const Dataset& d, std::size_t col) {
  for (std::size_t i = 1; i < d.rows.size(); ++i)
    if (d.rows[i][col] != d.rows[0][col]) return false;
  return true;
}

double safe_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  return variance_of(a) > 0.0 && variance_of(b) > 0.0 ? pearson(a, b) : 0.0;
}

}  // namespace

ShapeReport metric_shape(const Dataset& real, const Dataset& synth) {
  require_same_columns(real, synth);
  if (real.size() == 0 || synth.size() == 0) throw std::invalid_argument("shape metric needs non-empty tables");
  ShapeReport rep;
  double total = 0.0;
  for (std::size_t j = 0; j < real.schema.columns.size(); ++j) {
    double score;
    if (real.schema.columns[j].kind == ColumnKind::numerical) {
      score = 1.0 - ks_distance(real.numeric_column(j), synth.numeric_column(j));
    } else {
      std::size_t levels = 0;
      const auto [a, b] = joint_codes(real, synth, j, levels);
      score = 1.0 - total_variation(freq(a, levels), freq(b, levels));
    }
    rep.columns.push_back({real.schema.columns[j].name, score});
    total += score;
  }
  rep.score = 100.0 * total / static_cast<double>(rep.columns.size());
  return rep;
}

TrendReport metric_trend(const Dataset& real, const Dataset& synth, std::size_t bins) {
  require_same_columns(real, synth);
  const std::size_t m = real.schema.columns.size();
  if (m < 2) throw std::invalid_argument("trend metric needs at least two columns");
  if (real.size() == 0 || synth.size() == 0) throw std::invalid_argument("trend metric needs non-empty tables");
  if (bins < 2) throw std::invalid_argument("trend metric needs at least two bins");
  TrendReport rep;

  // Per column: codes for contingency use (categories or buckets).
  std::vector<std::vector<int>> rc(m), sc(m);
  std::vector<std::size_t> levels(m, 0);
  std::vector<std::vector<double>> rv(m), sv(m);
  for (std::size_t j = 0; j < m; ++j) {
    if (real.schema.columns[j].kind == ColumnKind::numerical) {
      rv[j] = real.numeric_column(j);
      sv[j] = synth.numeric_column(j);
      const auto edges = bin_edges(rv[j], bins);
      rc[j] = bucket(rv[j], edges);
      sc[j] = bucket(sv[j], edges);
      levels[j] = edges.size() + 1;
    } else {
      auto codes = joint_codes(real, synth, j, levels[j]);
      rc[j] = std::move(codes.first);
      sc[j] = std::move(codes.second);
    }
  }
  double total = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      const auto& ca = real.schema.columns[a];
      const auto& cb = real.schema.columns[b];
      if (is_constant(real, a) || is_constant(real, b)) {
        rep.skipped.push_back(ca.name + "/" + cb.name);
        continue;
      }
      PairScore ps{ca.name, cb.name, "", 0.0};
      if (ca.kind == ColumnKind::numerical && cb.kind == ColumnKind::numerical) {
        ps.kind = "pearson";
        ps.score = 1.0 - 0.5 * std::abs(pearson(rv[a], rv[b]) - safe_pearson(sv[a], sv[b]));
      } else {
        ps.kind = "contingency";
        ps.score = 1.0 - total_variation(joint_freq(rc[a], levels[a], rc[b], levels[b]),
                                         joint_freq(sc[a], levels[a], sc[b], levels[b]));
      }
      total += ps.score;
      rep.pairs.push_back(ps);
    }
  }
  rep.score = rep.pairs.empty() ? 100.0 : 100.0 * total / static_cast<double>(rep.pairs.size());
  return rep;
}

json metrics_json(const ShapeReport& shape, const TrendReport& trend) {
  json cols = json::object(), pairs = json::array();
  for (const auto& c : shape.columns) cols[c.column] = c.score;
  for (const auto& p : trend.pairs) pairs.push_back({{"a", p.a}, {"b", p.b}, {"kind", p.kind}, {"score", p.score}});
  return {{"shape", shape.score}, {"trend", trend.score}, {"shape_columns", cols}, {"trend_pairs", pairs},
          {"trend_skipped", trend.skipped}};
}

ScoreNetConfig tabular_net_config(const TabularSchema& schema, const TabularTrainOptions& opt) {
  const Layout L = schema.layout();
  ScoreNetConfig cfg = opt.arch == Arch::attn ? ScoreNetConfig::tabular_attn(L) : ScoreNetConfig::toy_mlp(L);
  cfg.hidden_dim = opt.hidden_dim;
  cfg.depth = opt.depth;
  cfg.time_embed_dim = opt.time_embed_dim;
  cfg.heads = opt.heads;
  cfg.token_embed_dim = opt.token_embed_dim;
  cfg.mlp_ratio = opt.mlp_ratio;
  cfg.validate();
  return cfg;
}

TabularModel train_tabular(const Dataset& data, const TabularTrainOptions& opt, TrainResult* result,
                           const TrainObserver& observer) {
  if (data.size() == 0) throw std::invalid_argument("training table is empty");
  TabularModel m;
  m.prep = Preprocessor::fit(data, opt.numeric_mode, opt.allow_unknown);
  m.net = tabular_net_config(m.prep.schema(), opt);
  m.sched = opt.sched;
  const EncodedTable enc = m.prep.apply(data);
  ScoreNet net(m.net, opt.init_seed, m.sched.cont);
  TrainResult tr = train_score_net(net, enc.x, enc.y, enc.n, m.sched, opt.train, observer);
  m.raw = net.params();
  m.ema = tr.ema;
  if (result) *result = std::move(tr);
  return m;
}

SamplerConfig tabular_sampler_defaults() {
  SamplerConfig c = SamplerConfig::unguided();
  c.integrator = Integrator::euler_maruyama;
  c.steps = 100;
  return c;
}

Dataset synthesize(const TabularModel& model, std::size_t n, const SamplerConfig& config, std::uint64_t seed,
                   bool use_ema) {
  const ScoreNet net(model.net, use_ema ? model.ema : model.raw, model.sched.cont);
  EncodedTable e;
  e.n = n;
  if (n > 0) {
    const SampleResult r = sample_joint(net, TimeCoupling::synchronous(), n, model.sched, config, seed);
    e.x = r.x;
    e.y = r.y;
  }
  return model.prep.invert(e);
}

Dataset planted_fixture(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.schema.columns = {{"a", ColumnKind::numerical, {}},
                      {"b", ColumnKind::numerical, {}},
                      {"c1", ColumnKind::categorical, {"p", "q", "r"}},
                      {"c2", ColumnKind::categorical, {"w", "x", "y", "z"}}};
  const std::vector<double> p1{0.5, 0.3, 0.2};
  const std::vector<std::vector<double>> p2{{0.7, 0.1, 0.1, 0.1}, {0.1, 0.6, 0.2, 0.1}, {0.05, 0.05, 0.3, 0.6}};
  const auto& c1s = d.schema.columns[2].categories;
  const auto& c2s = d.schema.columns[3].categories;
  const double rho = 0.7;
  d.rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z1 = rng.normal(), z2 = rng.normal();
    const double a = 10.0 + 2.0 * z1;
    const double b = -1.0 + 0.5 * (rho * z1 + std::sqrt(1.0 - rho * rho) * z2);
    const int c1 = sample_categorical(p1, rng);
    const int c2 = sample_categorical(p2[static_cast<std::size_t>(c1)], rng);
    d.rows.push_back({format_number(a), format_number(b), c1s[static_cast<std::size_t>(c1)],
                      c2s[static_cast<std::size_t>(c2)]});
  }
  return d;
}

}  // namespace mmdiff
