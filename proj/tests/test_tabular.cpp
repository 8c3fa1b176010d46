#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mmdiff/rng.hpp"
#include "mmdiff/stats.hpp"
#include "mmdiff/tabular.hpp"

using namespace mmdiff;

namespace {

ColumnSpec num(const std::string& name) { return {name, ColumnKind::numerical, {}}; }
ColumnSpec cat(const std::string& name, std::vector<std::string> cats = {}) {
  return {name, ColumnKind::categorical, std::move(cats)};
}

Dataset make(std::vector<ColumnSpec> cols, std::vector<std::vector<std::string>> rows) {
  Dataset d;
  d.schema.columns = std::move(cols);
  d.rows = std::move(rows);
  return d;
}

Dataset numeric_table(const std::vector<std::vector<double>>& cols, const std::vector<std::string>& names) {
  Dataset d;
  for (const auto& n : names) d.schema.columns.push_back(num(n));
  d.rows.assign(cols[0].size(), std::vector<std::string>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < cols[j].size(); ++i) d.rows[i][j] = format_number(cols[j][i]);
  return d;
}

Dataset one_cat(const std::vector<std::string>& values) {
  Dataset d;
  d.schema.columns.push_back(cat("c", {"a", "b"}));
  for (const auto& v : values) d.rows.push_back({v});
  return d;
}

// One numerical column whose mean depends on a binary label.
Dataset two_column_fixture(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.schema.columns = {num("value"), cat("label", {"no", "yes"})};
  for (std::size_t i = 0; i < n; ++i) {
    const bool yes = rng.bernoulli(0.4);
    const double v = (yes ? 1.5 : -1.5) * 0.9 + 0.5 * 0.9 * rng.normal() + 3.0;
    d.rows.push_back({format_number(v), yes ? "yes" : "no"});
  }
  return d;
}

double column_mean(const Dataset& d, std::size_t col) { return mean_of(d.numeric_column(col)); }
double column_std(const Dataset& d, std::size_t col) { return std::sqrt(variance_of(d.numeric_column(col))); }

}  // namespace

TEST_CASE("schema validation and layout") {
  TabularSchema s;
  s.columns = {num("a"), cat("b", {"x", "y", "z"}), num("c")};
  CHECK_NOTHROW(s.validate());
  CHECK(s.numerical() == std::vector<std::size_t>{0, 2});
  CHECK(s.categorical() == std::vector<std::size_t>{1});
  const Layout L = s.layout();
  CHECK(L.cont_dim == 2);
  REQUIRE(L.num_categories.size() == 1);
  CHECK(L.num_categories[0] == 3);
  CHECK(L.mask_id(0) == 3);  // vocabulary of 4 with the mask

  auto dup = s;
  dup.columns[2].name = "a";
  CHECK_THROWS_AS(dup.validate(), SchemaError);
  auto repeated = s;
  repeated.columns[1].categories = {"x", "x"};
  CHECK_THROWS_AS(repeated.validate(), SchemaError);
  auto target = s;
  target.target = "nope";
  CHECK_THROWS_AS(target.validate(), SchemaError);
  target.target = "b";
  CHECK_NOTHROW(target.validate());

  CHECK(TabularSchema::from_json(target.to_json()) == target);
  CHECK(schema_diff(s, s).empty());
  auto other = s;
  other.columns[1].kind = ColumnKind::numerical;
  other.columns[1].categories.clear();
  const auto d = schema_diff(s, other);
  REQUIRE(d.size() == 1);
  CHECK(d[0].find("'b'") != std::string::npos);
}

TEST_CASE("csv schema inference") {
  std::istringstream in("price,colour\n1.5,red\n-2e3,blue\n0,red\n");
  const Dataset d = parse_csv(in);
  REQUIRE(d.schema.columns.size() == 2);
  CHECK(d.schema.columns[0].kind == ColumnKind::numerical);
  CHECK(d.schema.columns[1].kind == ColumnKind::categorical);
  CHECK(d.schema.columns[1].categories == std::vector<std::string>{"blue", "red"});
  CHECK(d.size() == 3);

  std::istringstream in2("zip,colour\n02139,red\n10001,blue\n");
  CsvOptions opt;
  opt.overrides["zip"] = ColumnKind::categorical;
  const Dataset d2 = parse_csv(in2, opt);
  CHECK(d2.schema.columns[0].kind == ColumnKind::categorical);
  CHECK(d2.rows[0][0] == "02139");

  std::istringstream in3("a,b\n1,2\n");
  CsvOptions bad;
  bad.overrides["c"] = ColumnKind::categorical;
  CHECK_THROWS_AS(parse_csv(in3, bad), SchemaError);
}

TEST_CASE("csv declared schema mismatch names the column") {
  TabularSchema s;
  s.columns = {num("price"), cat("color")};
  std::istringstream in("price,colour\n1,red\n");
  CsvOptions opt;
  opt.schema = &s;
  try {
    parse_csv(in, opt);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("color") != std::string::npos);
    CHECK(msg.find("colour") != std::string::npos);
  }
  TabularSchema short_schema;
  short_schema.columns = {num("price")};
  std::istringstream in2("price,colour\n1,red\n");
  opt.schema = &short_schema;
  CHECK_THROWS_AS(parse_csv(in2, opt), SchemaError);
}

TEST_CASE("csv rows with unparseable numerical cells") {
  TabularSchema s;
  s.columns = {num("x"), cat("c")};
  const std::string text = "x,c\n1,a\noops,b\n3,a\n,b\n";
  CsvOptions opt;
  opt.schema = &s;
  LoadReport rep;
  std::istringstream in(text);
  const Dataset d = parse_csv(in, opt, &rep);
  CHECK(d.size() == 2);
  CHECK(rep.rejected_lines == std::vector<std::size_t>{3, 5});
  CHECK(d.schema.columns[1].categories == std::vector<std::string>{"a"});

  opt.strict = true;
  std::istringstream in2(text);
  try {
    parse_csv(in2, opt);
    FAIL("expected a csv error");
  } catch (const CsvError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("3") != std::string::npos);
    CHECK(msg.find("5") != std::string::npos);
  }

  std::istringstream ragged("a,b\n1,2\n3\n");
  CHECK_THROWS_AS(parse_csv(ragged), CsvError);
  std::istringstream empty("");
  CHECK_THROWS_AS(parse_csv(empty), CsvError);
  CHECK_THROWS_AS(load_csv("/nonexistent/file.csv"), CsvError);
}

TEST_CASE("csv quoting and categorical round trip") {
  const std::string text =
      "id,note,v\r\n"
      "a,\"hello, world\",1\r\n"
      "b,\"say \"\"hi\"\"\",2\r\n"
      "c,\"two\nlines\",3\r\n"
      "d,  padded ,4\r\n"
      "e,,5\r\n";
  std::istringstream in(text);
  const Dataset d = parse_csv(in);
  REQUIRE(d.size() == 5);
  CHECK(d.rows[0][1] == "hello, world");
  CHECK(d.rows[1][1] == "say \"hi\"");
  CHECK(d.rows[2][1] == "two\nlines");
  CHECK(d.rows[3][1] == "  padded ");
  CHECK(d.rows[4][1] == "");

  std::ostringstream out;
  write_csv(out, d);
  std::istringstream back(out.str());
  const Dataset d2 = parse_csv(back);
  CHECK(d2.schema == d.schema);
  CHECK(d2.rows == d.rows);
}

TEST_CASE("schema sidecar") {
  const std::string path = "test_tabular_sidecar.json";
  {
    std::ofstream f(path);
    f << R"({"columns": [{"name": "age", "kind": "numerical"},
                        {"name": "job", "kind": "categorical", "categories": ["a", "b"]}],
             "target": "job"})";
  }
  const TabularSchema s = load_schema_sidecar(path);
  CHECK(s.columns.size() == 2);
  CHECK(s.columns[1].categories == std::vector<std::string>{"a", "b"});
  CHECK(s.target == "job");
  {
    std::ofstream f(path);
    f << "{ not json";
  }
  CHECK_THROWS_AS(load_schema_sidecar(path), SchemaError);
  {
    std::ofstream f(path);
    f << R"({"columns": [{"name": "age", "kind": "ordinal"}]})";
  }
  CHECK_THROWS_AS(load_schema_sidecar(path), SchemaError);
  std::remove(path.c_str());
}

TEST_CASE("preprocessor z-score round trip on 1000 random rows") {
  Rng rng(3);
  Dataset d;
  d.schema.columns = {num("a"), cat("b", {}), num("c")};
  const char* cats[] = {"red", "green", "blue", "x,y"};
  for (int i = 0; i < 1000; ++i) {
    d.rows.push_back({format_number(1e4 * rng.normal() + 3.0), cats[rng.below(4)],
                      format_number(std::exp(rng.normal()) * 1e-3)});
  }
  const Preprocessor p = Preprocessor::fit(d);
  CHECK(p.schema().columns[1].categories.size() == 4);
  const EncodedTable e = p.apply(d);
  CHECK(e.n == 1000);
  CHECK(std::abs(mean_of([&] {
          std::vector<double> v;
          for (std::size_t i = 0; i < e.n; ++i) v.push_back(e.x[i * 2]);
          return v;
        }())) < 1e-9);
  const Dataset back = p.invert(e);
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK(back.rows[i][1] == d.rows[i][1]);
    for (std::size_t j : {0u, 2u}) {
      const double a = std::stod(d.rows[i][j]), b = std::stod(back.rows[i][j]);
      CHECK(std::abs(a - b) <= 1e-9 * std::abs(a));
    }
  }
  // Serialized form reproduces the encoding.
  const Preprocessor q = Preprocessor::from_json(p.to_json());
  const EncodedTable e2 = q.apply(d);
  CHECK(e2.x == e.x);
  CHECK(e2.y == e.y);
}

TEST_CASE("preprocessor degenerate and unknown categories") {
  const Dataset d = make({num("k"), cat("c")}, {{"5", "a"}, {"5", "b"}, {"5", "a"}});
  const Preprocessor p = Preprocessor::fit(d);
  const EncodedTable e = p.apply(d);
  for (std::size_t i = 0; i < 3; ++i) CHECK(e.x[i] == 0.0);
  CHECK(p.invert(e).rows[0][0] == "5");

  const Dataset unseen = make({num("k"), cat("c")}, {{"5", "zzz"}});
  CHECK_THROWS_AS(p.apply(unseen), SchemaError);
  const Preprocessor pu = Preprocessor::fit(d, NumericMode::zscore, true);
  CHECK(pu.schema().columns[1].categories.back() == Preprocessor::kUnknown);
  const EncodedTable eu = pu.apply(unseen);
  CHECK(eu.y[0] == 2);
  CHECK(pu.invert(eu).rows[0][1] == Preprocessor::kUnknown);

  const Dataset renamed = make({num("kk"), cat("c")}, {{"5", "a"}});
  CHECK_THROWS_AS(p.apply(renamed), SchemaError);
  EncodedTable bad = e;
  bad.y[0] = 7;
  CHECK_THROWS_AS(p.invert(bad), ContractError);
}

TEST_CASE("quantile mode maps the median to about zero") {
  Rng rng(11);
  std::vector<double> v;
  for (int i = 0; i < 5001; ++i) v.push_back(std::exp(rng.normal()));  // skewed
  const Dataset d = numeric_table({v}, {"x"});
  const Preprocessor p = Preprocessor::fit(d, NumericMode::quantile);
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  const Dataset med = numeric_table({{sorted[2500]}}, {"x"});
  CHECK(std::abs(p.apply(med).x[0]) < 0.01);

  const EncodedTable e = p.apply(d);
  CHECK(std::abs(mean_of(e.x)) < 0.05);
  CHECK(std::abs(variance_of(e.x) - 1.0) < 0.05);
  const Dataset back = p.invert(e);
  for (std::size_t i = 0; i < v.size(); i += 97) CHECK(std::stod(back.rows[i][0]) == doctest::Approx(v[i]).epsilon(1e-9));
  // Monotone, including beyond the table.
  const Dataset probe = numeric_table({{-5.0, 0.0, sorted.front(), 1.0, sorted.back(), 1e3}}, {"x"});
  const auto z = p.apply(probe).x;
  for (std::size_t i = 1; i < z.size(); ++i) CHECK(z[i] > z[i - 1]);
  CHECK(Preprocessor::from_json(p.to_json()).apply(probe).x == z);
}

TEST_CASE("shape metric") {
  Rng rng(5);
  std::vector<double> a, b;
  for (int i = 0; i < 2000; ++i) a.push_back(rng.normal());
  const Dataset real = numeric_table({a}, {"x"});
  CHECK(metric_shape(real, real).score == doctest::Approx(100.0));

  // TV arithmetic: [0.5, 0.5] vs [0.6, 0.4].
  std::vector<std::string> r, s;
  for (int i = 0; i < 10; ++i) r.push_back(i < 5 ? "a" : "b");
  for (int i = 0; i < 10; ++i) s.push_back(i < 6 ? "a" : "b");
  CHECK(metric_shape(one_cat(r), one_cat(s)).score == doctest::Approx(90.0).epsilon(1e-12));

  // Shifted normals: KS = 2 Phi(0.25) - 1.
  a.clear();
  for (int i = 0; i < 100000; ++i) a.push_back(rng.normal());
  for (int i = 0; i < 100000; ++i) b.push_back(0.5 + rng.normal());
  const double ks = 2.0 * normal_cdf(0.25) - 1.0;
  CHECK(ks == doctest::Approx(0.1974).epsilon(1e-3));
  const ShapeReport sh = metric_shape(numeric_table({a}, {"x"}), numeric_table({b}, {"x"}));
  CHECK(std::abs(sh.score - 100.0 * (1.0 - ks)) < 1.0);
  CHECK(std::abs(sh.score - 80.3) < 1.0);

  // A category only the synthetic table has still counts: 0.9 a / 0.1 c.
  std::vector<std::string> odd(10, "a");
  odd[0] = "c";
  const Dataset syn = one_cat(odd);
  CHECK(metric_shape(one_cat(r), syn).score == doctest::Approx(50.0));

  CHECK_THROWS_AS(metric_shape(real, one_cat(r)), SchemaError);
}

TEST_CASE("trend metric") {
  Rng rng(6);
  std::vector<double> x, noise, y;
  for (int i = 0; i < 5000; ++i) {
    x.push_back(rng.normal());
    noise.push_back(rng.normal());
  }
  const Dataset perfect = numeric_table({x, x}, {"a", "b"});
  const Dataset indep = numeric_table({x, noise}, {"a", "b"});
  CHECK(metric_trend(perfect, perfect).score == doctest::Approx(100.0));
  const TrendReport t = metric_trend(indep, perfect);
  REQUIRE(t.pairs.size() == 1);
  CHECK(t.pairs[0].kind == "pearson");
  const double rho = pearson(x, noise);
  CHECK(t.score == doctest::Approx(100.0 * (1.0 - 0.5 * (1.0 - rho))).epsilon(1e-10));
  CHECK(std::abs(t.score - 50.0) < 2.0);

  // Contingency arithmetic on a cat-cat pair.
  const Dataset cc = make({cat("p", {"0", "1"}), cat("q", {"0", "1"})}, {{"0", "0"}, {"1", "1"}, {"0", "0"}, {"1", "1"}});
  const Dataset cc2 = make({cat("p", {"0", "1"}), cat("q", {"0", "1"})}, {{"0", "1"}, {"1", "1"}, {"0", "0"}, {"1", "1"}});
  const TrendReport tc = metric_trend(cc, cc2);
  CHECK(tc.pairs[0].kind == "contingency");
  CHECK(tc.score == doctest::Approx(75.0));

  // Constant column: pairs skipped and reported, score stays defined.
  Dataset withc = make({num("a"), num("b"), num("k")}, {});
  for (std::size_t i = 0; i < x.size(); ++i) withc.rows.push_back({perfect.rows[i][0], indep.rows[i][1], "1"});
  const TrendReport tk = metric_trend(withc, withc);
  CHECK(tk.pairs.size() == 1);
  CHECK(tk.skipped.size() == 2);
  CHECK(std::isfinite(tk.score));
  CHECK(tk.score == doctest::Approx(100.0));

  Dataset single = numeric_table({x}, {"a"});
  CHECK_THROWS(metric_trend(single, single));
  const auto j = metrics_json(metric_shape(indep, perfect), t);
  CHECK(j.contains("shape"));
  CHECK(j["trend_pairs"].size() == 1);
}

TEST_CASE("mixed trend pairs use equal-frequency buckets of the real data") {
  Rng rng(8);
  Dataset real = make({num("v"), cat("c", {"lo", "hi"})}, {});
  for (int i = 0; i < 4000; ++i) {
    const double v = rng.normal();
    real.rows.push_back({format_number(v), v > 0 ? "hi" : "lo"});
  }
  CHECK(metric_trend(real, real).score == doctest::Approx(100.0));
  // Monotone transform of the numerical column changes buckets but not
  // within-table order; against real buckets it must score lower.
  Dataset shifted = real;
  for (auto& r : shifted.rows) r[0] = format_number(std::stod(r[0]) + 1.0);
  const double s = metric_trend(real, shifted).score;
  CHECK(s < 90.0);
  CHECK(s >= 0.0);
  // Swapping the label association destroys the dependence.
  Dataset swapped = real;
  for (auto& r : swapped.rows) r[1] = r[1] == "hi" ? "lo" : "hi";
  CHECK(metric_trend(real, swapped).score < 5.0);
}

TEST_CASE("scores stay in [0, 100]") {
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    Dataset a = make({num("x"), num("y"), cat("c", {"a", "b", "c"})}, {});
    Dataset b = a;
    const double shift = rng.normal() * 3.0;
    for (int i = 0; i < 200; ++i) {
      const char* cs[] = {"a", "b", "c"};
      a.rows.push_back({format_number(rng.normal()), format_number(rng.normal()), cs[rng.below(3)]});
      const double u = rng.normal() + shift;
      b.rows.push_back({format_number(u), format_number(-u), cs[rng.below(2)]});
    }
    const double sh = metric_shape(a, b).score, tr = metric_trend(a, b).score;
    CHECK(sh >= 0.0);
    CHECK(sh <= 100.0);
    CHECK(tr >= 0.0);
    CHECK(tr <= 100.0);
  }
}

TEST_CASE("warmup learning rate") {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup = 200;
  CHECK(warmup_lr(cfg, 100) == doctest::Approx(0.5e-3).epsilon(1e-15));
  CHECK(warmup_lr(cfg, 200) == doctest::Approx(1e-3));
  CHECK(warmup_lr(cfg, 5000) == doctest::Approx(1e-3));
}

namespace {

TabularTrainOptions smoke_options() {
  TabularTrainOptions opt;
  opt.hidden_dim = 64;
  opt.depth = 3;
  opt.time_embed_dim = 16;
  opt.train.steps = 2000;
  opt.train.batch = 256;
  opt.train.warmup = 200;
  opt.train.ema_decay = 0.999;
  opt.train.seed = 4;
  return opt;
}

struct Smoke {
  Dataset data;
  TabularModel model;
  TrainResult result;
};

const Smoke& smoke() {
  static const Smoke s = [] {
    Smoke r;
    r.data = two_column_fixture(4000, 21);
    r.model = train_tabular(r.data, smoke_options(), &r.result);
    return r;
  }();
  return s;
}

}  // namespace

TEST_CASE("tabular training smoke: EMA loss at least halves the untrained loss") {
  const Smoke& s = smoke();
  CHECK(s.result.curve.size() == 2000);
  CHECK(s.result.rejected == 0);
  const EncodedTable enc = s.model.prep.apply(s.data);
  const ScoreNet untrained(s.model.net, smoke_options().init_seed, s.model.sched.cont);
  const ScoreNet ema(s.model.net, s.model.ema, s.model.sched.cont);
  // Common random numbers for both evaluations.
  const std::size_t n = 20000;
  std::vector<double> x;
  std::vector<int> y;
  Rng pick(77);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = pick.below(enc.n);
    x.push_back(enc.x[r]);
    y.push_back(enc.y[r]);
  }
  Rng r1(99), r2(99);
  const double base = gdsm_loss(untrained, x, y, n, s.model.sched, 1.0, TimeDraw{}, r1);
  const double trained = gdsm_loss(ema, x, y, n, s.model.sched, 1.0, TimeDraw{}, r2);
  MESSAGE("untrained " << base << ", EMA " << trained);
  CHECK(trained <= 0.5 * base);
}

TEST_CASE("tabular synthesis") {
  const Smoke& s = smoke();
  SamplerConfig cfg = tabular_sampler_defaults();
  const Dataset empty = synthesize(s.model, 0, cfg, 1);
  CHECK(empty.size() == 0);
  CHECK(empty.schema == s.model.prep.schema());
  std::ostringstream header;
  write_csv(header, empty);
  CHECK(header.str() == "value,label\n");

  const Dataset out = synthesize(s.model, 4000, cfg, 2);
  REQUIRE(out.size() == 4000);
  for (const auto& r : out.rows) CHECK((r[1] == "yes" || r[1] == "no"));
  const double dm = column_mean(s.data, 0), ds = column_std(s.data, 0);
  const double om = column_mean(out, 0), os = column_std(out, 0);
  MESSAGE("data mean " << dm << " std " << ds << "; synth mean " << om << " std " << os);
  CHECK(std::abs(om - dm) <= 0.1);
  CHECK(std::abs(os - ds) <= 0.1);
  // Same seed, same table.
  CHECK(synthesize(s.model, 300, cfg, 5).rows == synthesize(s.model, 300, cfg, 5).rows);
}

TEST_CASE("tabular training is deterministic under a fixed seed") {
  auto opt = smoke_options();
  opt.train.steps = 60;
  const Dataset d = two_column_fixture(500, 3);
  TrainResult a, b;
  train_tabular(d, opt, &a);
  train_tabular(d, opt, &b);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);
  opt.train.seed = 5;
  TrainResult c;
  train_tabular(d, opt, &c);
  CHECK(c.curve.back().loss != a.curve.back().loss);
  CHECK_THROWS(train_tabular(Dataset{d.schema, {}}, opt));
}

TEST_CASE("planted fixture") {
  const Dataset d = planted_fixture(20000, 3);
  REQUIRE(d.rows.size() == 20000);
  CHECK_NOTHROW(d.schema.validate());
  const auto a = d.numeric_column(0), b = d.numeric_column(1);
  CHECK(mean_of(a) == doctest::Approx(10.0).epsilon(0.01));
  CHECK(std::sqrt(variance_of(b)) == doctest::Approx(0.5).epsilon(0.03));
  CHECK(pearson(a, b) == doctest::Approx(0.7).epsilon(0.02));
  const auto c1 = d.category_codes(2), c2 = d.category_codes(3);
  double q = 0.0, rz = 0.0, r = 0.0;
  for (std::size_t i = 0; i < c1.size(); ++i) {
    q += c1[i] == 1;
    r += c1[i] == 2;
    rz += c1[i] == 2 && c2[i] == 3;
  }
  CHECK(q / 20000.0 == doctest::Approx(0.3).epsilon(0.05));
  CHECK(rz / r == doctest::Approx(0.6).epsilon(0.05));
  const Dataset again = planted_fixture(20000, 3);
  CHECK(again.rows == d.rows);
}
