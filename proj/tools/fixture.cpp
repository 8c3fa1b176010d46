// Writes the planted four-column table as CSV.
#include <iostream>

#include "CLI11.hpp"
#include "mmdiff/tabular.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write the planted four-column fixture (a, b, c1, c2) as CSV", "mmdiff-fixture"};
  std::size_t rows = 20000;
  std::uint64_t seed = 1;
  std::string path;
  app.add_option("-n,--rows", rows, "Rows")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "Seed");
  app.add_option("-o,--output", path, "CSV path (default: stdout)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    const mmdiff::Dataset d = mmdiff::planted_fixture(rows, seed);
    if (path.empty()) {
      mmdiff::write_csv(std::cout, d);
    } else {
      mmdiff::save_csv(path, d);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
