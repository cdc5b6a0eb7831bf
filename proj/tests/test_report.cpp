#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "nope/report.hpp"

using namespace nope;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "nope_report_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SimMatrix matrix_from(std::initializer_list<std::initializer_list<double>> rows) {
  SimMatrix c = SimMatrix::zeros(static_cast<int>(rows.size()));
  int i = 0;
  for (const auto& r : rows) {
    int j = 0;
    for (double v : r) c.at(i, j++) = v;
    ++i;
  }
  return c;
}

}  // namespace

TEST_SUITE("report") {
  TEST_CASE("two-column table") {
    ResultsTable t;
    t.rows.push_back({"Reversal (22) Init", {0.4712, 0.996}, {0.01, 0.002}});
    emit_table(t, scratch("t.csv"));
    CHECK(slurp(scratch("t.csv")) == "config,Embeddings,Layer 1\nReversal (22) Init,0.47,1.00\n");
  }

  TEST_CASE("full-precision companion round-trips") {
    ResultsTable t;
    t.rows.push_back({"a, quoted", {0.1, 0.123456789012345, 1.0}, {0.0, 0.3, 1.0 / 3.0}});
    t.rows.push_back({"b", {0.5, 0.25, 0.75}, {}});
    emit_table(t, scratch("r.csv"));
    CHECK(full_precision_path(scratch("r.csv")).filename() == "r_full.csv");
    const ResultsTable back = read_full_table(full_precision_path(scratch("r.csv")));
    REQUIRE(back.rows.size() == 2);
    CHECK(back.rows[0].label == "a, quoted");
    CHECK(back.rows[0].mean == t.rows[0].mean);
    CHECK(back.rows[0].std == t.rows[0].std);
    CHECK(back.rows[1].mean == t.rows[1].mean);
  }

  TEST_CASE("table validation") {
    ResultsTable empty;
    CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
    ResultsTable ragged;
    ragged.rows = {{"x", {0.1, 0.2}, {}}, {"y", {0.1}, {}}};
    CHECK_THROWS_AS(ragged.validate(), std::invalid_argument);
    ResultsTable out_of_range;
    out_of_range.rows = {{"x", {0.1, 1.2}, {}}};
    CHECK_THROWS_AS(emit_table(out_of_range, scratch("bad.csv")), std::invalid_argument);
    CHECK(layer_column_names(3) == std::vector<std::string>{"Embeddings", "Layer 1", "Layer 2"});
  }

  TEST_CASE("heatmap intensities") {
    SimMatrix id = SimMatrix::zeros(3);
    for (int i = 0; i < 3; ++i) id.at(i, i) = 1.0;
    const GrayImage a = heatmap_pixels(id);
    CHECK(a.width == 3);
    CHECK(a.height == 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) CHECK(a.at(i, j) == (i == j ? 0 : 255));

    SimMatrix ones = SimMatrix::zeros(4);
    for (double& v : ones.values) v = 1.0;
    for (auto px : heatmap_pixels(ones).pixels) CHECK(px == 128);

    const GrayImage b = heatmap_pixels(matrix_from({{1.0, 0.5, 0.0}, {0.5, 1.0, 0.5}, {0.0, 0.5, 1.0}}));
    CHECK(b.at(0, 0) < b.at(0, 1));
    CHECK(b.at(0, 1) < b.at(0, 2));
    CHECK(b.at(1, 0) == b.at(0, 1));
  }

  TEST_CASE("pgm round-trip and svg output") {
    const SimMatrix m = matrix_from({{1.0, 0.2}, {0.2, 1.0}});
    render_heatmap(m, scratch("h.pgm"));
    const GrayImage img = read_pgm(scratch("h.pgm"));
    CHECK(img.pixels == heatmap_pixels(m).pixels);
    CHECK(slurp(scratch("h.pgm")).rfind("P5", 0) == 0);
    CHECK_THROWS(read_pgm(scratch("missing.pgm")));

    render_heatmap_svg(m, 0.987, scratch("h.svg"));
    const std::string svg = slurp(scratch("h.svg"));
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("(0.99)") != std::string::npos);
  }

  TEST_CASE("matrix and histogram csv") {
    write_sim_matrix_csv(matrix_from({{1.0, 0.25}, {0.25, 1.0}}), scratch("m.csv"));
    CHECK(slurp(scratch("m.csv")) == "1,0.25\n0.25,1\n");
    const ScoreDistribution d = summarize_scores({0.01, 0.99, 0.98});
    write_score_histogram_csv(d, scratch("hist.csv"));
    std::ifstream in(scratch("hist.csv"));
    std::string header;
    std::getline(in, header);
    CHECK(header == "bin_left,bin_right,count");
    int rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    CHECK(rows == kHistogramBins);
    CHECK(format_fixed(0.126, 2) == "0.13");
    CHECK(format_fixed(0.5, 1) == "0.5");
    std::filesystem::remove_all(scratch("").parent_path());
  }
}
