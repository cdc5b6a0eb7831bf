#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nope/analysis.hpp"

namespace nope {

struct ResultsRow {
  std::string label;
  std::vector<double> mean;  // Embeddings, Layer 1 .. Layer L
  std::vector<double> std;   // same length as mean, or empty
};

struct ResultsTable {
  std::vector<ResultsRow> rows;

  int n_columns() const;
  /// Throws std::invalid_argument on an empty table, ragged rows or a score outside [0, 1].
  void validate() const;
};

std::vector<std::string> layer_column_names(int n_columns);

/// Writes `path` with 2-decimal values and `<stem>_full.csv` next to it
/// with every mean and std at round-trip precision.
void emit_table(const ResultsTable& table, const std::filesystem::path& path);
std::filesystem::path full_precision_path(const std::filesystem::path& path);
/// Parses a full-precision companion file written by emit_table.
ResultsTable read_full_table(const std::filesystem::path& path);

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};

/// 0 (black) for the largest entry, 255 for the smallest; a constant matrix maps to 128.
GrayImage heatmap_pixels(const SimMatrix& c);

void write_pgm(const GrayImage& img, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

/// PGM (P5) with one pixel per matrix entry.
void render_heatmap(const SimMatrix& c, const std::filesystem::path& path);
/// SVG with `cell`-pixel squares and the adjacency score in the title bar.
void render_heatmap_svg(const SimMatrix& c, double score, const std::filesystem::path& path, int cell = 12);

void write_sim_matrix_csv(const SimMatrix& c, const std::filesystem::path& path);
void write_score_histogram_csv(const ScoreDistribution& d, const std::filesystem::path& path);

std::string format_fixed(double v, int decimals);

}  // namespace nope
