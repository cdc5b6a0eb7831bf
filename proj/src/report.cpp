#include "nope/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace nope {

int ResultsTable::n_columns() const { return rows.empty() ? 0 : static_cast<int>(rows.front().mean.size()); }

void ResultsTable::validate() const {
  if (rows.empty()) throw std::invalid_argument("results table has no rows");
  const std::size_t width = rows.front().mean.size();
  if (width == 0) throw std::invalid_argument("results table rows have no scores");
  for (const auto& r : rows) {
    if (r.mean.size() != width) throw std::invalid_argument("results row '" + r.label + "' has a different column count");
    if (!r.std.empty() && r.std.size() != width) {
      throw std::invalid_argument("results row '" + r.label + "' has mismatched std column count");
    }
    for (double v : r.mean) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("score outside [0, 1] in row '" + r.label + "'");
    }
  }
}

std::vector<std::string> layer_column_names(int n_columns) {
  std::vector<std::string> out;
  for (int i = 0; i < n_columns; ++i) out.push_back(i == 0 ? "Embeddings" : "Layer " + std::to_string(i));
  return out;
}

std::string format_fixed(double v, int decimals) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(decimals) << v;
  return s.str();
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

std::filesystem::path full_precision_path(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  p.replace_filename(path.stem().string() + "_full" + path.extension().string());
  return p;
}

void emit_table(const ResultsTable& table, const std::filesystem::path& path) {
  table.validate();
  const auto names = layer_column_names(table.n_columns());
  {
    auto out = open_out(path);
    out << "config";
    for (const auto& n : names) out << ',' << n;
    out << '\n';
    for (const auto& r : table.rows) {
      out << csv_field(r.label);
      for (double v : r.mean) out << ',' << format_fixed(v, 2);
      out << '\n';
    }
  }
  auto out = open_out(full_precision_path(path));
  out << "config";
  for (const auto& n : names) out << ',' << n << ',' << n << " std";
  out << '\n' << std::setprecision(17);
  for (const auto& r : table.rows) {
    out << csv_field(r.label);
    for (std::size_t i = 0; i < r.mean.size(); ++i) out << ',' << r.mean[i] << ',' << (r.std.empty() ? 0.0 : r.std[i]);
    out << '\n';
  }
}

ResultsTable read_full_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + " is empty");
  const std::size_t header_fields = split_csv_line(line).size();
  if (header_fields < 3 || (header_fields - 1) % 2 != 0) throw std::runtime_error(path.string() + " has a malformed header");
  ResultsTable t;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header_fields) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(header_fields) + " fields");
    }
    ResultsRow r;
    r.label = f[0];
    for (std::size_t i = 1; i < f.size(); i += 2) {
      r.mean.push_back(std::stod(f[i]));
      r.std.push_back(std::stod(f[i + 1]));
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

GrayImage heatmap_pixels(const SimMatrix& c) {
  if (c.n < 2) throw std::invalid_argument("heatmap needs n >= 2");
  const auto [lo_it, hi_it] = std::minmax_element(c.values.begin(), c.values.end());
  const double lo = *lo_it, hi = *hi_it;
  GrayImage img{c.n, c.n, std::vector<std::uint8_t>(c.values.size())};
  for (std::size_t i = 0; i < c.values.size(); ++i) {
    if (hi == lo) {
      img.pixels[i] = 128;
      continue;
    }
    const double t = (c.values[i] - lo) / (hi - lo);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)));
  }
  return img;
}

void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  GrayImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || img.width <= 0 || img.height <= 0 || maxval != 255) {
    throw std::runtime_error(path.string() + " is not an 8-bit P5 image");
  }
  in.get();
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw std::runtime_error(path.string() + " is truncated");
  return img;
}

void render_heatmap(const SimMatrix& c, const std::filesystem::path& path) { write_pgm(heatmap_pixels(c), path); }

void render_heatmap_svg(const SimMatrix& c, double score, const std::filesystem::path& path, int cell) {
  if (cell < 1) throw std::invalid_argument("heatmap cell size must be >= 1");
  const GrayImage img = heatmap_pixels(c);
  const int header = 20;
  const int side = c.n * cell;
  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << side << "\" height=\"" << side + header << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << side / 2 << "\" y=\"15\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">("
      << format_fixed(score, 2) << ")</text>\n";
  for (int r = 0; r < c.n; ++r) {
    for (int col = 0; col < c.n; ++col) {
      const int g = img.at(r, col);
      out << "<rect x=\"" << col * cell << "\" y=\"" << header + r * cell << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"rgb(" << g << ',' << g << ',' << g << ")\"/>\n";
    }
  }
  out << "</svg>\n";
}

void write_sim_matrix_csv(const SimMatrix& c, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << std::setprecision(17);
  for (int r = 0; r < c.n; ++r) {
    for (int col = 0; col < c.n; ++col) out << (col ? "," : "") << c.at(r, col);
    out << '\n';
  }
}

void write_score_histogram_csv(const ScoreDistribution& d, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "bin_left,bin_right,count\n";
  const int bins = static_cast<int>(d.histogram.size());
  for (int i = 0; i < bins; ++i) {
    out << format_fixed(static_cast<double>(i) / bins, 2) << ',' << format_fixed(static_cast<double>(i + 1) / bins, 2) << ','
        << d.histogram[static_cast<std::size_t>(i)] << '\n';
  }
}

}  // namespace nope
