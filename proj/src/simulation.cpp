#include "nope/simulation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "nope/tasks.hpp"

namespace nope {

void SimulationSpec::validate() const {
  if (trials < 1) throw std::invalid_argument("simulation trials must be >= 1");
  if (dim < 2) throw std::invalid_argument("simulation dim must be >= 2");
  if (sigmas.empty()) throw std::invalid_argument("simulation needs at least one sigma");
  for (double s : sigmas) {
    if (!(s > 0.0)) throw std::invalid_argument("simulation sigmas must be > 0");
  }
  if (!(coeff_scale > 0.0)) throw std::invalid_argument("coeff_scale must be > 0");
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

GapSummary summarize_gaps(const std::vector<double>& gaps) {
  GapSummary s;
  if (gaps.empty()) return s;
  const double n = static_cast<double>(gaps.size());
  s.mean = std::accumulate(gaps.begin(), gaps.end(), 0.0) / n;
  double ss = 0.0;
  std::size_t pos = 0;
  for (double g : gaps) {
    ss += (g - s.mean) * (g - s.mean);
    pos += g > 0.0 ? 1 : 0;
  }
  s.std = std::sqrt(ss / n);
  s.frac_positive = static_cast<double>(pos) / n;
  return s;
}

GapHistograms run_coefficient_simulation(const SimulationSpec& spec) {
  spec.validate();
  constexpr int kVectors = 6;
  const std::size_t dim = static_cast<std::size_t>(spec.dim);
  GapHistograms out;
  out.per_sigma.resize(spec.sigmas.size());
  for (std::size_t s = 0; s < spec.sigmas.size(); ++s) {
    out.per_sigma[s].sigma = spec.sigmas[s];
    out.per_sigma[s].ab_minus_ac.reserve(static_cast<std::size_t>(spec.trials));
    out.per_sigma[s].cb_minus_ca.reserve(static_cast<std::size_t>(spec.trials));
  }

  std::vector<std::vector<double>> v(kVectors, std::vector<double>(dim));
  std::array<double, 4> za{};
  std::array<double, 5> zb{};
  std::array<double, 6> zc{};
  std::vector<double> a(dim), b(dim), c(dim);
  for (int trial = 0; trial < spec.trials; ++trial) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(trial)));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& vec : v)
      for (auto& x : vec) x = normal(rng);
    for (auto& z : za) z = normal(rng);
    for (auto& z : zb) z = normal(rng);
    for (auto& z : zc) z = normal(rng);

    for (std::size_t s = 0; s < spec.sigmas.size(); ++s) {
      const double sigma = spec.sigmas[s];
      auto combine = [&](std::vector<double>& dst, const auto& z) {
        std::fill(dst.begin(), dst.end(), 0.0);
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double coeff = spec.coeff_scale * (spec.coeff_mean + sigma * z[i]);
          for (std::size_t j = 0; j < dim; ++j) dst[j] += coeff * v[i][j];
        }
      };
      combine(a, za);
      combine(b, zb);
      combine(c, zc);
      SigmaGaps& g = out.per_sigma[s];
      g.ab_minus_ac.push_back(cosine(a, b) - cosine(a, c));
      g.cb_minus_ca.push_back(cosine(c, b) - cosine(c, a));
    }
  }
  for (auto& g : out.per_sigma) {
    g.ab_ac = summarize_gaps(g.ab_minus_ac);
    g.cb_ca = summarize_gaps(g.cb_minus_ca);
  }
  return out;
}

std::vector<HistogramBin> histogram(const std::vector<double>& values, int bins) {
  if (bins < 1) throw std::invalid_argument("histogram needs at least one bin");
  std::vector<HistogramBin> out(static_cast<std::size_t>(bins));
  if (values.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  double lo = *lo_it, hi = *hi_it;
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / bins;
  for (int i = 0; i < bins; ++i) {
    out[static_cast<std::size_t>(i)].left = lo + width * i;
    out[static_cast<std::size_t>(i)].right = i == bins - 1 ? hi : lo + width * (i + 1);
  }
  for (double x : values) {
    int idx = static_cast<int>((x - lo) / width);
    out[static_cast<std::size_t>(std::clamp(idx, 0, bins - 1))].count++;
  }
  return out;
}

void write_simulation_csvs(const GapHistograms& h, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream summary(dir / "simulation_summary.csv");
  if (!summary) throw std::runtime_error("cannot write simulation summary in " + dir.string());
  summary << "sigma,gap,mean,std,frac_positive\n" << std::setprecision(9);
  for (const auto& g : h.per_sigma) {
    summary << g.sigma << ",ab_minus_ac," << g.ab_ac.mean << ',' << g.ab_ac.std << ',' << g.ab_ac.frac_positive << '\n';
    summary << g.sigma << ",cb_minus_ca," << g.cb_ca.mean << ',' << g.cb_ca.std << ',' << g.cb_ca.frac_positive << '\n';
  }
  for (const auto& g : h.per_sigma) {
    for (const auto& [name, values] : {std::pair{"ab_minus_ac", &g.ab_minus_ac}, std::pair{"cb_minus_ca", &g.cb_minus_ca}}) {
      std::ostringstream fname;
      fname << "hist_" << name << "_sigma_" << g.sigma << ".csv";
      std::ofstream out(dir / fname.str());
      out << "bin_left,bin_right,count\n" << std::setprecision(9);
      for (const auto& bin : histogram(*values)) out << bin.left << ',' << bin.right << ',' << bin.count << '\n';
    }
  }
}

double analytic_uniform_gap(int k, int t) {
  const double m = k + t;
  return 1.0 / (m + 1.0) - 1.0 / (m + 2.0);
}

DotGapResult dot_product_gap_check(int dim, int k, int t, int trials, WeightMode mode, std::uint64_t seed) {
  if (k < 1 || t < 0) throw std::invalid_argument("dot_product_gap_check needs k >= 1 and t >= 0");
  if (trials < 1) throw std::invalid_argument("dot_product_gap_check needs trials >= 1");
  const int n_alpha = k + t, n_beta = k + t + 1, n_beta2 = k + t + 2;
  if (dim < 8 * n_beta2) {
    throw std::invalid_argument("dot_product_gap_check needs dim >= 8*(k+t+2) = " + std::to_string(8 * n_beta2));
  }
  const std::size_t d = static_cast<std::size_t>(dim);
  std::vector<std::vector<double>> e(static_cast<std::size_t>(n_beta2), std::vector<double>(d));
  std::vector<double> alpha(static_cast<std::size_t>(n_alpha)), beta(static_cast<std::size_t>(n_beta)),
      beta2(static_cast<std::size_t>(n_beta2));
  std::vector<double> sa(d), sb(d), sb2(d);
  std::vector<double> gaps;
  gaps.reserve(static_cast<std::size_t>(trials));

  auto convex = [](std::vector<double>& w, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double total = 0.0;
    for (auto& x : w) total += (x = u(rng));
    for (auto& x : w) x /= total;
  };
  auto weighted_sum = [&](std::vector<double>& dst, const std::vector<double>& w) {
    std::fill(dst.begin(), dst.end(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dst[j] += w[i] * e[i][j];
  };
  auto dotp = [&](const std::vector<double>& x, const std::vector<double>& y) {
    return std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
  };

  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(trial)));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& vec : e) {
      double norm = 0.0;
      for (auto& x : vec) {
        x = normal(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (auto& x : vec) x /= norm;
    }
    switch (mode) {
      case WeightMode::kRandomConvex:
        convex(alpha, rng);
        convex(beta, rng);
        convex(beta2, rng);
        break;
      case WeightMode::kUniform:
        std::fill(alpha.begin(), alpha.end(), 1.0 / n_alpha);
        std::fill(beta.begin(), beta.end(), 1.0 / n_beta);
        std::fill(beta2.begin(), beta2.end(), 1.0 / n_beta2);
        break;
      case WeightMode::kEqual:
        convex(alpha, rng);
        convex(beta, rng);
        std::copy(beta.begin(), beta.end(), beta2.begin());
        beta2.back() = 0.0;
        break;
    }
    weighted_sum(sa, alpha);
    weighted_sum(sb, beta);
    weighted_sum(sb2, beta2);
    gaps.push_back(dotp(sa, sb) - dotp(sa, sb2));
  }
  const GapSummary s = summarize_gaps(gaps);
  return {s.mean, s.std / std::sqrt(static_cast<double>(trials)), s.frac_positive};
}

}  // namespace nope
