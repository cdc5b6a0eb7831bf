#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace nope {

/// Monte Carlo model of three consecutive causal-attention outputs built
/// from shared random value vectors:
///   a = sum_{i<=4} alpha_i v_i,  b = sum_{i<=5} beta_i v_i,  c = sum_{i<=6} gamma_i v_i
/// with coefficients i.i.d. N(coeff_mean, sigma^2).
struct SimulationSpec {
  int dim = 128;
  std::vector<double> sigmas{0.001, 0.01, 0.1, 1.0, 10.0, 100.0};
  int trials = 10000;
  double coeff_mean = 1.0;
  double coeff_scale = 1.0;  // multiplies every coefficient; cosine gaps must not depend on it
  std::uint64_t seed = 0;

  void validate() const;
};

struct GapSummary {
  double mean = 0.0;
  double std = 0.0;
  double frac_positive = 0.0;
};

struct SigmaGaps {
  double sigma = 0.0;
  std::vector<double> ab_minus_ac;  // sim(a,b) - sim(a,c)
  std::vector<double> cb_minus_ca;  // sim(c,b) - sim(c,a)
  GapSummary ab_ac;
  GapSummary cb_ca;
};

struct GapHistograms {
  std::vector<SigmaGaps> per_sigma;
};

/// Trial t draws its vectors and standardized coefficient noise from a
/// stream derived from (seed, t), so results do not depend on sharding and
/// every sigma sees the same underlying draws.
GapHistograms run_coefficient_simulation(const SimulationSpec& spec);

GapSummary summarize_gaps(const std::vector<double>& gaps);

struct HistogramBin {
  double left = 0.0;
  double right = 0.0;
  int count = 0;
};

/// Uniform bins spanning the observed [min, max] of `values`.
std::vector<HistogramBin> histogram(const std::vector<double>& values, int bins = 60);

void write_simulation_csvs(const GapHistograms& h, const std::filesystem::path& dir);

enum class WeightMode {
  kRandomConvex,  // uniform draws normalized to sum 1
  kUniform,       // every weight 1/m on its support
  kEqual,         // beta' copies beta on the shared support, zero tail
};

struct DotGapResult {
  double mean_gap = 0.0;
  double std_error = 0.0;
  double frac_positive = 0.0;
};

/// Averaging-effect check on unit-norm random embeddings e_1..e_{k+t+2}:
/// gap = (sum alpha_i e_i).(sum beta_i e_i) - (sum alpha_i e_i).(sum beta'_i e_i)
/// with alpha over k+t terms, beta over k+t+1 and beta' over k+t+2.
/// Requires dim >= 8 (k+t+2).
DotGapResult dot_product_gap_check(int dim, int k, int t, int trials, WeightMode mode = WeightMode::kRandomConvex,
                                   std::uint64_t seed = 0);

/// Expected gap under exact orthogonality with uniform weights.
double analytic_uniform_gap(int k, int t);

}  // namespace nope
