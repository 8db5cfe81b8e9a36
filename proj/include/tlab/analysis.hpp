#ifndef TLAB_ANALYSIS_HPP_
#define TLAB_ANALYSIS_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tlab/addition.hpp"
#include "tlab/model.hpp"

namespace tlab {

// Deviation below this is invariance (observed rounding noise sits around
// 1e-13); genuine symmetry breaking lands above kSymmetryBreakThreshold.
// The thresholds are separated by six orders of magnitude.
inline constexpr double kInvarianceThreshold = 1e-9;
inline constexpr double kSymmetryBreakThreshold = 1e-3;

struct PermutationTestReport {
  std::string config_summary;
  std::size_t prompt_len = 0;
  std::size_t n_permutations = 0;
  // Final-position logits under permutations that fix the last position.
  double max_final_logit_deviation = 0.0;
  // pi(model(x)) vs model(pi(x)) under full permutations.
  double max_equivariance_deviation = 0.0;

  bool invariant() const { return max_final_logit_deviation < kInvarianceThreshold; }
  std::string verdict() const { return invariant() ? "invariant" : "symmetry-broken"; }
};

// Samples random token sequences and permutations; records the worst-case
// deviations defined above. prompt_len must be at least 3 and fit the model
// context.
PermutationTestReport check_invariance(const TransformerModel& model, std::size_t prompt_len,
                                       std::size_t n_permutations, std::uint64_t seed);

// Where to read activations: the raw post-residual block output (what the
// next block or the LM head consumes), or that output after the layer norm
// that consumes it.
enum class ActivationTap { kPostResidual, kNormalized };

struct ActivationTable {
  std::size_t n_samples = 0;
  std::size_t n_positions = 0;
  std::size_t n_channels = 0;
  std::vector<double> values;  // [n_samples x n_positions x n_channels]

  double at(std::size_t s, std::size_t p, std::size_t c) const {
    return values[(s * n_positions + p) * n_channels + c];
  }
};

// Records block `layer`'s output (1-based) for every sample. Sequences are
// the fixed 14-token rendering; prompt_only keeps the 9 context positions.
ActivationTable collect_activations(const TransformerModel& model,
                                    const std::vector<AdditionSample>& samples,
                                    std::size_t layer,
                                    ActivationTap tap = ActivationTap::kPostResidual,
                                    bool prompt_only = false);

struct CorrelationMatrix {
  std::size_t layer = 0;
  std::size_t n_positions = 0;
  std::size_t n_channels = 0;
  std::vector<double> values;  // [dim x dim], dim = n_positions * n_channels

  std::size_t dim() const { return n_positions * n_channels; }
  double at(std::size_t i, std::size_t j) const { return values[i * dim() + j]; }
};

// Pearson correlation across the sample axis between every (position,
// channel) pair. Constant features correlate 0 by convention. Needs at least
// two samples.
CorrelationMatrix correlation_matrix(const ActivationTable& activations,
                                     std::size_t layer = 0);

// Mass of |correlation| split between same-position blocks and cross-position
// blocks, diagonal excluded. ratio = off / (on + off) quantifies how "blocky"
// the matrix is (0 = perfectly block-diagonal).
struct BlockStructureMetric {
  double on_block_mass = 0.0;
  double off_block_mass = 0.0;
  double ratio = 0.0;
};
BlockStructureMetric block_structure(const CorrelationMatrix& m);

// Binary PGM (P5) of |correlation|: 0 -> black, 1 -> white, one pixel per
// entry.
void render_heatmap(const CorrelationMatrix& m, const std::string& path);

// Signed values, 17 significant digits (doubles round-trip exactly).
void write_csv(const CorrelationMatrix& m, const std::string& path);

// "key: value" lines.
void write_report(const std::string& path,
                  const std::vector<std::pair<std::string, std::string>>& entries);

std::vector<std::pair<std::string, std::string>> report_entries(
    const PermutationTestReport& report);

}  // namespace tlab

#endif  // TLAB_ANALYSIS_HPP_
