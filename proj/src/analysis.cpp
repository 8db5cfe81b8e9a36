#include "tlab/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "tlab/gemm.hpp"
#include "tlab/parallel.hpp"
#include "tlab/rng.hpp"

namespace tlab {

PermutationTestReport check_invariance(const TransformerModel& model, std::size_t prompt_len,
                                       std::size_t n_permutations, std::uint64_t seed) {
  if (prompt_len < 3)
    throw std::invalid_argument("check_invariance: prompt_len must be >= 3, got " +
                                std::to_string(prompt_len));
  if (prompt_len > model.config.context_len)
    throw std::invalid_argument("check_invariance: prompt_len " + std::to_string(prompt_len) +
                                " exceeds context length " +
                                std::to_string(model.config.context_len));
  PermutationTestReport report;
  report.config_summary = model.config.summary();
  report.prompt_len = prompt_len;
  report.n_permutations = n_permutations;

  Rng rng(seed);
  const std::size_t len = prompt_len;
  const std::size_t v = model.config.vocab_size;
  for (std::size_t trial = 0; trial < n_permutations; ++trial) {
    std::vector<int> tokens(len);
    for (int& t : tokens) t = static_cast<int>(rng.below(v));

    Tape tape(false);
    Tensor base = model_forward(model, tokens, tape);

    // Permutation fixing the final position: invariance of the next-token
    // prediction.
    const std::vector<std::size_t> sigma = rng.permutation(len - 1);
    std::vector<int> permuted(len);
    for (std::size_t i = 0; i + 1 < len; ++i) permuted[i] = tokens[sigma[i]];
    permuted[len - 1] = tokens[len - 1];
    Tape tape2(false);
    Tensor moved = model_forward(model, permuted, tape2);
    for (std::size_t j = 0; j < v; ++j) {
      const double d = std::abs(moved.at(len - 1, j) - base.at(len - 1, j));
      report.max_final_logit_deviation = std::max(report.max_final_logit_deviation, d);
    }

    // Full permutation: equivariance pi(model(x)) == model(pi(x)).
    const std::vector<std::size_t> pi = rng.permutation(len);
    std::vector<int> full(len);
    for (std::size_t i = 0; i < len; ++i) full[i] = tokens[pi[i]];
    Tape tape3(false);
    Tensor moved_full = model_forward(model, full, tape3);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < v; ++j) {
        const double d = std::abs(moved_full.at(i, j) - base.at(pi[i], j));
        report.max_equivariance_deviation = std::max(report.max_equivariance_deviation, d);
      }
  }
  return report;
}

ActivationTable collect_activations(const TransformerModel& model,
                                    const std::vector<AdditionSample>& samples,
                                    std::size_t layer, ActivationTap tap, bool prompt_only) {
  const std::size_t n_layers = model.config.n_layers;
  if (layer < 1 || layer > n_layers)
    throw std::invalid_argument("collect_activations: layer " + std::to_string(layer) +
                                " out of range [1, " + std::to_string(n_layers) + "]");
  if (samples.empty()) throw std::invalid_argument("collect_activations: no samples");

  const std::size_t seq_len = AdditionSample::kSequenceLen;
  const std::size_t keep = prompt_only ? 1 + AdditionSample::kPromptLen : seq_len;
  ActivationTable table;
  table.n_samples = samples.size();
  table.n_positions = keep;
  table.n_channels = model.config.d_model;
  table.values.resize(table.n_samples * keep * table.n_channels);

  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t stop = std::min(samples.size(), start + kChunk);
    const std::size_t n = stop - start;
    std::vector<int> ids;
    ids.reserve(n * seq_len);
    for (std::size_t s = start; s < stop; ++s) {
      const auto seq = samples[s].full_sequence();
      ids.insert(ids.end(), seq.begin(), seq.end());
    }
    Tape tape(false);
    std::vector<Tensor> block_outputs;
    model_forward_batch(model, ids, n, seq_len, tape, &block_outputs);
    Tensor out = block_outputs[layer - 1];
    if (tap == ActivationTap::kNormalized) {
      // Normalize with the layer norm that consumes this output: the next
      // block's attention LN, or the final LN for the last block.
      const Tensor& gain =
          layer < n_layers ? model.blocks[layer].attn.ln_gain : model.final_ln_gain;
      const Tensor& bias =
          layer < n_layers ? model.blocks[layer].attn.ln_bias : model.final_ln_bias;
      out = layer_norm(tape, out, gain, bias, model.config.layer_norm_eps);
    }
    const std::size_t d = table.n_channels;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < keep; ++p)
        for (std::size_t c = 0; c < d; ++c)
          table.values[((start + s) * keep + p) * d + c] = out.at(s * seq_len + p, c);
  }
  return table;
}

CorrelationMatrix correlation_matrix(const ActivationTable& activations, std::size_t layer) {
  const std::size_t n = activations.n_samples;
  if (n < 2)
    throw std::invalid_argument("correlation_matrix: need at least 2 samples, got " +
                                std::to_string(n));
  const std::size_t f = activations.n_positions * activations.n_channels;
  CorrelationMatrix m;
  m.layer = layer;
  m.n_positions = activations.n_positions;
  m.n_channels = activations.n_channels;
  m.values.assign(f * f, 0.0);

  // Standardize each feature across the sample axis; constant features become
  // all-zero columns and therefore correlate 0 with everything.
  std::vector<double> z(n * f);
  const double inv_n = 1.0 / static_cast<double>(n);
  parallel_for(f, 16, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t j = lo; j < hi; ++j) {
      double mean = 0.0;
      for (std::size_t s = 0; s < n; ++s) mean += activations.values[s * f + j];
      mean *= inv_n;
      double var = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double c = activations.values[s * f + j] - mean;
        var += c * c;
      }
      var *= inv_n;
      const double inv_std = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
      for (std::size_t s = 0; s < n; ++s)
        z[s * f + j] = (activations.values[s * f + j] - mean) * inv_std;
    }
  });

  // R = Z^T Z / n, computed once and mirrored for exact symmetry.
  gemm::dgemm(true, false, f, f, n, inv_n, z.data(), f, z.data(), f, 0.0, m.values.data(), f);
  parallel_for(f, 16, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        double r = m.values[i * f + j];
        if (j < i) r = m.values[j * f + i];  // mirror the upper triangle
        m.values[i * f + j] = std::min(1.0, std::max(-1.0, r));
      }
  });
  return m;
}

BlockStructureMetric block_structure(const CorrelationMatrix& m) {
  const std::size_t f = m.dim();
  const std::size_t c = m.n_channels;
  if (f == 0 || c == 0) throw std::invalid_argument("block_structure: empty matrix");
  BlockStructureMetric metric;
  for (std::size_t i = 0; i < f; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      if (i == j) continue;
      const double a = std::abs(m.values[i * f + j]);
      if (i / c == j / c)
        metric.on_block_mass += a;
      else
        metric.off_block_mass += a;
    }
  }
  const double total = metric.on_block_mass + metric.off_block_mass;
  metric.ratio = total > 0.0 ? metric.off_block_mass / total : 0.0;
  return metric;
}

void render_heatmap(const CorrelationMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("render_heatmap: cannot open " + path);
  const std::size_t f = m.dim();
  out << "P5\n" << f << " " << f << "\n255\n";
  std::vector<unsigned char> row(f);
  for (std::size_t i = 0; i < f; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      const double a = std::abs(m.values[i * f + j]);
      row[j] = static_cast<unsigned char>(std::lround(std::min(1.0, a) * 255.0));
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(f));
  }
  if (!out) throw std::runtime_error("render_heatmap: write failed for " + path);
}

void write_csv(const CorrelationMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_csv: cannot open " + path);
  const std::size_t f = m.dim();
  char buf[40];
  for (std::size_t i = 0; i < f; ++i) {
    std::string line;
    line.reserve(f * 26);
    for (std::size_t j = 0; j < f; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m.values[i * f + j]);
      if (j) line.push_back(',');
      line += buf;
    }
    line.push_back('\n');
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
  }
  if (!out) throw std::runtime_error("write_csv: write failed for " + path);
}

void write_report(const std::string& path,
                  const std::vector<std::pair<std::string, std::string>>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_report: cannot open " + path);
  for (const auto& [key, value] : entries) out << key << ": " << value << "\n";
  if (!out) throw std::runtime_error("write_report: write failed for " + path);
}

std::vector<std::pair<std::string, std::string>> report_entries(
    const PermutationTestReport& report) {
  char buf[40];
  std::vector<std::pair<std::string, std::string>> entries;
  entries.emplace_back("config", report.config_summary);
  entries.emplace_back("prompt_len", std::to_string(report.prompt_len));
  entries.emplace_back("n_permutations", std::to_string(report.n_permutations));
  std::snprintf(buf, sizeof(buf), "%.17g", report.max_final_logit_deviation);
  entries.emplace_back("max_final_logit_deviation", buf);
  std::snprintf(buf, sizeof(buf), "%.17g", report.max_equivariance_deviation);
  entries.emplace_back("max_equivariance_deviation", buf);
  entries.emplace_back("verdict", report.verdict());
  return entries;
}

}  // namespace tlab
