#include "tlab/model.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "tlab/rng.hpp"

namespace tlab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kInitStd = 0.02;

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
  Tensor t = Tensor::zeros({rows, cols}, true);
  double* p = t.data();
  for (std::size_t i = 0; i < rows * cols; ++i) p[i] = std_dev * rng.next_gaussian();
  return t;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (n_heads < 1) throw std::invalid_argument("ModelConfig: n_heads must be >= 1");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  if (d_mlp < 1) throw std::invalid_argument("ModelConfig: d_mlp must be >= 1");
  if (vocab_size < 1) throw std::invalid_argument("ModelConfig: vocab_size must be >= 1");
  if (context_len < 1) throw std::invalid_argument("ModelConfig: context_len must be >= 1");
  if (layer_norm_eps <= 0.0)
    throw std::invalid_argument("ModelConfig: layer_norm_eps must be positive");
  for (std::size_t layer : ablated_layers)
    if (layer < 1 || layer > n_layers)
      throw std::invalid_argument("ModelConfig: ablated layer " + std::to_string(layer) +
                                  " outside [1, " + std::to_string(n_layers) + "]");
}

std::string ModelConfig::summary() const {
  std::ostringstream os;
  os << n_layers << "L-" << n_heads << "H-d" << d_model << "-mlp" << d_mlp
     << (use_positional_encoding ? " PE" : " NoPE")
     << (causal_attention ? " causal" : " non-causal");
  if (!ablated_layers.empty()) {
    os << " ablated{";
    bool first = true;
    for (std::size_t layer : ablated_layers) {
      os << (first ? "" : ",") << layer;
      first = false;
    }
    os << "}";
  }
  return os.str();
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding);
  if (positional_embedding.defined())
    out.emplace_back("positional_embedding", positional_embedding);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i + 1) + ".";
    const TransformerBlock& b = blocks[i];
    for (std::size_t h = 0; h < b.attn.w_q.size(); ++h) {
      const std::string hs = std::to_string(h);
      out.emplace_back(prefix + "attn.w_q." + hs, b.attn.w_q[h]);
      out.emplace_back(prefix + "attn.w_k." + hs, b.attn.w_k[h]);
      out.emplace_back(prefix + "attn.w_v." + hs, b.attn.w_v[h]);
    }
    out.emplace_back(prefix + "attn.w_o", b.attn.w_o);
    out.emplace_back(prefix + "attn.ln_gain", b.attn.ln_gain);
    out.emplace_back(prefix + "attn.ln_bias", b.attn.ln_bias);
    out.emplace_back(prefix + "mlp.ln_gain", b.mlp.ln_gain);
    out.emplace_back(prefix + "mlp.ln_bias", b.mlp.ln_bias);
    out.emplace_back(prefix + "mlp.w_in", b.mlp.w_in);
    out.emplace_back(prefix + "mlp.w_out", b.mlp.w_out);
  }
  out.emplace_back("final_ln_gain", final_ln_gain);
  out.emplace_back("final_ln_bias", final_ln_bias);
  if (lm_head.defined()) out.emplace_back("lm_head", lm_head);
  return out;
}

void TransformerModel::zero_grads() {
  for (auto& [name, tensor] : named_parameters()) {
    Tensor t = tensor;
    t.zero_grad();
  }
}

TransformerModel init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  TransformerModel model;
  model.config = config;
  const std::size_t d = config.d_model;
  const std::size_t dh = config.d_head();
  const double resid_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  model.token_embedding = gaussian(rng, config.vocab_size, d, kInitStd);
  if (config.use_positional_encoding)
    model.positional_embedding = gaussian(rng, config.context_len, d, kInitStd);

  model.blocks.resize(config.n_layers);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    TransformerBlock& b = model.blocks[i];
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      b.attn.w_q.push_back(gaussian(rng, d, dh, kInitStd));
      b.attn.w_k.push_back(gaussian(rng, d, dh, kInitStd));
      b.attn.w_v.push_back(gaussian(rng, d, dh, kInitStd));
    }
    b.attn.w_o = gaussian(rng, d, d, resid_std);
    b.attn.ln_gain = Tensor::filled({d}, 1.0).set_requires_grad(true);
    b.attn.ln_bias = Tensor::zeros({d}, true);
    b.mlp.ln_gain = Tensor::filled({d}, 1.0).set_requires_grad(true);
    b.mlp.ln_bias = Tensor::zeros({d}, true);
    b.mlp.w_in = gaussian(rng, d, config.d_mlp, kInitStd);
    b.mlp.w_out = gaussian(rng, config.d_mlp, d, resid_std);
    b.residuals_enabled = config.ablated_layers.count(i + 1) == 0;
  }
  model.final_ln_gain = Tensor::filled({d}, 1.0).set_requires_grad(true);
  model.final_ln_bias = Tensor::zeros({d}, true);
  if (!config.tie_lm_head) model.lm_head = gaussian(rng, config.vocab_size, d, kInitStd);
  return model;
}

Tensor attention_scores(Tape& tape, const Tensor& x, const AttentionLayer& layer,
                        std::size_t head) {
  if (head >= layer.w_q.size())
    throw std::invalid_argument("attention_scores: head " + std::to_string(head) +
                                " out of range [0, " + std::to_string(layer.w_q.size()) + ")");
  const std::size_t len = x.rows();
  const std::size_t dh = layer.w_q[head].cols();
  Tensor q = matmul(tape, x, layer.w_q[head]);
  Tensor k = matmul(tape, x, layer.w_k[head]);
  return attn_scores(tape, q, k, 1, len, 1.0 / std::sqrt(static_cast<double>(dh)), false);
}

Tensor apply_causal_mask(Tape& tape, const Tensor& a) {
  if (!a.defined() || a.ndim() != 2 || a.rows() != a.cols())
    throw std::invalid_argument("apply_causal_mask: expected a square matrix, got " +
                                (a.defined() ? shape_string(a.shape()) : "an undefined tensor"));
  const std::size_t n = a.rows();
  Tensor out = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = j > i ? kNegInf : a.at(i, j);
  if (tape.recording() && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc, n]() mutable {
      if (!oc.has_grad() || !ac.requires_grad()) return;
      ac.ensure_grad();
      const double* g = oc.grad();
      double* da = ac.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) da[i * n + j] += g[i * n + j];
    });
  }
  return out;
}

Tensor attention_output(Tape& tape, const Tensor& x, const AttentionLayer& layer, bool causal,
                        std::size_t n_batch) {
  const std::size_t n_heads = layer.w_q.size();
  const std::size_t n_seq = x.rows() / n_batch;
  const std::size_t dh = layer.w_q[0].cols();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor q = matmul(tape, x, layer.w_q[h]);
    Tensor k = matmul(tape, x, layer.w_k[h]);
    Tensor v = matmul(tape, x, layer.w_v[h]);
    Tensor scores = attn_scores(tape, q, k, n_batch, n_seq, inv_sqrt_dh, causal);
    Tensor weights = row_softmax(tape, scores);
    head_outputs.push_back(attn_mix(tape, weights, v, n_batch, n_seq, causal));
  }
  Tensor merged = n_heads == 1 ? head_outputs[0] : concat_cols(tape, head_outputs);
  return matmul(tape, merged, layer.w_o);
}

Tensor block_forward(Tape& tape, const Tensor& x, const TransformerBlock& block,
                     bool residuals_enabled, const ModelConfig& config, std::size_t n_batch) {
  const double alpha = config.residual_scale;
  auto scaled = [&](const Tensor& t) { return alpha == 1.0 ? t : scale(tape, t, alpha); };

  Tensor normed = layer_norm(tape, x, block.attn.ln_gain, block.attn.ln_bias,
                             config.layer_norm_eps);
  Tensor attn = attention_output(tape, normed, block.attn, config.causal_attention, n_batch);
  Tensor y = residuals_enabled ? add(tape, x, scaled(attn)) : attn;

  Tensor normed2 = layer_norm(tape, y, block.mlp.ln_gain, block.mlp.ln_bias,
                              config.layer_norm_eps);
  Tensor hidden = gelu(tape, matmul(tape, normed2, block.mlp.w_in), config.gelu_exact);
  Tensor mlp_out = matmul(tape, hidden, block.mlp.w_out);
  return residuals_enabled ? add(tape, y, scaled(mlp_out)) : mlp_out;
}

Tensor model_forward_batch(const TransformerModel& model, const std::vector<int>& token_ids,
                           std::size_t n_batch, std::size_t n_seq, Tape& tape,
                           std::vector<Tensor>* block_outputs) {
  const ModelConfig& cfg = model.config;
  if (token_ids.size() != n_batch * n_seq)
    throw std::invalid_argument("model_forward_batch: " + std::to_string(token_ids.size()) +
                                " ids do not pack " + std::to_string(n_batch) + " x " +
                                std::to_string(n_seq));
  if (n_seq > cfg.context_len)
    throw std::invalid_argument("model_forward: sequence length " + std::to_string(n_seq) +
                                " exceeds context length " + std::to_string(cfg.context_len));
  Tensor x = embedding_lookup(tape, model.token_embedding, token_ids);
  if (cfg.use_positional_encoding) {
    std::vector<int> positions(n_batch * n_seq);
    for (std::size_t b = 0; b < n_batch; ++b)
      for (std::size_t i = 0; i < n_seq; ++i) positions[b * n_seq + i] = static_cast<int>(i);
    x = add(tape, x, embedding_lookup(tape, model.positional_embedding, positions));
  }
  if (block_outputs) block_outputs->clear();
  for (const TransformerBlock& block : model.blocks) {
    x = block_forward(tape, x, block, block.residuals_enabled, cfg, n_batch);
    if (block_outputs) block_outputs->push_back(x);
  }
  Tensor normed = layer_norm(tape, x, model.final_ln_gain, model.final_ln_bias,
                             cfg.layer_norm_eps);
  const Tensor& head = cfg.tie_lm_head ? model.token_embedding : model.lm_head;
  return matmul_nt(tape, normed, head);
}

Tensor model_forward(const TransformerModel& model, const std::vector<int>& token_ids,
                     Tape& tape) {
  return model_forward_batch(model, token_ids, 1, token_ids.size(), tape);
}

}  // namespace tlab
