#ifndef TLAB_MODEL_HPP_
#define TLAB_MODEL_HPP_

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tlab/tensor.hpp"

namespace tlab {

// Architecture of the decoder-only transformer. Residual connections can be
// ablated per layer (1-based indices); ablating a layer removes both of its
// skip connections.
struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_mlp = 512;
  std::size_t vocab_size = 13;
  std::size_t context_len = 14;
  bool use_positional_encoding = true;
  bool causal_attention = true;
  std::set<std::size_t> ablated_layers;
  double residual_scale = 1.0;
  bool tie_lm_head = true;
  bool gelu_exact = false;
  double layer_norm_eps = 1e-5;

  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;  // throws std::invalid_argument
  std::string summary() const;
};

struct AttentionLayer {
  std::vector<Tensor> w_q, w_k, w_v;  // per head, [d_model x d_head]
  Tensor w_o;                         // [d_model x d_model]
  Tensor ln_gain, ln_bias;            // pre-attention layer norm
};

struct FeedForward {
  Tensor ln_gain, ln_bias;  // pre-MLP layer norm
  Tensor w_in;              // [d_model x d_mlp]
  Tensor w_out;             // [d_mlp x d_model]
};

struct TransformerBlock {
  AttentionLayer attn;
  FeedForward mlp;
  bool residuals_enabled = true;
};

struct TransformerModel {
  ModelConfig config;
  Tensor token_embedding;       // [vocab_size x d_model]
  Tensor positional_embedding;  // [context_len x d_model]; undefined when NoPE
  std::vector<TransformerBlock> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor lm_head;  // [vocab_size x d_model]; undefined when tied

  // Stable name/order contract used by the optimizer and the checkpoint format.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  void zero_grads();
};

// Gaussian init (std 0.02), residual projections scaled by 1/sqrt(2*n_layers),
// layer-norm gains 1 / biases 0. Fully determined by the seed.
TransformerModel init_params(const ModelConfig& config, std::uint64_t seed);

// Pre-softmax, pre-mask scores for one head: (X Wq)(X Wk)^T / sqrt(d_head).
Tensor attention_scores(Tape& tape, const Tensor& x, const AttentionLayer& layer,
                        std::size_t head);

// Entries with column > row forced to -inf; requires a square matrix.
Tensor apply_causal_mask(Tape& tape, const Tensor& a);

// Full multi-head attention: per-head softmax(mask?(scores)) * values, heads
// concatenated, then the output projection.
Tensor attention_output(Tape& tape, const Tensor& x, const AttentionLayer& layer, bool causal,
                        std::size_t n_batch = 1);

// Pre-LN block. With residuals: y = x + a*attn(LN(x)); o = y + a*mlp(LN(y)).
// Without (ablated layer): y = attn(LN(x)); o = mlp(LN(y)).
Tensor block_forward(Tape& tape, const Tensor& x, const TransformerBlock& block,
                     bool residuals_enabled, const ModelConfig& config,
                     std::size_t n_batch = 1);

// Logits for one token sequence: [len x vocab_size].
Tensor model_forward(const TransformerModel& model, const std::vector<int>& token_ids,
                     Tape& tape);

// Packed-batch forward over n_batch sequences of equal length n_seq.
// token_ids holds n_batch*n_seq ids row-major. When block_outputs is given it
// receives each block's post-residual output ([n_batch*n_seq x d_model]).
Tensor model_forward_batch(const TransformerModel& model, const std::vector<int>& token_ids,
                           std::size_t n_batch, std::size_t n_seq, Tape& tape,
                           std::vector<Tensor>* block_outputs = nullptr);

}  // namespace tlab

#endif  // TLAB_MODEL_HPP_
