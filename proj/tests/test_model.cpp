#include <doctest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"
#include "tlab/analysis.hpp"
#include "tlab/model.hpp"

using namespace tlab;
using tlab::testing::bitwise_equal;
using tlab::testing::max_abs_diff;
using tlab::testing::rand_tensor;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_mlp = 32;
  cfg.context_len = 14;
  return cfg;
}

void zero_block_weights(TransformerBlock& block) {
  auto zero = [](Tensor& t) { std::fill(t.values().begin(), t.values().end(), 0.0); };
  for (auto& t : block.attn.w_q) zero(t);
  for (auto& t : block.attn.w_k) zero(t);
  for (auto& t : block.attn.w_v) zero(t);
  zero(block.attn.w_o);
  zero(block.mlp.w_in);
  zero(block.mlp.w_out);
}

std::vector<int> random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<int> t(len);
  for (int& v : t) v = static_cast<int>(rng.below(vocab));
  return t;
}

}  // namespace

TEST_CASE("ModelConfig validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.d_model = 15;  // not divisible by n_heads
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.ablated_layers = {3};  // only 2 layers
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.ablated_layers = {0};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("attention_scores: identity projections give I/sqrt(d_head)") {
  // Single head of width 2 with W_Q = W_K = I and X = I: A = X X^T / sqrt(2).
  AttentionLayer layer;
  layer.w_q = {Tensor::of({2, 2}, {1, 0, 0, 1})};
  layer.w_k = {Tensor::of({2, 2}, {1, 0, 0, 1})};
  Tensor x = Tensor::of({2, 2}, {1, 0, 0, 1});
  Tape tape(false);
  Tensor scores = attention_scores(tape, x, layer, 0);
  const double inv_sqrt2 = 0.70710678118654752;
  CHECK(scores.at(0, 0) == doctest::Approx(inv_sqrt2).epsilon(1e-15));
  CHECK(scores.at(1, 1) == doctest::Approx(inv_sqrt2).epsilon(1e-15));
  CHECK(scores.at(0, 1) == 0.0);
  CHECK(scores.at(1, 0) == 0.0);
}

TEST_CASE("attention_scores: single token and zero input") {
  Rng rng(3);
  AttentionLayer layer;
  layer.w_q = {rand_tensor(rng, {4, 4})};
  layer.w_k = {rand_tensor(rng, {4, 4})};
  Tape tape(false);
  Tensor one = rand_tensor(rng, {1, 4});
  Tensor s1 = attention_scores(tape, one, layer, 0);
  CHECK(s1.shape() == std::vector<std::size_t>{1, 1});

  Tensor z = Tensor::zeros({3, 4});
  Tensor sz = attention_scores(tape, z, layer, 0);
  for (std::size_t i = 0; i < sz.size(); ++i) CHECK(sz.at(i) == 0.0);
}

TEST_CASE("apply_causal_mask: spec examples") {
  Tape tape(false);
  Tensor a = Tensor::of({2, 2}, {1, 2, 3, 4});
  Tensor masked = apply_causal_mask(tape, a);
  CHECK(masked.at(0, 0) == 1.0);
  CHECK(masked.at(0, 1) == -kInf);
  CHECK(masked.at(1, 0) == 3.0);
  CHECK(masked.at(1, 1) == 4.0);

  Tensor single = Tensor::of({1, 1}, {5.0});
  CHECK(apply_causal_mask(tape, single).at(0, 0) == 5.0);

  CHECK_THROWS_AS(apply_causal_mask(tape, Tensor::zeros({2, 3})), std::invalid_argument);

  // Post-softmax first row of a masked 2x2 is [1, 0] exactly.
  Tensor p = row_softmax(tape, masked);
  CHECK(p.at(0, 0) == 1.0);
  CHECK(p.at(0, 1) == 0.0);
}

TEST_CASE("attention_output: W_V = 0 gives zeros; causal output is prefix-exact") {
  const ModelConfig cfg = tiny_config();
  TransformerModel model = init_params(cfg, 99);
  AttentionLayer& layer = model.blocks[0].attn;
  Rng rng(5);
  Tensor x = rand_tensor(rng, {6, cfg.d_model});

  {
    AttentionLayer zeroed = layer;
    for (auto& t : zeroed.w_v) {
      t = t.clone();
      std::fill(t.values().begin(), t.values().end(), 0.0);
    }
    Tape tape(false);
    Tensor out = attention_output(tape, x, zeroed, true);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.at(i) == 0.0);
  }

  // Perturbing row k+1 leaves rows 0..k bit-identical under causal attention.
  Tape tape(false);
  Tensor base = attention_output(tape, x, layer, true);
  for (std::size_t k : {std::size_t{0}, std::size_t{3}}) {
    Tensor xp = x.clone();
    for (std::size_t c = 0; c < cfg.d_model; ++c) xp.at(k + 1, c) += rng.next_gaussian();
    Tape t2(false);
    Tensor out = attention_output(t2, xp, layer, true);
    for (std::size_t i = 0; i <= k; ++i)
      for (std::size_t c = 0; c < cfg.d_model; ++c) {
        const bool same = out.at(i, c) == base.at(i, c);
        CHECK(same);
      }
  }
}

TEST_CASE("attention_output: non-causal permutation equivariance") {
  const ModelConfig cfg = tiny_config();
  TransformerModel model = init_params(cfg, 7);
  const AttentionLayer& layer = model.blocks[1].attn;
  Rng rng(11);
  Tensor x = rand_tensor(rng, {8, cfg.d_model});
  Tape tape(false);
  Tensor base = attention_output(tape, x, layer, false);
  const auto pi = rng.permutation(8);
  Tensor xp = Tensor::zeros({8, cfg.d_model});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < cfg.d_model; ++c) xp.at(i, c) = x.at(pi[i], c);
  Tape t2(false);
  Tensor moved = attention_output(t2, xp, layer, false );
  double dev = 0.0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < cfg.d_model; ++c)
      dev = std::max(dev, std::abs(moved.at(i, c) - base.at(pi[i], c)));
  CHECK(dev < 1e-9);
}

TEST_CASE("block_forward: zero weights collapse to skip path or to zero") {
  const ModelConfig cfg = tiny_config();
  TransformerModel model = init_params(cfg, 1);
  TransformerBlock block = model.blocks[0];
  zero_block_weights(block);
  Rng rng(13);
  Tensor x = rand_tensor(rng, {5, cfg.d_model});

  Tape tape(false);
  Tensor with_residuals = block_forward(tape, x, block, true, cfg);
  CHECK(bitwise_equal(with_residuals, x));  // o = x through the skip path

  Tensor without = block_forward(tape, x, block, false, cfg);
  for (std::size_t i = 0; i < without.size(); ++i) CHECK(without.at(i) == 0.0);
}

TEST_CASE("block_forward: residual_scale scales the sublayer contribution") {
  const ModelConfig cfg = tiny_config();
  TransformerModel model = init_params(cfg, 21);
  Rng rng(17);
  Tensor x = rand_tensor(rng, {4, cfg.d_model});
  ModelConfig half = cfg;
  half.residual_scale = 0.5;
  Tape tape(false);
  Tensor full = block_forward(tape, x, model.blocks[0], true, cfg);
  Tensor damped = block_forward(tape, x, model.blocks[0], true, half);
  // Different alpha changes the output; both paths stay finite.
  CHECK(max_abs_diff(full, damped) > 1e-9);
  for (std::size_t i = 0; i < damped.size(); ++i) CHECK(std::isfinite(damped.at(i)));
}

TEST_CASE("model_forward: determinism and context-length error") {
  const ModelConfig cfg = tiny_config();
  TransformerModel model = init_params(cfg, 31);
  Rng rng(19);
  const auto tokens = random_tokens(rng, 10, cfg.vocab_size);
  Tape t1(false), t2(false);
  Tensor a = model_forward(model, tokens, t1);
  Tensor b = model_forward(model, tokens, t2);
  CHECK(bitwise_equal(a, b));
  CHECK(a.shape() == std::vector<std::size_t>{10, cfg.vocab_size});

  const auto big = random_tokens(rng, cfg.context_len + 1, cfg.vocab_size);
  Tape t3(false);
  CHECK_THROWS_AS(model_forward(model, big, t3), std::invalid_argument);
}

TEST_CASE("model_forward: causal logits at position k ignore later tokens") {
  const ModelConfig cfg = tiny_config();  // causal, PE on
  TransformerModel model = init_params(cfg, 41);
  Rng rng(23);
  auto tokens = random_tokens(rng, 12, cfg.vocab_size);
  Tape t1(false);
  Tensor base = model_forward(model, tokens, t1);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t k = 1 + rng.below(10);
    auto perturbed = tokens;
    for (std::size_t i = k + 1; i < perturbed.size(); ++i)
      perturbed[i] = static_cast<int>(rng.below(cfg.vocab_size));
    Tape t2(false);
    Tensor out = model_forward(model, perturbed, t2);
    for (std::size_t i = 0; i <= k; ++i)
      for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
        const bool same = out.at(i, j) == base.at(i, j);
        CHECK(same);
      }
  }
}

TEST_CASE("model_forward: NoPE non-causal final-position invariance") {
  ModelConfig cfg = tiny_config();
  cfg.use_positional_encoding = false;
  cfg.causal_attention = false;
  TransformerModel model = init_params(cfg, 51);
  Rng rng(29);
  const std::size_t len = 12;
  auto tokens = random_tokens(rng, len, cfg.vocab_size);
  Tape t1(false);
  Tensor base = model_forward(model, tokens, t1);
  for (int trial = 0; trial < 10; ++trial) {
    auto sigma = rng.permutation(len - 1);
    auto permuted = tokens;
    for (std::size_t i = 0; i + 1 < len; ++i) permuted[i] = tokens[sigma[i]];
    Tape t2(false);
    Tensor out = model_forward(model, permuted, t2);
    for (std::size_t j = 0; j < cfg.vocab_size; ++j)
      CHECK(std::abs(out.at(len - 1, j) - base.at(len - 1, j)) < 1e-9);
  }
}

TEST_CASE("model_forward: NoPE causal random init generically breaks symmetry") {
  ModelConfig cfg = tiny_config();
  cfg.use_positional_encoding = false;
  cfg.causal_attention = true;
  TransformerModel model = init_params(cfg, 61);
  PermutationTestReport report = check_invariance(model, 12, 20, 71);
  CHECK(report.max_final_logit_deviation > 1e-3);
  CHECK(report.verdict() == "symmetry-broken");
}

TEST_CASE("model_forward_batch matches per-sequence forward") {
  const ModelConfig cfg = tiny_config();
  TransformerModel model = init_params(cfg, 81);
  Rng rng(31);
  const std::size_t batch = 3, seq = 9;
  std::vector<int> packed;
  std::vector<std::vector<int>> each;
  for (std::size_t b = 0; b < batch; ++b) {
    each.push_back(random_tokens(rng, seq, cfg.vocab_size));
    packed.insert(packed.end(), each.back().begin(), each.back().end());
  }
  Tape tape(false);
  Tensor all = model_forward_batch(model, packed, batch, seq, tape);
  for (std::size_t b = 0; b < batch; ++b) {
    Tape t2(false);
    Tensor one = model_forward(model, each[b], t2);
    for (std::size_t i = 0; i < seq; ++i)
      for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
        const bool same = all.at(b * seq + i, j) == one.at(i, j);
        CHECK(same);
      }
  }
}

TEST_CASE("init_params: determinism, seeds, and NoPE table allocation") {
  const ModelConfig cfg = tiny_config();
  TransformerModel m1 = init_params(cfg, 7);
  TransformerModel m2 = init_params(cfg, 7);
  TransformerModel m3 = init_params(cfg, 8);
  CHECK(bitwise_equal(m1.token_embedding, m2.token_embedding));
  CHECK(bitwise_equal(m1.blocks[1].mlp.w_in, m2.blocks[1].mlp.w_in));
  CHECK_FALSE(bitwise_equal(m1.token_embedding, m3.token_embedding));

  ModelConfig nope = cfg;
  nope.use_positional_encoding = false;
  TransformerModel m4 = init_params(nope, 7);
  CHECK_FALSE(m4.positional_embedding.defined());
  CHECK(m1.positional_embedding.defined());

  // Ablation flags follow the config.
  ModelConfig ab = cfg;
  ab.ablated_layers = {2};
  TransformerModel m5 = init_params(ab, 7);
  CHECK(m5.blocks[0].residuals_enabled);
  CHECK_FALSE(m5.blocks[1].residuals_enabled);
}

TEST_CASE("ablated layer with zero weights yields exactly zero output") {
  ModelConfig cfg = tiny_config();
  cfg.ablated_layers = {1};
  TransformerModel model = init_params(cfg, 91);
  zero_block_weights(model.blocks[0]);
  Rng rng(37);
  Tensor x = rand_tensor(rng, {5, cfg.d_model});
  Tape tape(false);
  Tensor out = block_forward(tape, x, model.blocks[0], model.blocks[0].residuals_enabled, cfg);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.at(i) == 0.0);
}

TEST_CASE("full model loss gradient matches finite differences") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_mlp = 12;
  cfg.context_len = 14;
  TransformerModel model = init_params(cfg, 13);
  std::vector<int> tokens{12, 1, 2, 3, 10, 4, 5, 6, 11};
  std::vector<int> targets{1, 2, 3, 10, 4, 5, 6, 11, 9};
  std::vector<unsigned char> mask(tokens.size(), 1);

  auto loss_with = [&](Tape& t, const Tensor& replacement, Tensor& slot) {
    Tensor saved = slot;
    slot = replacement;
    Tensor logits = model_forward(model, tokens, t);
    Tensor loss = cross_entropy(t, logits, targets, mask);
    slot = saved;
    return loss;
  };

  // Check a representative parameter from each family.
  auto fq = [&](Tape& t, const Tensor& v) { return loss_with(t, v, model.blocks[0].attn.w_q[0]); };
  CHECK(grad_check(fq, model.blocks[0].attn.w_q[0].clone(), 1e-5) < 1e-6);
  auto fo = [&](Tape& t, const Tensor& v) { return loss_with(t, v, model.blocks[1].attn.w_o); };
  CHECK(grad_check(fo, model.blocks[1].attn.w_o.clone(), 1e-5) < 1e-6);
  auto fm = [&](Tape& t, const Tensor& v) { return loss_with(t, v, model.blocks[1].mlp.w_out); };
  CHECK(grad_check(fm, model.blocks[1].mlp.w_out.clone(), 1e-5) < 1e-6);
  auto fe = [&](Tape& t, const Tensor& v) { return loss_with(t, v, model.token_embedding); };
  CHECK(grad_check(fe, model.token_embedding.clone(), 1e-5) < 1e-6);
  auto fg = [&](Tape& t, const Tensor& v) { return loss_with(t, v, model.final_ln_gain); };
  CHECK(grad_check(fg, model.final_ln_gain.clone(), 1e-5) < 1e-6);
}
