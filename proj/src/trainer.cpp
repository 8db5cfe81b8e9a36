#include "tlab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "tlab/rng.hpp"

namespace tlab {

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
  if (min_lr < 0.0) throw std::invalid_argument("TrainConfig: min_lr must be >= 0");
  if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("TrainConfig: betas must be in [0, 1)");
  if (adam_eps <= 0.0) throw std::invalid_argument("TrainConfig: adam_eps must be positive");
  if (grad_clip <= 0.0) throw std::invalid_argument("TrainConfig: grad_clip must be positive");
  if (eval_interval < 1) throw std::invalid_argument("TrainConfig: eval_interval must be >= 1");
  if (warmup_iters > max_iters)
    throw std::invalid_argument("TrainConfig: warmup_iters " + std::to_string(warmup_iters) +
                                " exceeds max_iters " + std::to_string(max_iters));
}

double lr_at(std::size_t iter, const TrainConfig& config) {
  if (iter < config.warmup_iters)
    return config.learning_rate * static_cast<double>(iter) /
           static_cast<double>(config.warmup_iters);
  if (iter >= config.max_iters) return config.min_lr;
  const double span = static_cast<double>(config.max_iters - config.warmup_iters);
  const double progress = static_cast<double>(iter - config.warmup_iters) / span;
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return config.min_lr + (config.learning_rate - config.min_lr) * cosine;
}

double clip_gradients(const std::vector<std::pair<std::string, Tensor>>& params,
                      double max_norm) {
  double sq = 0.0;  // fixed parameter order, sequential accumulation
  for (const auto& [name, tensor] : params) {
    if (!tensor.has_grad()) continue;
    const double* g = tensor.grad();
    for (std::size_t i = 0; i < tensor.size(); ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& [name, tensor] : params) {
      if (!tensor.has_grad()) continue;
      Tensor t = tensor;
      double* g = t.grad();
      for (std::size_t i = 0; i < t.size(); ++i) g[i] *= factor;
    }
  }
  return norm;
}

void adamw_step(const std::vector<std::pair<std::string, Tensor>>& params,
                OptimizerState& state, const TrainConfig& config, double lr) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].second.size(), 0.0);
      state.v[i].assign(params[i].second.size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adamw_step: optimizer state holds " +
                                std::to_string(state.m.size()) + " moments for " +
                                std::to_string(params.size()) + " parameters");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, tensor] = params[pi];
    if (state.m[pi].size() != tensor.size())
      throw std::invalid_argument("adamw_step: moment shape mismatch for " + name);
    Tensor t = tensor;
    if (!t.has_grad()) t.ensure_grad();  // untouched parameters behave as zero-gradient
    double* p = t.data();
    const double* g = t.grad();
    double* m = state.m[pi].data();
    double* v = state.v[pi].data();
    const bool decay = t.ndim() >= 2;  // no decay on layer-norm gains/biases
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw std::runtime_error("adamw_step: non-finite gradient in parameter " + name);
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + config.adam_eps);
      if (decay) p[i] -= lr * config.weight_decay * p[i];
    }
  }
}

namespace {

// x = seq[0..n-2], y = seq[1..n-1]; answer-only masking keeps the positions
// whose target is an answer token.
void append_training_rows(const std::vector<int>& seq, bool answer_only, std::vector<int>& xs,
                          std::vector<int>& ys, std::vector<unsigned char>& mask) {
  const std::size_t n = seq.size();
  const std::size_t answer_start = 1 + AdditionSample::kPromptLen;  // index in seq
  for (std::size_t i = 0; i + 1 < n; ++i) {
    xs.push_back(seq[i]);
    ys.push_back(seq[i + 1]);
    mask.push_back(answer_only ? (i + 1 >= answer_start ? 1 : 0) : 1);
  }
}

}  // namespace

TrainReport train(TransformerModel& model, const DatasetSplit& split, const TrainConfig& config,
                  TrainerState& state, const TrainCallbacks& callbacks) {
  config.validate();
  model.config.validate();
  if (split.train.empty()) throw std::invalid_argument("train: empty training split");
  if (split.test.empty()) throw std::invalid_argument("train: empty test split");
  if (model.config.vocab_size != vocab::kSize)
    throw std::invalid_argument("train: model vocab_size " +
                                std::to_string(model.config.vocab_size) + " != task vocabulary " +
                                std::to_string(vocab::kSize));
  if (model.config.context_len < AdditionSample::kSequenceLen)
    throw std::invalid_argument("train: context_len " + std::to_string(model.config.context_len) +
                                " below rendered sample length " +
                                std::to_string(AdditionSample::kSequenceLen));

  const auto t_start = std::chrono::steady_clock::now();
  TrainReport report;
  auto params = model.named_parameters();
  Rng rng(0);
  rng.set_state(state.rng_state);

  std::vector<std::vector<int>> train_seqs;
  train_seqs.reserve(split.train.size());
  for (const AdditionSample& s : split.train) train_seqs.push_back(s.full_sequence());
  const std::size_t seq_positions = AdditionSample::kSequenceLen - 1;

  std::vector<AdditionSample> eval_subset = split.test;
  if (config.eval_max_samples > 0 && config.eval_max_samples < eval_subset.size())
    eval_subset.resize(config.eval_max_samples);

  auto evaluate = [&](bool full) {
    return evaluate_exact_match(model, full ? split.test : eval_subset);
  };
  auto finish = [&](double final_acc) {
    report.final_accuracy = final_acc;
    report.best_accuracy = std::max(report.best_accuracy, final_acc);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    state.rng_state = rng.state();
  };

  if (state.iteration == 0) {
    report.initial_accuracy = evaluate(false);
    report.best_accuracy = report.initial_accuracy;
    IterRecord rec{0, 0.0, 0.0, report.initial_accuracy};
    if (callbacks.on_eval) callbacks.on_eval(rec);
    if (config.max_iters == 0) {
      finish(report.initial_accuracy);
      return report;
    }
  }

  for (std::size_t iter = state.iteration; iter < config.max_iters; ++iter) {
    // Assemble the batch (sampled with replacement).
    std::vector<int> xs, ys;
    std::vector<unsigned char> mask;
    xs.reserve(config.batch_size * seq_positions);
    ys.reserve(config.batch_size * seq_positions);
    mask.reserve(config.batch_size * seq_positions);
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::size_t pick = static_cast<std::size_t>(rng.below(train_seqs.size()));
      append_training_rows(train_seqs[pick], config.answer_only_loss, xs, ys, mask);
    }

    const double lr = lr_at(iter, config);
    IterRecord rec{iter + 1, 0.0, lr, -1.0};
    // Divergence — a non-finite loss, gradient, or activation — is a
    // reported outcome, not a crash. A diverged model is not evaluated.
    try {
      model.zero_grads();
      Tape tape;
      Tensor logits = model_forward_batch(model, xs, config.batch_size, seq_positions, tape);
      Tensor loss = cross_entropy(tape, logits, ys, mask);
      rec.loss = loss.value();
      if (!std::isfinite(rec.loss))
        throw std::runtime_error("non-finite loss at iteration " + std::to_string(iter + 1));
      backward(loss, tape);
      clip_gradients(params, config.grad_clip);
      adamw_step(params, state.opt, config, lr);
      state.iteration = iter + 1;
      state.rng_state = rng.state();
      report.final_loss = rec.loss;
      ++report.iterations_run;

      const bool last_iter = iter + 1 == config.max_iters;
      if ((iter + 1) % config.eval_interval == 0 && !last_iter) {
        rec.test_accuracy = evaluate(false);
        report.best_accuracy = std::max(report.best_accuracy, rec.test_accuracy);
        if (callbacks.on_eval) callbacks.on_eval(rec);
        if (config.early_stop_accuracy > 0.0 &&
            rec.test_accuracy >= config.early_stop_accuracy) {
          // Confirm on the full test set before stopping.
          const double full_acc = evaluate(true);
          report.best_accuracy = std::max(report.best_accuracy, full_acc);
          if (full_acc >= config.early_stop_accuracy) {
            report.early_stopped = true;
            rec.test_accuracy = full_acc;
            report.trace.push_back(rec);
            finish(full_acc);
            return report;
          }
        }
      }
    } catch (const std::exception& e) {
      report.failed = true;
      report.failure = e.what();
      report.trace.push_back(rec);
      state.iteration = iter + 1;
      finish(0.0);
      return report;
    }
    report.trace.push_back(rec);
    if (callbacks.request_stop && callbacks.request_stop(rec)) break;
  }

  double final_acc = evaluate(true);
  if (!report.trace.empty() && report.trace.back().iter == state.iteration)
    report.trace.back().test_accuracy = final_acc;
  IterRecord final_rec{state.iteration, report.final_loss, lr_at(state.iteration, config),
                       final_acc};
  if (callbacks.on_eval) callbacks.on_eval(final_rec);
  finish(final_acc);
  return report;
}

}  // namespace tlab
