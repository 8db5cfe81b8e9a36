#ifndef TLAB_TRAINER_HPP_
#define TLAB_TRAINER_HPP_

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tlab/addition.hpp"
#include "tlab/model.hpp"

namespace tlab {

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t max_iters = 5000;
  std::size_t warmup_iters = 100;
  std::size_t eval_interval = 250;
  double learning_rate = 1e-3;
  double min_lr = 1e-4;  // cosine decay floor
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm
  std::uint64_t seed = 1;
  bool answer_only_loss = false;
  // Stop once full-test accuracy reaches this value; <= 0 disables.
  double early_stop_accuracy = 0.0;
  // Evaluate on the first N test samples during training; 0 = full test set.
  // The final evaluation always uses the full test set.
  std::size_t eval_max_samples = 0;

  void validate() const;
};

// Per-parameter Adam moments, aligned with TransformerModel::named_parameters.
struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

// Everything beyond the parameters needed to continue a run bit-exactly.
struct TrainerState {
  OptimizerState opt;
  std::uint64_t iteration = 0;
  std::uint64_t rng_state = 0;

  static TrainerState fresh(const TrainConfig& config) {
    TrainerState s;
    s.rng_state = config.seed;
    return s;
  }
};

struct IterRecord {
  std::size_t iter = 0;
  double loss = 0.0;
  double lr = 0.0;
  double test_accuracy = -1.0;  // < 0: no evaluation at this step
};

struct TrainReport {
  std::vector<IterRecord> trace;  // one record per iteration
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  double final_loss = 0.0;
  std::size_t iterations_run = 0;
  bool failed = false;        // divergence (non-finite loss/gradients)
  std::string failure;
  bool early_stopped = false;
  double wall_seconds = 0.0;
};

struct TrainCallbacks {
  std::function<void(const IterRecord&)> on_eval;
  // Called after every iteration; return true to stop cleanly (the schedule
  // keeps counting to max_iters, so a checkpointed run resumes bit-exactly).
  std::function<bool(const IterRecord&)> request_stop;
};

// Linear warmup 0 -> lr over warmup_iters (lr_at(0) == 0), then cosine decay
// to min_lr at max_iters.
double lr_at(std::size_t iter, const TrainConfig& config);

// Bias-corrected Adam update plus decoupled weight decay p -= lr*wd*p.
// Decay applies to matrix-shaped parameters only (embeddings, projections),
// not to layer-norm gains/biases. Throws std::runtime_error naming the
// parameter on a non-finite gradient.
void adamw_step(const std::vector<std::pair<std::string, Tensor>>& params,
                OptimizerState& state, const TrainConfig& config, double lr);

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_gradients(const std::vector<std::pair<std::string, Tensor>>& params,
                      double max_norm);

// Deterministic AdamW training loop: batches sampled with replacement from
// the seeded generator, exact-match evaluation every eval_interval plus a
// final full-test evaluation. Divergence is a reported outcome, not a crash.
TrainReport train(TransformerModel& model, const DatasetSplit& split,
                  const TrainConfig& config, TrainerState& state,
                  const TrainCallbacks& callbacks = {});

// ---- checkpointing ----------------------------------------------------------
// Binary little-endian format, byte layout documented in docs/checkpoint.md.
// save -> load -> save is byte-identical.

void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const TrainerState& state);

struct LoadedCheckpoint {
  TransformerModel model;
  TrainerState state;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace tlab

#endif  // TLAB_TRAINER_HPP_
