// Command-line front end: dataset generation, training, the residual-ablation
// grid, permutation-invariance checks, and activation-correlation analysis.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "tlab/analysis.hpp"
#include "tlab/gemm.hpp"
#include "tlab/parallel.hpp"
#include "tlab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tlab;

namespace {

struct ModelFlags {
  std::size_t layers = 4, heads = 4, d_model = 128, d_mlp = 512, context_len = 14;
  bool nope = false, non_causal = false, untie_head = false, gelu_exact = false;
  std::string ablate;
  double residual_scale = 1.0;
  double ln_eps = 1e-5;
};

struct TrainFlags {
  TrainConfig cfg;
  std::uint64_t init_seed = 0;  // 0: derive from cfg.seed
};

struct DataFlags {
  std::string dir;  // load train.txt/test.txt from here when set
  std::size_t train_size = 20000, test_size = 1000;
  std::uint64_t data_seed = 42;
};

std::set<std::size_t> parse_layer_set(const std::string& text) {
  std::set<std::size_t> layers;
  std::string body = text;
  if (!body.empty() && body.front() == '{') {
    if (body.back() != '}')
      throw std::invalid_argument("bad layer set \"" + text + "\" (expected e.g. {1,2})");
    body = body.substr(1, body.size() - 2);
  }
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const long v = std::stol(item, &pos);
    if (pos != item.size() || v < 1)
      throw std::invalid_argument("bad layer index \"" + item + "\" in set \"" + text + "\"");
    layers.insert(static_cast<std::size_t>(v));
  }
  return layers;
}

std::string layer_set_name(const std::set<std::size_t>& layers) {
  std::string s = "{";
  bool first = true;
  for (std::size_t layer : layers) {
    if (!first) s += ",";
    s += std::to_string(layer);
    first = false;
  }
  return s + "}";
}

ModelConfig model_config_from(const ModelFlags& flags) {
  ModelConfig cfg;
  cfg.n_layers = flags.layers;
  cfg.n_heads = flags.heads;
  cfg.d_model = flags.d_model;
  cfg.d_mlp = flags.d_mlp;
  cfg.context_len = flags.context_len;
  cfg.use_positional_encoding = !flags.nope;
  cfg.causal_attention = !flags.non_causal;
  cfg.ablated_layers = parse_layer_set(flags.ablate);
  cfg.residual_scale = flags.residual_scale;
  cfg.tie_lm_head = !flags.untie_head;
  cfg.gelu_exact = flags.gelu_exact;
  cfg.layer_norm_eps = flags.ln_eps;
  cfg.validate();
  return cfg;
}

void add_model_flags(CLI::App* cmd, ModelFlags& flags) {
  cmd->add_option("--layers", flags.layers, "Transformer layers");
  cmd->add_option("--heads", flags.heads, "Attention heads");
  cmd->add_option("--d-model", flags.d_model, "Residual stream width");
  cmd->add_option("--d-mlp", flags.d_mlp, "MLP hidden width");
  cmd->add_option("--context-len", flags.context_len, "Context window length");
  cmd->add_flag("--nope", flags.nope, "Disable positional encoding");
  cmd->add_flag("--non-causal", flags.non_causal, "Disable the causal attention mask");
  cmd->add_option("--ablate", flags.ablate,
                  "Layers whose residual connections are removed, e.g. 2,3 or {2,3}");
  cmd->add_option("--residual-scale", flags.residual_scale, "Residual scale alpha");
  cmd->add_flag("--untie-head", flags.untie_head, "Untie the LM head from the embedding");
  cmd->add_flag("--gelu-exact", flags.gelu_exact, "Use the erf GELU instead of tanh");
  cmd->add_option("--ln-eps", flags.ln_eps, "Layer norm epsilon");
}

void add_train_flags(CLI::App* cmd, TrainFlags& flags) {
  cmd->add_option("--batch", flags.cfg.batch_size, "Batch size");
  cmd->add_option("--iters", flags.cfg.max_iters, "Training iterations");
  cmd->add_option("--warmup", flags.cfg.warmup_iters, "Warmup iterations");
  cmd->add_option("--eval-interval", flags.cfg.eval_interval, "Iterations between evals");
  cmd->add_option("--eval-samples", flags.cfg.eval_max_samples,
                  "Test samples per interim eval (0 = all)");
  cmd->add_option("--lr", flags.cfg.learning_rate, "Peak learning rate");
  cmd->add_option("--min-lr", flags.cfg.min_lr, "Cosine decay floor");
  cmd->add_option("--wd", flags.cfg.weight_decay, "Weight decay");
  cmd->add_option("--beta1", flags.cfg.beta1, "Adam beta1");
  cmd->add_option("--beta2", flags.cfg.beta2, "Adam beta2");
  cmd->add_option("--adam-eps", flags.cfg.adam_eps, "Adam epsilon");
  cmd->add_option("--clip", flags.cfg.grad_clip, "Global gradient-norm clip");
  cmd->add_option("--seed", flags.cfg.seed, "Run seed (init + batch sampling)");
  cmd->add_option("--init-seed", flags.init_seed, "Model init seed (default: run seed)");
  cmd->add_flag("--answer-only-loss", flags.cfg.answer_only_loss,
                "Mask the loss to answer positions only");
  cmd->add_option("--early-stop", flags.cfg.early_stop_accuracy,
                  "Stop once full-test accuracy reaches this fraction (<=0: off)");
}

void add_data_flags(CLI::App* cmd, DataFlags& flags) {
  cmd->add_option("--data", flags.dir, "Dataset directory holding train.txt/test.txt");
  cmd->add_option("--train-size", flags.train_size, "Generated training samples");
  cmd->add_option("--test-size", flags.test_size, "Generated test samples");
  cmd->add_option("--data-seed", flags.data_seed, "Dataset split seed");
}

DatasetSplit load_or_generate(const DataFlags& flags) {
  if (!flags.dir.empty()) {
    DatasetSplit split;
    split.train = read_samples((fs::path(flags.dir) / "train.txt").string());
    split.test = read_samples((fs::path(flags.dir) / "test.txt").string());
    return split;
  }
  return generate_splits(flags.train_size, flags.test_size, flags.data_seed);
}

json report_to_json(const ModelConfig& mc, const TrainConfig& tc, std::uint64_t init_seed,
                    const TrainReport& report) {
  json j;
  j["config"] = mc.summary();
  j["ablated_layers"] = std::vector<std::size_t>(mc.ablated_layers.begin(),
                                                 mc.ablated_layers.end());
  j["positional_encoding"] = mc.use_positional_encoding;
  j["causal_attention"] = mc.causal_attention;
  j["seed"] = tc.seed;
  j["init_seed"] = init_seed;
  j["batch_size"] = tc.batch_size;
  j["max_iters"] = tc.max_iters;
  j["learning_rate"] = tc.learning_rate;
  j["iterations_run"] = report.iterations_run;
  j["initial_accuracy"] = report.initial_accuracy;
  j["final_accuracy"] = report.final_accuracy;
  j["best_accuracy"] = report.best_accuracy;
  j["final_loss"] = report.final_loss;
  j["failed"] = report.failed;
  j["failure"] = report.failure;
  j["early_stopped"] = report.early_stopped;
  j["wall_seconds"] = report.wall_seconds;
  json evals = json::array();
  for (const auto& rec : report.trace)
    if (rec.test_accuracy >= 0.0)
      evals.push_back({{"iter", rec.iter}, {"loss", rec.loss}, {"accuracy", rec.test_accuracy}});
  j["evals"] = evals;
  return j;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << content;
}

TrainReport run_training(const ModelConfig& mc, const TrainConfig& tc, std::uint64_t init_seed,
                         const DatasetSplit& split, const fs::path& out_dir, bool verbose) {
  fs::create_directories(out_dir);
  TransformerModel model = init_params(mc, init_seed);
  TrainerState state = TrainerState::fresh(tc);
  TrainCallbacks callbacks;
  if (verbose) {
    callbacks.on_eval = [](const IterRecord& rec) {
      std::printf("iter %6zu  loss %.4f  test acc %6.2f%%\n", rec.iter, rec.loss,
                  100.0 * rec.test_accuracy);
      std::fflush(stdout);
    };
  }
  TrainReport report = train(model, split, tc, state, callbacks);
  save_checkpoint((out_dir / "checkpoint.bin").string(), model, state);
  write_text(out_dir / "report.json", report_to_json(mc, tc, init_seed, report).dump(2) + "\n");
  return report;
}

int cmd_gen_data(const DataFlags& data, const std::string& out) {
  DatasetSplit split = generate_splits(data.train_size, data.test_size, data.data_seed);
  fs::create_directories(out);
  write_samples((fs::path(out) / "train.txt").string(), split.train);
  write_samples((fs::path(out) / "test.txt").string(), split.test);
  std::printf("wrote %zu train / %zu test samples (seed %llu) to %s\n", split.train.size(),
              split.test.size(), static_cast<unsigned long long>(data.data_seed), out.c_str());
  return 0;
}

int cmd_train(const ModelFlags& mf, const TrainFlags& tf, const DataFlags& df,
              const std::string& out, const std::string& config_snapshot) {
  const ModelConfig mc = model_config_from(mf);
  TrainConfig tc = tf.cfg;
  tc.validate();
  const std::uint64_t init_seed = tf.init_seed ? tf.init_seed : tc.seed;
  DatasetSplit split = load_or_generate(df);
  fs::create_directories(out);
  write_text(fs::path(out) / "config.ini", config_snapshot);
  std::printf("training %s | %zu train / %zu test | seed %llu\n", mc.summary().c_str(),
              split.train.size(), split.test.size(),
              static_cast<unsigned long long>(tc.seed));
  TrainReport report = run_training(mc, tc, init_seed, split, out, true);
  if (report.failed)
    std::printf("run FAILED (%s); final accuracy recorded as %.2f%%\n", report.failure.c_str(),
                100.0 * report.final_accuracy);
  std::printf("final %.2f%%  best %.2f%%  (%zu iters, %.1fs)\n", 100.0 * report.final_accuracy,
              100.0 * report.best_accuracy, report.iterations_run, report.wall_seconds);
  return 0;
}

struct GridCell {
  bool pe = true;
  std::set<std::size_t> ablated;
  std::string name() const { return (pe ? "pe_" : "nope_") + layer_set_name(ablated); }
};

int cmd_grid(const ModelFlags& mf, const TrainFlags& tf, const DataFlags& df,
             const std::string& cells_arg, const std::string& pe_modes,
             const std::vector<std::uint64_t>& seeds, bool resume, const std::string& out) {
  std::vector<std::set<std::size_t>> sets;
  {
    std::stringstream ss(cells_arg);
    std::string item;
    while (std::getline(ss, item, ';')) sets.push_back(parse_layer_set(item));
    if (sets.empty()) sets.push_back({});
  }
  std::vector<bool> pe_values;
  if (pe_modes == "both")
    pe_values = {true, false};
  else if (pe_modes == "pe")
    pe_values = {true};
  else if (pe_modes == "nope")
    pe_values = {false};
  else
    throw std::invalid_argument("--pe must be pe, nope, or both (got " + pe_modes + ")");
  if (seeds.empty()) throw std::invalid_argument("--seeds must name at least one seed");

  DatasetSplit split = load_or_generate(df);
  const fs::path root(out);
  fs::create_directories(root / "cells");

  for (bool pe : pe_values) {
    for (const auto& ablated : sets) {
      GridCell cell{pe, ablated};
      for (std::uint64_t seed : seeds) {
        const fs::path run_dir = root / "cells" / cell.name() / ("seed" + std::to_string(seed));
        const fs::path done = run_dir / "done";
        if (resume && fs::exists(done)) {
          std::printf("skip %s seed %llu (done)\n", cell.name().c_str(),
                      static_cast<unsigned long long>(seed));
          continue;
        }
        ModelFlags cell_flags = mf;
        cell_flags.nope = !pe;
        cell_flags.ablate = layer_set_name(ablated);
        const ModelConfig mc = model_config_from(cell_flags);
        TrainConfig tc = tf.cfg;
        tc.seed = seed;
        tc.validate();
        std::printf("== cell %s seed %llu ==\n", cell.name().c_str(),
                    static_cast<unsigned long long>(seed));
        std::fflush(stdout);
        TrainReport report = run_training(mc, tc, seed, split, run_dir, true);
        std::printf("   -> final %.2f%%%s\n", 100.0 * report.final_accuracy,
                    report.failed ? " (diverged)" : "");
        write_text(done, "ok\n");
      }
    }
  }

  // Assemble the table: one block per PE mode, columns follow the cell order.
  std::ostringstream table;
  table << "layers_without_rc";
  for (const auto& ablated : sets) table << '\t' << layer_set_name(ablated);
  table << '\n';
  char buf[64];
  for (bool pe : pe_values) {
    const std::string row_name = pe ? "original" : "nope";
    std::vector<std::string> stats = {"min", "max", "avg"};
    std::vector<std::vector<double>> cell_stats;  // per set: min,max,avg
    for (const auto& ablated : sets) {
      GridCell cell{pe, ablated};
      double mn = 1e9, mx = -1e9, total = 0.0;
      std::size_t count = 0;
      for (std::uint64_t seed : seeds) {
        const fs::path report_path =
            root / "cells" / cell.name() / ("seed" + std::to_string(seed)) / "report.json";
        if (!fs::exists(report_path)) continue;
        std::ifstream in(report_path);
        json j = json::parse(in);
        const double acc = 100.0 * j["final_accuracy"].get<double>();
        mn = std::min(mn, acc);
        mx = std::max(mx, acc);
        total += acc;
        ++count;
      }
      if (count == 0) {
        mn = mx = total = 0.0;
        count = 1;
      }
      cell_stats.push_back({mn, mx, total / static_cast<double>(count)});
    }
    for (std::size_t s = 0; s < stats.size(); ++s) {
      table << row_name << "_" << stats[s];
      for (const auto& cs : cell_stats) {
        std::snprintf(buf, sizeof(buf), "%.2f", cs[s]);
        table << '\t' << buf;
      }
      table << '\n';
    }
  }
  write_text(root / "table.tsv", table.str());
  std::printf("grid table written to %s\n", (root / "table.tsv").string().c_str());
  return 0;
}

int cmd_check_invariance(const std::string& ckpt, const ModelFlags& mf, std::uint64_t init_seed,
                         std::size_t prompt_len, std::size_t perms, std::uint64_t seed,
                         const std::string& out) {
  TransformerModel model = ckpt.empty() ? init_params(model_config_from(mf), init_seed)
                                        : load_checkpoint(ckpt).model;
  PermutationTestReport report = check_invariance(model, prompt_len, perms, seed);
  fs::create_directories(out);
  write_report((fs::path(out) / "invariance.txt").string(), report_entries(report));
  std::printf("config: %s\nmax final-logit deviation: %.3e\nmax equivariance deviation: %.3e\n"
              "verdict: %s\n",
              report.config_summary.c_str(), report.max_final_logit_deviation,
              report.max_equivariance_deviation, report.verdict().c_str());
  return 0;
}

int cmd_correlate(const std::string& ckpt, std::size_t layer, const DataFlags& df, bool normalized,
                  bool prompt_only, const std::string& out) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  DatasetSplit split = load_or_generate(df);
  const auto tap = normalized ? ActivationTap::kNormalized : ActivationTap::kPostResidual;
  ActivationTable activations =
      collect_activations(loaded.model, split.test, layer, tap, prompt_only);
  CorrelationMatrix matrix = correlation_matrix(activations, layer);
  BlockStructureMetric metric = block_structure(matrix);
  fs::create_directories(out);
  const fs::path base = fs::path(out) / ("corr_layer" + std::to_string(layer));
  write_csv(matrix, base.string() + ".csv");
  render_heatmap(matrix, base.string() + ".pgm");
  char buf[64];
  std::vector<std::pair<std::string, std::string>> entries;
  entries.emplace_back("layer", std::to_string(layer));
  entries.emplace_back("n_samples", std::to_string(activations.n_samples));
  entries.emplace_back("n_positions", std::to_string(matrix.n_positions));
  entries.emplace_back("n_channels", std::to_string(matrix.n_channels));
  entries.emplace_back("dim", std::to_string(matrix.dim()));
  std::snprintf(buf, sizeof(buf), "%.17g", metric.on_block_mass);
  entries.emplace_back("on_block_mass", buf);
  std::snprintf(buf, sizeof(buf), "%.17g", metric.off_block_mass);
  entries.emplace_back("off_block_mass", buf);
  std::snprintf(buf, sizeof(buf), "%.17g", metric.ratio);
  entries.emplace_back("off_block_ratio", buf);
  write_report(base.string() + ".txt", entries);
  std::printf("layer %zu correlation: dim %zu, off-block ratio %.4f\nwrote %s.{csv,pgm,txt}\n",
              layer, matrix.dim(), metric.ratio, base.string().c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const DataFlags& df) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  DatasetSplit split = load_or_generate(df);
  const double acc = evaluate_exact_match(loaded.model, split.test);
  std::printf("exact-match accuracy: %.2f%% (%zu samples)\n", 100.0 * acc, split.test.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"translab: a desk-scale transformer laboratory for the 3-digit addition task"};
  app.set_config("--config", "", "Config file (key = value, with [subcommand] sections)");
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: hardware)");

  ModelFlags mf;
  TrainFlags tf;
  DataFlags df;
  std::string out = "out";
  std::string cells = "{}";
  std::string pe_modes = "both";
  std::vector<std::uint64_t> seeds{1, 2, 3};
  bool resume = false;
  std::string ckpt;
  std::uint64_t init_seed = 1;
  std::size_t prompt_len = 13, perms = 100;
  std::uint64_t check_seed = 1;
  std::size_t layer = 1;
  bool normalized = false, prompt_only = false;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate train/test dataset files");
  gen->add_option("--train", df.train_size, "Training samples");
  gen->add_option("--test", df.test_size, "Test samples");
  gen->add_option("--seed", df.data_seed, "Split seed");
  gen->add_option("--out", out, "Output directory");

  CLI::App* train_cmd = app.add_subcommand("train", "Train one configuration");
  add_model_flags(train_cmd, mf);
  add_train_flags(train_cmd, tf);
  add_data_flags(train_cmd, df);
  train_cmd->add_option("--out", out, "Output directory");

  CLI::App* grid = app.add_subcommand("grid", "Run the residual-ablation grid");
  add_model_flags(grid, mf);
  add_train_flags(grid, tf);
  add_data_flags(grid, df);
  grid->add_option("--cells", cells, "Semicolon-separated ablation sets, e.g. {};{1};{1,2}");
  grid->add_option("--pe", pe_modes, "pe, nope, or both");
  grid->add_option("--seeds", seeds, "Seeds per cell")->delimiter(',');
  grid->add_flag("--resume", resume, "Skip runs with a done marker");
  grid->add_option("--out", out, "Output directory");

  CLI::App* check = app.add_subcommand("check-invariance", "Permutation invariance verdict");
  add_model_flags(check, mf);
  check->add_option("--ckpt", ckpt, "Checkpoint to load (otherwise fresh init)");
  check->add_option("--init-seed", init_seed, "Fresh-model init seed");
  check->add_option("--prompt-len", prompt_len, "Tested sequence length");
  check->add_option("--perms", perms, "Random (input, permutation) pairs");
  check->add_option("--seed", check_seed, "Sampling seed");
  check->add_option("--out", out, "Output directory");

  CLI::App* corr = app.add_subcommand("correlate", "Activation correlation matrix artifacts");
  corr->add_option("--ckpt", ckpt, "Checkpoint to analyze")->required();
  corr->add_option("--layer", layer, "1-based layer to tap");
  corr->add_flag("--normalized", normalized, "Tap after the consuming layer norm");
  corr->add_flag("--prompt-only", prompt_only, "Use prompt positions only");
  add_data_flags(corr, df);
  corr->add_option("--out", out, "Output directory");

  CLI::App* eval_cmd = app.add_subcommand("eval", "Exact-match accuracy of a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint to evaluate")->required();
  add_data_flags(eval_cmd, df);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    app.exit(e);
    return 2;
  }

  try {
    if (threads > 0) ThreadPool::instance().set_thread_count(threads);
    if (gen->parsed()) return cmd_gen_data(df, out);
    if (train_cmd->parsed())
      return cmd_train(mf, tf, df, out, train_cmd->config_to_str(true, true));
    if (grid->parsed()) return cmd_grid(mf, tf, df, cells, pe_modes, seeds, resume, out);
    if (check->parsed())
      return cmd_check_invariance(ckpt, mf, init_seed, prompt_len, perms, check_seed, out);
    if (corr->parsed()) return cmd_correlate(ckpt, layer, df, normalized, prompt_only, out);
    if (eval_cmd->parsed()) return cmd_eval(ckpt, df);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::length_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
