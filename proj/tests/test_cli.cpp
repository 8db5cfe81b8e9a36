// End-to-end checks of the command-line front end. The binary path comes from
// the TLAB_BIN environment variable (set by CTest).

#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "tlab/addition.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;
};

std::string binary_path() {
  const char* env = std::getenv("TLAB_BIN");
  REQUIRE_MESSAGE(env != nullptr, "TLAB_BIN must point at the tlab binary");
  return env;
}

RunResult run_cli(const std::string& args) {
  const std::string cmd = binary_path() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult result;
  std::array<char, 512> buf;
  while (fgets(buf.data(), buf.size(), pipe)) result.output += buf.data();
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("tlab_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Small-but-trainable settings shared by the CLI runs below.
const std::string kTinyModel = "--layers 1 --heads 2 --d-model 16 --d-mlp 24";
const std::string kTinyTrain =
    " --batch 8 --iters 12 --warmup 2 --eval-interval 6 --train-size 128 --test-size 32";

}  // namespace

TEST_CASE("cli: gen-data is deterministic, disjoint, and validates capacity") {
  const fs::path dir = fresh_dir("gendata");
  const std::string out1 = (dir / "d1").string(), out2 = (dir / "d2").string();
  RunResult r1 = run_cli("gen-data --train 300 --test 60 --seed 9 --out " + out1);
  CHECK(r1.exit_code == 0);
  RunResult r2 = run_cli("gen-data --train 300 --test 60 --seed 9 --out " + out2);
  CHECK(r2.exit_code == 0);
  CHECK(slurp(fs::path(out1) / "train.txt") == slurp(fs::path(out2) / "train.txt"));
  CHECK(slurp(fs::path(out1) / "test.txt") == slurp(fs::path(out2) / "test.txt"));

  // Disjointness verified on load.
  auto train = tlab::read_samples((fs::path(out1) / "train.txt").string());
  auto test = tlab::read_samples((fs::path(out1) / "test.txt").string());
  CHECK(train.size() == 300);
  for (const auto& t : test)
    for (const auto& s : train) CHECK((s.a != t.a || s.b != t.b));

  RunResult overflow = run_cli("gen-data --train 2000000 --test 1 --out " + (dir / "x").string());
  CHECK(overflow.exit_code == 2);
}

TEST_CASE("cli: train writes checkpoint, report, and config; bad ablate exits 2") {
  const fs::path dir = fresh_dir("train");
  RunResult r = run_cli("train " + kTinyModel + kTinyTrain + " --seed 3 --out " + dir.string());
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "checkpoint.bin"));
  CHECK(fs::exists(dir / "report.json"));
  CHECK(fs::exists(dir / "config.ini"));
  CHECK(slurp(dir / "report.json").find("\"final_accuracy\"") != std::string::npos);

  RunResult bad = run_cli("train " + kTinyModel + kTinyTrain + " --ablate 9 --out " +
                          (dir / "bad").string());
  CHECK(bad.exit_code == 2);
  CHECK(bad.output.find("ablated layer 9") != std::string::npos);
}

TEST_CASE("cli: eval and check-invariance run against a trained checkpoint") {
  const fs::path dir = fresh_dir("evalinv");
  // Two layers: a single causal NoPE layer is genuinely prefix-invariant at
  // the final position (symmetric aggregation of per-token embeddings);
  // causal symmetry breaking needs depth >= 2.
  RunResult tr = run_cli("train --layers 2 --heads 2 --d-model 16 --d-mlp 24" + kTinyTrain +
                         " --nope --seed 5 --out " + dir.string());
  REQUIRE(tr.exit_code == 0);
  const std::string ckpt = (dir / "checkpoint.bin").string();

  RunResult ev = run_cli("eval --ckpt " + ckpt + " --train-size 16 --test-size 16");
  CHECK(ev.exit_code == 0);
  CHECK(ev.output.find("exact-match accuracy") != std::string::npos);

  RunResult inv = run_cli("check-invariance --ckpt " + ckpt +
                          " --prompt-len 12 --perms 10 --out " + dir.string());
  CHECK(inv.exit_code == 0);
  CHECK(inv.output.find("verdict: symmetry-broken") != std::string::npos);  // causal NoPE
  CHECK(slurp(dir / "invariance.txt").find("verdict: symmetry-broken") != std::string::npos);

  RunResult missing = run_cli("eval --ckpt no_such_file.bin --test-size 4 --train-size 4");
  CHECK(missing.exit_code == 1);
}

TEST_CASE("cli: check-invariance on a fresh non-causal NoPE model is invariant") {
  const fs::path dir = fresh_dir("inv2");
  RunResult inv = run_cli("check-invariance " + kTinyModel +
                          " --nope --non-causal --prompt-len 12 --perms 25 --out " +
                          dir.string());
  CHECK(inv.exit_code == 0);
  CHECK(inv.output.find("verdict: invariant") != std::string::npos);
}

TEST_CASE("cli: correlate emits csv, pgm, and metrics with consistent dimensions") {
  const fs::path dir = fresh_dir("corr");
  RunResult tr = run_cli("train " + kTinyModel + kTinyTrain + " --seed 7 --out " + dir.string());
  REQUIRE(tr.exit_code == 0);
  RunResult co = run_cli("correlate --ckpt " + (dir / "checkpoint.bin").string() +
                         " --layer 1 --train-size 16 --test-size 40 --out " + dir.string());
  CHECK(co.exit_code == 0);
  CHECK(fs::exists(dir / "corr_layer1.csv"));
  CHECK(fs::exists(dir / "corr_layer1.pgm"));
  CHECK(fs::exists(dir / "corr_layer1.txt"));
  // dim = positions * channels = 14 * 16.
  const std::string metrics = slurp(dir / "corr_layer1.txt");
  CHECK(metrics.find("dim: 224") != std::string::npos);
  std::ifstream pgm(dir / "corr_layer1.pgm", std::ios::binary);
  std::string magic, w, h;
  pgm >> magic >> w >> h;
  CHECK(magic == "P5");
  CHECK(w == "224");
  CHECK(h == "224");
}

TEST_CASE("cli: grid runs cells, resumes, and emits a schema-stable table") {
  const fs::path dir = fresh_dir("grid");
  const std::string grid_args = "grid " + kTinyModel + kTinyTrain +
                                " --cells \"{};{1}\" --pe both --seeds 1,2 --out " + dir.string();
  RunResult g1 = run_cli(grid_args);
  CHECK(g1.exit_code == 0);
  REQUIRE(fs::exists(dir / "table.tsv"));
  const std::string table = slurp(dir / "table.tsv");
  CHECK(table.find("layers_without_rc\t{}\t{1}") == 0);
  CHECK(table.find("original_min") != std::string::npos);
  CHECK(table.find("original_avg") != std::string::npos);
  CHECK(table.find("nope_max") != std::string::npos);
  CHECK(fs::exists(dir / "cells" / "pe_{}" / "seed1" / "report.json"));
  CHECK(fs::exists(dir / "cells" / "nope_{1}" / "seed2" / "done"));

  // Accuracy cells are percent with two decimals.
  std::size_t lines = 0;
  std::stringstream ss(table);
  std::string line;
  while (std::getline(ss, line)) ++lines;
  CHECK(lines == 7);  // header + 3 stats x 2 modes

  RunResult g2 = run_cli(grid_args + " --resume");
  CHECK(g2.exit_code == 0);
  CHECK(g2.output.find("skip pe_{} seed 1 (done)") != std::string::npos);
  CHECK(g2.output.find("skip nope_{1} seed 2 (done)") != std::string::npos);
}

TEST_CASE("cli: config file drives a run and is snapshotted for provenance") {
  const fs::path dir = fresh_dir("config");
  {
    std::ofstream cfg(dir / "run.ini");
    cfg << "[train]\n"
        << "layers=1\nheads=2\nd-model=16\nd-mlp=24\n"
        << "batch=8\niters=10\nwarmup=2\neval-interval=5\n"
        << "train-size=64\ntest-size=16\nseed=11\n"
        << "out=" << (dir / "run_out").string() << "\n";
  }
  RunResult r = run_cli("--config " + (dir / "run.ini").string() + " train");
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "run_out" / "checkpoint.bin"));
  const std::string snapshot = slurp(dir / "run_out" / "config.ini");
  CHECK(snapshot.find("iters=10") != std::string::npos);
  CHECK(snapshot.find("d-model=16") != std::string::npos);
}
