#include <doctest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"
#include "tlab/tensor.hpp"

using namespace tlab;
using tlab::testing::bitwise_equal;
using tlab::testing::max_abs_diff;
using tlab::testing::rand_tensor;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("matmul: identity and dot product") {
  Tape tape(false);
  Tensor a = Tensor::of({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::of({2, 2}, {1, 0, 0, 1});
  Tensor r = matmul(tape, a, eye);
  CHECK(bitwise_equal(r, a));

  // [[1,2]] x [[3],[4]] = [[11]], the scalar dot-product case.
  Tensor row = Tensor::of({1, 2}, {1, 2});
  Tensor col = Tensor::of({2, 1}, {3, 4});
  CHECK(matmul(tape, row, col).value() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  Tape tape(false);
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH_AS(matmul(tape, a, b),
                       "matmul: inner dimensions disagree: [2 x 3] x [4 x 5]",
                       std::invalid_argument);
}

TEST_CASE("matmul: gradient of sum(a*b) w.r.t. a is b^T row sums") {
  Rng rng(11);
  Tensor a = rand_tensor(rng, {3, 4});
  Tensor b = rand_tensor(rng, {4, 5});
  a.set_requires_grad(true);
  Tape tape;
  Tensor loss = sum(tape, matmul(tape, a, b));
  backward(loss, tape);
  // d/da sum(a*b) = ones * b^T: row i of the gradient is the row sums of b.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 5; ++j) expect += b.at(k, j);
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
    }
  // And the same path passes a central finite-difference check.
  auto f = [&](Tape& t, const Tensor& x) { return sum(t, matmul(t, x, b)); };
  CHECK(grad_check(f, a.clone(), 1e-5) < 1e-6);
}

TEST_CASE("matmul_nt matches matmul against transposed operand") {
  Rng rng(3);
  Tensor a = rand_tensor(rng, {4, 6});
  Tensor bt = rand_tensor(rng, {5, 6});
  Tensor b = Tensor::zeros({6, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) b.at(j, i) = bt.at(i, j);
  Tape tape(false);
  CHECK(max_abs_diff(matmul_nt(tape, a, bt), matmul(tape, a, b)) == 0.0);

  auto f = [&](Tape& t, const Tensor& x) { return sum(t, matmul_nt(t, a, x)); };
  CHECK(grad_check(f, bt.clone(), 1e-5) < 1e-6);
}

TEST_CASE("row_softmax: symmetry, masking, stabilization") {
  Tape tape(false);
  Tensor r1 = row_softmax(tape, Tensor::of({1, 2}, {0, 0}));
  CHECK(r1.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r1.at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

  Tensor r2 = row_softmax(tape, Tensor::of({1, 2}, {5, -kInf}));
  CHECK(r2.at(0, 0) == 1.0);
  CHECK(r2.at(0, 1) == 0.0);  // exactly zero at the masked element

  Tensor r3 = row_softmax(tape, Tensor::of({1, 2}, {1000, 1000}));
  CHECK(r3.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::isfinite(r3.at(0, 1)));
}

TEST_CASE("row_softmax: degenerate and invalid rows") {
  Tape tape(false);
  CHECK_THROWS_AS(row_softmax(tape, Tensor::of({1, 2}, {-kInf, -kInf})), std::domain_error);
  CHECK_THROWS_AS(row_softmax(tape, Tensor::of({1, 2}, {1.0, kInf})), std::invalid_argument);
  CHECK_THROWS_AS(row_softmax(tape, Tensor::of({1, 1}, {std::nan("")})), std::invalid_argument);
}

TEST_CASE("row_softmax: rows sum to 1 within 1e-12, masked entries exactly 0") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rand_tensor(rng, {6, 8}, 3.0);
    // Sprinkle -inf sentinels, keeping at least one finite entry per row.
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 1; j < 8; ++j)
        if (rng.next_double() < 0.3) x.at(i, j) = -kInf;
    Tape tape(false);
    Tensor y = row_softmax(tape, x);
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        s += y.at(i, j);
        if (x.at(i, j) == -kInf) CHECK(y.at(i, j) == 0.0);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm: spec examples") {
  Tape tape(false);
  Tensor gain = Tensor::filled({2}, 1.0);
  Tensor bias = Tensor::zeros({2});

  // Already-normalized input is a fixed point (up to eps).
  Tensor y1 = layer_norm(tape, Tensor::of({1, 2}, {1, -1}), gain, bias, 1e-12);
  CHECK(y1.at(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(y1.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-9));

  // Direct formula evaluation: (2-3)/sqrt(1+1e-5).
  Tensor y2 = layer_norm(tape, Tensor::of({1, 2}, {2, 4}), gain, bias, 1e-5);
  CHECK(y2.at(0, 0) == doctest::Approx(-0.99999500003749969).epsilon(1e-15));
  CHECK(y2.at(0, 1) == doctest::Approx(0.99999500003749969).epsilon(1e-15));

  // Zero-variance row collapses to the bias.
  Tensor b2 = Tensor::filled({2}, 0.25);
  Tensor y3 = layer_norm(tape, Tensor::of({1, 2}, {3, 3}), gain, b2, 1e-5);
  CHECK(y3.at(0, 0) == 0.25);
  CHECK(y3.at(0, 1) == 0.25);
}

TEST_CASE("layer_norm: gradients vs finite differences") {
  Rng rng(5);
  Tensor x = rand_tensor(rng, {3, 6});
  Tensor gain = rand_tensor(rng, {6});
  Tensor bias = rand_tensor(rng, {6});
  auto fx = [&](Tape& t, const Tensor& v) {
    Tensor y = layer_norm(t, v, gain, bias, 1e-5);
    return sum(t, mul(t, y, y));
  };
  CHECK(grad_check(fx, x.clone(), 1e-5) < 1e-6);
  auto fg = [&](Tape& t, const Tensor& v) {
    Tensor y = layer_norm(t, x, v, bias, 1e-5);
    return sum(t, mul(t, y, y));
  };
  CHECK(grad_check(fg, gain.clone(), 1e-5) < 1e-6);
  auto fb = [&](Tape& t, const Tensor& v) {
    Tensor y = layer_norm(t, x, gain, v, 1e-5);
    return sum(t, mul(t, y, y));
  };
  CHECK(grad_check(fb, bias.clone(), 1e-5) < 1e-6);
}

TEST_CASE("gelu: fixed values and both variants") {
  Tape tape(false);
  Tensor x = Tensor::of({4}, {0.0, 10.0, 1.0, -10.0});
  Tensor y = gelu(tape, x);
  CHECK(y.at(0) == 0.0);
  CHECK(y.at(1) == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(y.at(2) == doctest::Approx(0.84119199060827670).epsilon(1e-14));
  CHECK(std::abs(y.at(3)) < 1e-6);

  Tensor ye = gelu(tape, x, /*exact=*/true);
  CHECK(ye.at(2) == doctest::Approx(0.84134474606854295).epsilon(1e-14));
}

TEST_CASE("gelu: gradients vs finite differences") {
  Rng rng(9);
  Tensor x = rand_tensor(rng, {2, 5}, 2.0);
  for (bool exact : {false, true}) {
    auto f = [&](Tape& t, const Tensor& v) {
      Tensor y = gelu(t, v, exact);
      return sum(t, mul(t, y, y));
    };
    CHECK(grad_check(f, x.clone(), 1e-5) < 1e-6);
  }
}

TEST_CASE("embedding_lookup: gather, duplicates, empty, errors") {
  Tape tape(false);
  Tensor table = Tensor::of({3, 2}, {10, 11, 20, 21, 30, 31});
  Tensor first = embedding_lookup(tape, table, {0});
  CHECK(first.at(0, 0) == 10.0);
  CHECK(first.at(0, 1) == 11.0);

  Tensor empty = embedding_lookup(tape, table, {});
  CHECK(empty.shape() == std::vector<std::size_t>{0, 2});

  CHECK_THROWS_WITH_AS(embedding_lookup(tape, table, {3}),
                       "embedding_lookup: id 3 out of range [0, 3)", std::out_of_range);

  // Duplicated row: the backward pass accumulates twice into row 2.
  Tensor t2 = table.clone();
  t2.set_requires_grad(true);
  Tape rec;
  Tensor loss = sum(rec, embedding_lookup(rec, t2, {2, 2}));
  backward(loss, rec);
  CHECK(t2.grad()[2 * 2 + 0] == 2.0);
  CHECK(t2.grad()[2 * 2 + 1] == 2.0);
  CHECK(t2.grad()[0] == 0.0);

  Rng rng(13);
  Tensor w = rand_tensor(rng, {2, 2});
  auto f = [&](Tape& t, const Tensor& v) {
    return sum(t, mul(t, embedding_lookup(t, v, {2, 2}), w));
  };
  CHECK(grad_check(f, table, 1e-5) < 1e-6);
}

TEST_CASE("cross_entropy: uniform, near-one-hot, mask semantics") {
  Tape tape(false);
  Tensor uniform = Tensor::zeros({1, 13});
  Tensor l1 = cross_entropy(tape, uniform, {4}, {1});
  CHECK(l1.value() == doctest::Approx(2.5649493574615367).epsilon(1e-15));

  Tensor hot = Tensor::zeros({1, 13});
  hot.at(0, 7) = 30.0;
  CHECK(cross_entropy(tape, hot, {7}, {1}).value() < 1e-11);  // 12*e^-30

  // Two positions, one masked: the loss equals the unmasked position's value.
  Tensor two = Tensor::zeros({2, 13});
  two.at(0, 0) = 3.0;
  two.at(1, 5) = -2.0;
  Tensor masked = cross_entropy(tape, two, {0, 5}, {1, 0});
  Tensor alone = cross_entropy(tape, Tensor::of({1, 13}, std::vector<double>(
                                          two.values().begin(), two.values().begin() + 13)),
                               {0}, {1});
  CHECK(masked.value() == alone.value());

  CHECK_THROWS_AS(cross_entropy(tape, two, {0, 5}, {0, 0}), std::domain_error);
  CHECK_THROWS_AS(cross_entropy(tape, two, {0}, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(tape, two, {0, 13}, {1, 1}), std::out_of_range);
}

TEST_CASE("cross_entropy: gradient vs finite differences") {
  Rng rng(17);
  Tensor logits = rand_tensor(rng, {4, 6}, 2.0);
  std::vector<int> targets{1, 0, 5, 3};
  std::vector<unsigned char> mask{1, 0, 1, 1};
  auto f = [&](Tape& t, const Tensor& v) { return cross_entropy(t, v, targets, mask); };
  CHECK(grad_check(f, logits, 1e-5) < 1e-6);
}

TEST_CASE("backward: closed forms and contract") {
  // loss = sum(x^2) -> grad = 2x.
  Tensor x = Tensor::of({3}, {1, 2, 3}, true);
  Tape tape;
  Tensor loss = sum(tape, mul(tape, x, x));
  backward(loss, tape);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  CHECK(x.grad()[2] == 6.0);

  // Non-scalar loss is a contract error.
  Tape t2;
  Tensor y = mul(t2, x, x);
  CHECK_THROWS_AS(backward(y, t2), std::invalid_argument);

  // requires_grad=false receives no gradient.
  Tensor frozen = Tensor::of({2}, {1, 2});
  Tensor live = Tensor::of({2}, {3, 4}, true);
  Tape t3;
  Tensor l3 = sum(t3, mul(t3, frozen, live));
  backward(l3, t3);
  CHECK_FALSE(frozen.has_grad());
  CHECK(live.has_grad());
}

TEST_CASE("backward: fan-out accumulates exactly") {
  Tensor x = Tensor::of({2}, {1.5, -2.0}, true);
  Tape tape;
  Tensor y = add(tape, x, x);
  Tensor loss = sum(tape, y);
  backward(loss, tape);
  CHECK(x.grad()[0] == 2.0);  // exactly 2 * d(loss)/dy
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("backward: bit-identical gradients across identical tapes") {
  Rng rng(23);
  Tensor x0 = rand_tensor(rng, {4, 4});
  Tensor w0 = rand_tensor(rng, {4, 4});
  auto run = [&](std::vector<double>& gx, std::vector<double>& gw) {
    Tensor x = x0.clone().set_requires_grad(true);
    Tensor w = w0.clone().set_requires_grad(true);
    Tape tape;
    Tensor loss = sum(tape, row_softmax(tape, matmul(tape, x, w)));
    backward(loss, tape);
    gx.assign(x.grad(), x.grad() + x.size());
    gw.assign(w.grad(), w.grad() + w.size());
  };
  std::vector<double> gx1, gw1, gx2, gw2;
  run(gx1, gw1);
  run(gx2, gw2);
  CHECK(std::memcmp(gx1.data(), gx2.data(), gx1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(gw1.data(), gw2.data(), gw1.size() * sizeof(double)) == 0);
}

TEST_CASE("backward: composite softmax pipeline matches finite differences") {
  Rng rng(29);
  Tensor w = rand_tensor(rng, {5, 5});
  auto f = [&](Tape& t, const Tensor& v) {
    return sum(t, row_softmax(t, matmul(t, v, w)));
  };
  CHECK(grad_check(f, rand_tensor(rng, {3, 5}), 1e-5) < 1e-6);
}

TEST_CASE("grad_check: linear and quadratic oracles") {
  auto fsum = [](Tape& t, const Tensor& v) { return sum(t, v); };
  Rng rng(31);
  CHECK(grad_check(fsum, rand_tensor(rng, {4}), 1e-5) < 1e-9);  // pure FD rounding noise

  auto fsq = [](Tape& t, const Tensor& v) { return sum(t, mul(t, v, v)); };
  CHECK(grad_check(fsq, Tensor::of({3}, {1, 2, 3}), 1e-5) < 1e-8);
}

TEST_CASE("attention primitives: fused scores/mix match composed ops bitwise") {
  Rng rng(37);
  const std::size_t batch = 3, seq = 5, dh = 4;
  Tensor q = rand_tensor(rng, {batch * seq, dh});
  Tensor k = rand_tensor(rng, {batch * seq, dh});
  Tensor v = rand_tensor(rng, {batch * seq, dh});
  const double scl = 0.5;
  for (bool causal : {false, true}) {
    Tape tape(false);
    Tensor s = attn_scores(tape, q, k, batch, seq, scl, causal);
    Tensor p = row_softmax(tape, s);
    Tensor mix = attn_mix(tape, p, v, batch, seq, causal);
    // Reference: per-sequence dense ops.
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t j = 0; j < seq; ++j) {
          double expect;
          if (causal && j > i) {
            expect = 0.0;
            CHECK(p.at(b * seq + i, j) == 0.0);  // mask exactness
            continue;
          }
          expect = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            expect += q.at(b * seq + i, c) * k.at(b * seq + j, c);
          CHECK(s.at(b * seq + i, j) == doctest::Approx(scl * expect).epsilon(1e-12));
        }
        for (std::size_t c = 0; c < dh; ++c) {
          double expect = 0.0;
          for (std::size_t j = 0; j < seq; ++j) expect += p.at(b * seq + i, j) * v.at(b * seq + j, c);
          CHECK(mix.at(b * seq + i, c) == doctest::Approx(expect).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("attention primitives: gradients vs finite differences") {
  Rng rng(41);
  const std::size_t batch = 2, seq = 4, dh = 3;
  Tensor q = rand_tensor(rng, {batch * seq, dh});
  Tensor k = rand_tensor(rng, {batch * seq, dh});
  Tensor v = rand_tensor(rng, {batch * seq, dh});
  Tensor w = rand_tensor(rng, {batch * seq, dh});
  for (bool causal : {false, true}) {
    auto pipeline = [&](Tape& t, const Tensor& qv, const Tensor& kv, const Tensor& vv) {
      Tensor s = attn_scores(t, qv, kv, batch, seq, 0.7, causal);
      Tensor p = row_softmax(t, s);
      Tensor y = attn_mix(t, p, vv, batch, seq, causal);
      return sum(t, mul(t, y, w));
    };
    auto fq = [&](Tape& t, const Tensor& x) { return pipeline(t, x, k, v); };
    auto fk = [&](Tape& t, const Tensor& x) { return pipeline(t, q, x, v); };
    auto fv = [&](Tape& t, const Tensor& x) { return pipeline(t, q, k, x); };
    CHECK(grad_check(fq, q.clone(), 1e-5) < 1e-6);
    CHECK(grad_check(fk, k.clone(), 1e-5) < 1e-6);
    CHECK(grad_check(fv, v.clone(), 1e-5) < 1e-6);
  }
}

TEST_CASE("concat_cols: layout and gradients") {
  Rng rng(43);
  Tensor a = rand_tensor(rng, {3, 2});
  Tensor b = rand_tensor(rng, {3, 4});
  Tape tape(false);
  Tensor c = concat_cols(tape, {a, b});
  CHECK(c.shape() == std::vector<std::size_t>{3, 6});
  CHECK(c.at(1, 0) == a.at(1, 0));
  CHECK(c.at(1, 2) == b.at(1, 0));

  Tensor w = rand_tensor(rng, {3, 6});
  auto f = [&](Tape& t, const Tensor& x) {
    return sum(t, mul(t, concat_cols(t, {x, b}), w));
  };
  CHECK(grad_check(f, a.clone(), 1e-5) < 1e-6);
}

TEST_CASE("property: every differentiable op passes grad_check on random small tensors") {
  Rng rng(47);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t m = 2 + rng.below(6);  // dims <= 8
    const std::size_t n = 2 + rng.below(6);
    const std::size_t k = 2 + rng.below(6);
    Tensor a = rand_tensor(rng, {m, k});
    Tensor b = rand_tensor(rng, {k, n});
    Tensor w = rand_tensor(rng, {m, n});
    Tensor g = rand_tensor(rng, {n});
    Tensor h = rand_tensor(rng, {n});

    auto f_matmul = [&](Tape& t, const Tensor& x) {
      return sum(t, mul(t, matmul(t, x, b), w));
    };
    CHECK(grad_check(f_matmul, a.clone(), 1e-5) < 1e-6);

    auto f_add_scale = [&](Tape& t, const Tensor& x) {
      return sum(t, scale(t, add(t, x, w), 1.7));
    };
    CHECK(grad_check(f_add_scale, rand_tensor(rng, {m, n}), 1e-5) < 1e-6);

    auto f_softmax = [&](Tape& t, const Tensor& x) {
      return sum(t, mul(t, row_softmax(t, x), w));
    };
    CHECK(grad_check(f_softmax, rand_tensor(rng, {m, n}, 2.0), 1e-5) < 1e-6);

    auto f_ln = [&](Tape& t, const Tensor& x) {
      Tensor y = layer_norm(t, x, g, h, 1e-5);
      return sum(t, mul(t, y, y));
    };
    CHECK(grad_check(f_ln, rand_tensor(rng, {m, n}), 1e-5) < 1e-6);

    auto f_gelu = [&](Tape& t, const Tensor& x) {
      return sum(t, mul(t, gelu(t, x), w));
    };
    CHECK(grad_check(f_gelu, rand_tensor(rng, {m, n}), 1e-5) < 1e-6);
  }
}
