#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "diger/gradcheck.hpp"
#include "diger/rng.hpp"
#include "diger/tape.hpp"
#include "doctest.h"

using namespace diger;

namespace {

Tensor rand_tensor(std::vector<int> shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  RngStream rng(seed, {0x74657374ull});
  uint64_t c = 0;
  for (auto& x : t.values()) x = lo + (hi - lo) * rng.uniform(c++);
  return t;
}

constexpr double kTol = 1e-4;
constexpr double kStep = 1e-5;

}  // namespace

TEST_CASE("matmul shape contract and errors") {
  Tape t;
  Tensor a = rand_tensor({2, 3}, 1), b = rand_tensor({3, 4}, 2);
  Tensor c = matmul(t, a, b);
  CHECK(c.shape() == std::vector<int>{2, 4});
  double manual = 0.0;
  for (int k = 0; k < 3; ++k) manual += a.at(1, k) * b.at(k, 2);
  CHECK(c.at(1, 2) == doctest::Approx(manual).epsilon(1e-12));
  CHECK_THROWS_WITH_AS(matmul(t, a, rand_tensor({4, 2}, 3)), doctest::Contains("matmul"), std::invalid_argument);
  CHECK_THROWS_AS(add(t, a, b), std::invalid_argument);
}

TEST_CASE("softmax of all-zero row is uniform and rows sum to one") {
  Tape t;
  Tensor x = Tensor::zeros({4});
  Tensor y = softmax(t, x);
  for (int i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(0.25).epsilon(1e-15));

  Tensor r = rand_tensor({5, 7}, 11, -8.0, 8.0);
  Tensor s = softmax(t, r);
  for (int i = 0; i < 5; ++i) {
    double acc = 0.0;
    for (int j = 0; j < 7; ++j) acc += s.at(i, j);
    CHECK(std::abs(acc - 1.0) <= 1e-12);
  }
}

TEST_CASE("log_softmax equals log of softmax elementwise") {
  Tape t;
  Tensor x = rand_tensor({3, 6}, 21, -5.0, 5.0);
  Tensor ls = log_softmax(t, x);
  Tensor s = softmax(t, x);
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(std::abs(ls.values()[i] - std::log(s.values()[i])) <= 1e-9);
}

TEST_CASE("stop_gradient blocks the backward path") {
  Tape t;
  Tensor x = rand_tensor({3}, 5);
  Tensor y = sum(t, mul(t, x, stop_gradient(t, x)));
  t.backward(y);
  // d/dx of x * sg(x) is sg(x) alone
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(x.at(i)).epsilon(1e-12));
}

TEST_CASE("backward of sum of squares is 2x and accumulates across calls") {
  Tape t;
  Tensor x = Tensor::from({3}, {1, 2, 3});
  Tensor loss = sum(t, mul(t, x, x));
  t.backward(loss);
  CHECK(x.grad() == std::vector<double>{2, 4, 6});
  t.backward(loss);  // no zeroing: doubles
  CHECK(x.grad() == std::vector<double>{4, 8, 12});
}

TEST_CASE("gradient of an unrelated tensor stays zero") {
  Tape t;
  Tensor x = rand_tensor({4}, 6), z = rand_tensor({4}, 7);
  t.backward(sum(t, mul(t, x, x)));
  for (double g : z.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape t;
  Tensor x = rand_tensor({3}, 8);
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("backward is deterministic for an identical tape") {
  const auto run = [] {
    Tape t;
    Tensor x = rand_tensor({4, 4}, 42), w = rand_tensor({4, 4}, 43);
    Tensor y = sum(t, mul(t, softmax(t, matmul(t, x, w)), x));
    t.backward(y);
    return std::make_pair(x.grad(), w.grad());
  };
  auto [gx1, gw1] = run();
  auto [gx2, gw2] = run();
  CHECK(gx1 == gx2);
  CHECK(gw1 == gw2);
}

TEST_CASE("finite_diff_check on closed-form cases") {
  ScalarFn sqnorm = [](Tape& t, const Tensor& x) { return sum(t, mul(t, x, x)); };
  CHECK(finite_diff_check(sqnorm, Tensor::from({2}, {1, 1}), 1e-5) < 1e-6);

  ScalarFn lsm0 = [](Tape& t, const Tensor& x) {
    Tensor y = log_softmax(t, x);
    return sum(t, mul(t, y, y));
  };
  CHECK(finite_diff_check(lsm0, rand_tensor({5}, 9), 1e-5) < 1e-4);

  // Blocked path: analytic gradient through sg is zero on that path.
  ScalarFn blocked = [](Tape& t, const Tensor& x) {
    Tensor c = Tensor::from({3}, {0.3, -0.7, 0.2});
    return sum(t, mul(t, x, stop_gradient(t, c)));
  };
  CHECK(finite_diff_check(blocked, rand_tensor({3}, 10), 1e-5) < 1e-6);
  CHECK_THROWS_AS(finite_diff_check(sqnorm, Tensor::from({2}, {1, 1}), 0.0), std::invalid_argument);
}

TEST_CASE("every primitive passes finite-difference checks on 10 seeds") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    // matmul: both operands
    Tensor b23 = rand_tensor({2, 3}, seed * 100 + 1);
    ScalarFn f1 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, matmul(t, x, b23), matmul(t, x, b23))); };
    CHECK(finite_diff_check(f1, rand_tensor({3, 2}, seed * 100 + 2), kStep) < kTol);
    Tensor a32 = rand_tensor({3, 2}, seed * 100 + 3);
    ScalarFn f2 = [&](Tape& t, const Tensor& x) { return sum(t, matmul(t, a32, x)); };
    CHECK(finite_diff_check(f2, rand_tensor({2, 4}, seed * 100 + 4), kStep) < kTol);

    // matmul vector forms
    ScalarFn f3 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, matmul(t, b23, x), matmul(t, b23, x))); };
    CHECK(finite_diff_check(f3, rand_tensor({3}, seed * 100 + 5), kStep) < kTol);
    ScalarFn f4 = [&](Tape& t, const Tensor& x) { return sum(t, matmul(t, x, b23)); };
    CHECK(finite_diff_check(f4, rand_tensor({2}, seed * 100 + 6), kStep) < kTol);

    // matmul_nt
    Tensor nt = rand_tensor({4, 3}, seed * 100 + 7);
    ScalarFn f5 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, matmul_nt(t, x, nt), matmul_nt(t, x, nt))); };
    CHECK(finite_diff_check(f5, rand_tensor({2, 3}, seed * 100 + 8), kStep) < kTol);

    // add / sub / mul / scale / bias-add
    Tensor c24 = rand_tensor({2, 4}, seed * 100 + 9);
    ScalarFn f6 = [&](Tape& t, const Tensor& x) {
      return sum(t, mul(t, add(t, sub(t, x, c24), scale(t, x, 0.7)), mul(t, x, c24)));
    };
    CHECK(finite_diff_check(f6, rand_tensor({2, 4}, seed * 100 + 10), kStep) < kTol);
    ScalarFn f7 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, add(t, c24, x), add(t, c24, x))); };
    CHECK(finite_diff_check(f7, rand_tensor({4}, seed * 100 + 11), kStep) < kTol);

    // softmax / log_softmax / masked_softmax
    Tensor w6 = rand_tensor({6}, seed * 100 + 12);
    ScalarFn f8 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, softmax(t, x), w6)); };
    CHECK(finite_diff_check(f8, rand_tensor({6}, seed * 100 + 13), kStep) < kTol);
    ScalarFn f9 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, log_softmax(t, x), w6)); };
    CHECK(finite_diff_check(f9, rand_tensor({6}, seed * 100 + 14), kStep) < kTol);
    std::vector<uint8_t> mask = {1, 0, 1, 1, 0, 1, 1, 1};
    Tensor w24 = rand_tensor({2, 4}, seed * 100 + 15);
    ScalarFn f10 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, masked_softmax(t, x, mask), w24)); };
    CHECK(finite_diff_check(f10, rand_tensor({2, 4}, seed * 100 + 16), kStep) < kTol);

    // gather_rows with a repeated index, row, slice_cols, concat_cols
    ScalarFn f11 = [&](Tape& t, const Tensor& x) {
      Tensor g = gather_rows(t, x, {2, 0, 2});
      Tensor left = slice_cols(t, g, 0, 2), right = slice_cols(t, g, 2, 2);
      return sum(t, mul(t, concat_cols(t, {right, left}), g));
    };
    CHECK(finite_diff_check(f11, rand_tensor({3, 4}, seed * 100 + 17), kStep) < kTol);
    ScalarFn f12 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, row(t, x, 1), row(t, x, 1))); };
    CHECK(finite_diff_check(f12, rand_tensor({3, 4}, seed * 100 + 18), kStep) < kTol);

    // stack_rows / concat
    ScalarFn f13 = [&](Tape& t, const Tensor& x) {
      Tensor r0 = row(t, x, 0), r1 = row(t, x, 1);
      Tensor stacked = stack_rows(t, {r1, r0});
      return sum(t, mul(t, stacked, stacked));
    };
    CHECK(finite_diff_check(f13, rand_tensor({2, 3}, seed * 100 + 19), kStep) < kTol);
    ScalarFn f14 = [&](Tape& t, const Tensor& x) {
      Tensor joined = concat(t, {x, scale(t, x, -0.5)});
      return sum(t, mul(t, joined, joined));
    };
    CHECK(finite_diff_check(f14, rand_tensor({3}, seed * 100 + 20), kStep) < kTol);

    // layer_norm: input, gain, bias
    Tensor gain = rand_tensor({5}, seed * 100 + 21, 0.5, 1.5);
    Tensor bias = rand_tensor({5}, seed * 100 + 22);
    Tensor ln_in = rand_tensor({3, 5}, seed * 100 + 23);
    ScalarFn f15 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, layer_norm(t, x, gain, bias), ln_in)); };
    CHECK(finite_diff_check(f15, rand_tensor({3, 5}, seed * 100 + 24), kStep) < kTol);
    ScalarFn f16 = [&](Tape& t, const Tensor& g) { return sum(t, mul(t, layer_norm(t, ln_in, g, bias), ln_in)); };
    CHECK(finite_diff_check(f16, gain, kStep) < kTol);

    // relu away from the kink; gelu anywhere
    Tensor relu_pt = rand_tensor({6}, seed * 100 + 25, 0.2, 1.2);
    for (std::size_t i = 0; i < 3; ++i) relu_pt.values()[i] *= -1.0;
    ScalarFn f17 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, relu(t, x), w6)); };
    CHECK(finite_diff_check(f17, relu_pt, kStep) < kTol);
    ScalarFn f18 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, gelu(t, x), w6)); };
    CHECK(finite_diff_check(f18, rand_tensor({6}, seed * 100 + 26, -2.0, 2.0), kStep) < kTol);

    // squared_error_sum both sides
    ScalarFn f19 = [&](Tape& t, const Tensor& x) { return squared_error_sum(t, x, c24); };
    CHECK(finite_diff_check(f19, rand_tensor({2, 4}, seed * 100 + 27), kStep) < kTol);
    ScalarFn f20 = [&](Tape& t, const Tensor& x) { return squared_error_sum(t, c24, x); };
    CHECK(finite_diff_check(f20, rand_tensor({2, 4}, seed * 100 + 28), kStep) < kTol);

    // cross entropies
    ScalarFn f21 = [&](Tape& t, const Tensor& x) { return cross_entropy_indices(t, x, {1, 3}); };
    CHECK(finite_diff_check(f21, rand_tensor({2, 5}, seed * 100 + 29), kStep) < kTol);
    Tensor softt = rand_tensor({2, 5}, seed * 100 + 30, 0.05, 1.0);
    ScalarFn f22 = [&](Tape& t, const Tensor& x) { return cross_entropy_soft(t, x, softt); };
    CHECK(finite_diff_check(f22, rand_tensor({2, 5}, seed * 100 + 31), kStep) < kTol);
    Tensor lg = rand_tensor({2, 5}, seed * 100 + 32);
    ScalarFn f23 = [&](Tape& t, const Tensor& x) { return cross_entropy_soft(t, lg, x); };
    CHECK(finite_diff_check(f23, softt, kStep) < kTol);

    // straight_through: backward gradient equals the soft-path gradient. The
    // forward value follows `hard`, so build the check with hard == soft value
    // to make the FD oracle see the soft path.
    Tensor hard = rand_tensor({4}, seed * 100 + 33);
    ScalarFn f25 = [&](Tape& t, const Tensor& x) {
      Tensor soft = mul(t, x, x);
      Tensor st = straight_through(t, stop_gradient(t, soft), soft);
      return sum(t, mul(t, st, hard));
    };
    CHECK(finite_diff_check(f25, rand_tensor({4}, seed * 100 + 35), kStep) < kTol);

    // neg_sqdist both arguments
    Tensor entries = rand_tensor({5, 3}, seed * 100 + 36);
    Tensor w5 = rand_tensor({5}, seed * 100 + 37);
    ScalarFn f26 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, neg_sqdist(t, x, entries), w5)); };
    CHECK(finite_diff_check(f26, rand_tensor({3}, seed * 100 + 38), kStep) < kTol);
    Tensor point = rand_tensor({3}, seed * 100 + 39);
    ScalarFn f27 = [&](Tape& t, const Tensor& x) { return sum(t, mul(t, neg_sqdist(t, point, x), w5)); };
    CHECK(finite_diff_check(f27, entries, kStep) < kTol);
  }
}

TEST_CASE("random 3-layer composition matches finite differences") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Tensor w1 = rand_tensor({6, 5}, seed * 7 + 1);
    Tensor w2 = rand_tensor({5, 4}, seed * 7 + 2);
    Tensor w3 = rand_tensor({4}, seed * 7 + 3);
    ScalarFn net = [&](Tape& t, const Tensor& x) {
      Tensor h1 = gelu(t, matmul(t, x, w1));
      Tensor h2 = softmax(t, matmul(t, h1, w2));
      return sum(t, mul(t, matmul(t, h2, stack_rows(t, {w3, w3, w3, w3})), h2));
    };
    CHECK(finite_diff_check(net, rand_tensor({2, 6}, seed * 7 + 4), kStep) < kTol);
  }
}

TEST_CASE("straight_through forward is a bitwise copy of hard") {
  Tape t;
  Tensor hard = rand_tensor({7}, 3);
  Tensor soft = rand_tensor({7}, 4);
  Tensor st = straight_through(t, hard, soft);
  CHECK(st.values() == hard.values());
  t.backward(sum(t, st));
  for (double g : hard.grad()) CHECK(g == 0.0);
  for (double g : soft.grad()) CHECK(g == 1.0);
}

TEST_CASE("masked_softmax rejects fully masked rows and zeroes masked entries") {
  Tape t;
  Tensor x = rand_tensor({2, 3}, 12);
  std::vector<uint8_t> ok = {1, 0, 1, 0, 1, 0};
  Tensor y = masked_softmax(t, x, ok);
  CHECK(y.at(0, 1) == 0.0);
  CHECK(y.at(0, 0) + y.at(0, 2) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<uint8_t> dead = {0, 0, 0, 1, 1, 1};
  CHECK_THROWS_AS(masked_softmax(t, x, dead), std::invalid_argument);
}
