#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "fedmema/errors.hpp"
#include "fedmema/gradcheck.hpp"
#include "fedmema/tensor.hpp"
#include "test_util.hpp"

using namespace fedmema;
using fedmema::testing::max_abs_diff;
using fedmema::testing::random_tensor;
using fedmema::testing::weighted_sum;

namespace {

// Triple-loop oracle.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Runs the gradient check on an op over `trials` random instances.
void check_op_gradients(const char* name, int trials,
                        const std::function<std::vector<Tensor>(std::mt19937_64&)>& make_inputs,
                        const std::function<Tensor(const std::vector<Tensor>&)>& op) {
  std::mt19937_64 rng(std::hash<std::string>{}(name));
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    ParamStore store;
    auto inputs = make_inputs(rng);
    for (std::size_t i = 0; i < inputs.size(); ++i) store.add("in" + std::to_string(i), inputs[i]);
    const std::uint64_t probe_seed = rng();
    auto report = finite_diff_check(
        [&] {
          std::vector<Tensor> xs;
          for (auto& e : store) xs.push_back(e.tensor);
          return weighted_sum(op(xs), probe_seed);
        },
        store);
    worst = std::max(worst, report.max_rel_error);
  }
  INFO(name);
  CHECK(worst < 1e-6);
}

}  // namespace

TEST_CASE("matmul values") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  CHECK(max_abs_diff(r.data(), m.data()) == 0.0);

  Tensor n({2, 2}, {5, 6, 7, 8});
  auto p = matmul(m, n);
  const std::vector<double> expected{19, 22, 43, 50};
  CHECK(max_abs_diff(p.data(), expected) == 0.0);
  CHECK(max_abs_diff(p.data(), naive_matmul(m, n)) == 0.0);

  std::mt19937_64 rng(1);
  auto z = matmul(Tensor::zeros({3, 2}), random_tensor({2, 5}, rng));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul agrees with triple loop on random shapes") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const std::size_t m = 1 + rng() % 7, k = 1 + rng() % 7, n = 1 + rng() % 7;
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    CHECK(max_abs_diff(matmul(a, b).data(), naive_matmul(a, b)) < 1e-13);
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("softmax values") {
  auto s = softmax(Tensor({2}, {0, 0}), 0);
  CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-15));

  auto t = softmax(Tensor({2}, {std::log(1.0), std::log(3.0)}), 0);
  CHECK(std::abs(t[0] - 0.25) < 1e-15);
  CHECK(std::abs(t[1] - 0.75) < 1e-15);

  auto big = softmax(Tensor({2}, {1000.0, 0.0}), 0);
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
}

TEST_CASE("softmax rows are distributions for large inputs") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t r = 1 + rng() % 5, c = 1 + rng() % 9;
    auto x = random_tensor({r, c, 3}, rng, -1e3, 1e3);
    const std::size_t axis = rng() % 3;
    auto y = softmax(x, axis);
    const auto& s = y.shape();
    const std::size_t outer = axis == 0 ? 1 : (axis == 1 ? s[0] : s[0] * s[1]);
    const std::size_t len = s[axis];
    const std::size_t inner = y.numel() / (outer * len);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          const double v = y[(o * len + j) * inner + i];
          CHECK(v >= 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
  }
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), DimensionError);
}

TEST_CASE("conv2d small cases") {
  SUBCASE("1x1 identity kernel mixes nothing") {
    std::mt19937_64 rng(11);
    auto x = random_tensor({2, 3, 3}, rng);
    Tensor w({2, 2, 1, 1}, {1, 0, 0, 1});
    auto y = conv2d(x, w, Tensor::zeros({2}));
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
  }
  SUBCASE("all-ones 3x3 window sums to 9") {
    auto y = conv2d(Tensor::full({1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}));
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y[0] == 9.0);
  }
  SUBCASE("random conv equals naive oracle") {
    std::mt19937_64 rng(5);
    auto x = random_tensor({2, 4, 4}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({3}, rng);
    for (std::size_t pad : {0, 1, 2}) {
      auto y = conv2d(x, w, b, 1, pad);
      CHECK(max_abs_diff(y.data(), fedmema::testing::naive_conv(x, w, b, 1, pad)) < 1e-12);
    }
    auto y2 = conv2d(x, w, b, 1, 0);
    auto y3 = conv2d(random_tensor({2, 5, 5}, rng), w, b, 2, 1);
    CHECK(y2.shape() == Shape{3, 2, 2});
    CHECK(y3.shape() == Shape{3, 3, 3});
  }
  SUBCASE("batched conv equals per-image conv") {
    std::mt19937_64 rng(9);
    auto x = random_tensor({3, 2, 4, 4}, rng);
    auto w = random_tensor({4, 2, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    auto y = conv2d(x, w, b, 1, 1);
    for (std::size_t n = 0; n < 3; ++n) {
      auto xn = reshape(slice(x, 0, n, n + 1), {2, 4, 4});
      auto ref = fedmema::testing::naive_conv(xn, w, b, 1, 1);
      auto yn = slice(y, 0, n, n + 1);
      CHECK(max_abs_diff(yn.data(), ref) < 1e-12);
    }
  }
  SUBCASE("non-integral output is a configuration error") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1}), 2, 0),
                    ConfigError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1})),
                    DimensionError);
  }
}

TEST_CASE("elementwise suite") {
  auto r = relu(Tensor({2}, {-1, 2}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.0);

  auto up = upsample_nearest2x(Tensor({1, 1}, {1}));
  CHECK(up.shape() == Shape{2, 2});
  for (double v : up.data()) CHECK(v == 1.0);

  auto cat = concat({Tensor::zeros({1, 2, 2}), Tensor::zeros({3, 2, 2})}, 0);
  CHECK(cat.shape() == Shape{4, 2, 2});

  auto pooled = avg_pool2x(Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK(pooled[0] == 2.5);

  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4}), DimensionError);
  CHECK_THROWS_AS(concat({Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 3, 2})}, 0), DimensionError);
}

TEST_CASE("reshape and concat/slice round trips") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 20; ++t) {
    auto x = random_tensor({2, 3, 4}, rng);
    auto back = reshape(reshape(x, {6, 4}), {2, 3, 4});
    CHECK(max_abs_diff(back.data(), x.data()) == 0.0);

    auto a = random_tensor({2, 1 + rng() % 3, 4}, rng);
    auto b = random_tensor({2, 1 + rng() % 3, 4}, rng);
    auto c = concat({a, b}, 1);
    auto a2 = slice(c, 1, 0, a.dim(1));
    auto b2 = slice(c, 1, a.dim(1), c.dim(1));
    CHECK(max_abs_diff(a2.data(), a.data()) == 0.0);
    CHECK(max_abs_diff(b2.data(), b.data()) == 0.0);
  }
}

TEST_CASE("non-finite values abort with the op name") {
  Tensor x({1}, {1e308});
  try {
    scale(x, 10.0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("scale") != std::string::npos);
  }
  CHECK_THROWS_AS(Tensor({1}, {std::nan("")}), NumericError);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    Tensor x = Tensor::full({2, 3}, 0.5, true);
    Tape tape;
    {
      Tape::Scope scope(tape);
      tape.backward(sum(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);
    CHECK(tape.empty());
  }
  SUBCASE("d(x*x) = 2x") {
    Tensor x = Tensor::scalar(3.0, true);
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("reuse accumulates") {
    Tensor x = Tensor::scalar(1.5, true);
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(add(x, x)));
    CHECK(x.grad()[0] == 2.0);
  }
  SUBCASE("untouched leaves stay zero") {
    Tensor x = Tensor::scalar(1.0, true), unused = Tensor::full({3}, 2.0, true);
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(scale(x, 4.0)));
    for (double g : unused.grad()) CHECK(g == 0.0);
  }
  SUBCASE("contract errors") {
    Tensor x = Tensor::full({2}, 1.0, true);
    Tape tape;
    Tape::Scope scope(tape);
    auto y = scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    Tape empty;
    CHECK_THROWS_AS(empty.backward(Tensor::scalar(1.0, true)), ContractError);
  }
  SUBCASE("no tape means no recording") {
    Tensor x = Tensor::full({2}, 1.0, true);
    auto y = scale(x, 2.0);
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("tape is topologically ordered") {
    Tensor x = Tensor::full({2, 2}, 0.3, true);
    Tape tape;
    Tape::Scope scope(tape);
    auto loss = sum(relu(matmul(x, transpose(x))));
    std::vector<const TensorNode*> seen{x.id()};
    for (const auto& rec : tape.records()) {
      for (const auto* in : rec.inputs) {
        CHECK(std::find(seen.begin(), seen.end(), in) != seen.end());
      }
      seen.push_back(rec.output.get());
    }
    (void)loss;
  }
}

TEST_CASE("per-op gradients match finite differences (20 random trials each)") {
  constexpr int kTrials = 20;
  auto shape2 = [](std::mt19937_64& r) { return Shape{1 + r() % 4, 1 + r() % 4}; };

  check_op_gradients(
      "matmul", kTrials,
      [](std::mt19937_64& r) {
        const std::size_t m = 1 + r() % 4, k = 1 + r() % 4, n = 1 + r() % 4;
        return std::vector<Tensor>{random_tensor({m, k}, r), random_tensor({k, n}, r)};
      },
      [](const std::vector<Tensor>& x) { return matmul(x[0], x[1]); });
  check_op_gradients(
      "transpose", kTrials, [&](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor(shape2(r), r)}; },
      [](const std::vector<Tensor>& x) { return transpose(x[0]); });
  check_op_gradients(
      "softmax", kTrials,
      [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({2, 3, 4}, r, -3, 3)}; },
      [](const std::vector<Tensor>& x) { return softmax(x[0], 1); });
  check_op_gradients(
      "conv2d", kTrials,
      [](std::mt19937_64& r) {
        return std::vector<Tensor>{random_tensor({2, 2, 4, 4}, r), random_tensor({3, 2, 3, 3}, r),
                                   random_tensor({3}, r)};
      },
      [](const std::vector<Tensor>& x) { return conv2d(x[0], x[1], x[2], 1, 1); });
  check_op_gradients(
      "conv2d_stride2", kTrials,
      [](std::mt19937_64& r) {
        return std::vector<Tensor>{random_tensor({2, 5, 5}, r), random_tensor({2, 2, 3, 3}, r),
                                   random_tensor({2}, r)};
      },
      [](const std::vector<Tensor>& x) { return conv2d(x[0], x[1], x[2], 2, 1); });
  check_op_gradients(
      "relu", kTrials, [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({3, 4}, r)}; },
      [](const std::vector<Tensor>& x) { return relu(x[0]); });
  check_op_gradients(
      "add", kTrials,
      [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({3, 2}, r), random_tensor({3, 2}, r)}; },
      [](const std::vector<Tensor>& x) { return add(x[0], x[1]); });
  check_op_gradients(
      "mul", kTrials,
      [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({3, 2}, r), random_tensor({3, 2}, r)}; },
      [](const std::vector<Tensor>& x) { return mul(x[0], x[1]); });
  check_op_gradients(
      "scale", kTrials, [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({5}, r)}; },
      [](const std::vector<Tensor>& x) { return scale(x[0], -1.7); });
  check_op_gradients(
      "reshape", kTrials, [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({2, 6}, r)}; },
      [](const std::vector<Tensor>& x) { return reshape(x[0], {3, 4}); });
  check_op_gradients(
      "concat", kTrials,
      [](std::mt19937_64& r) {
        return std::vector<Tensor>{random_tensor({2, 1, 3}, r), random_tensor({2, 2, 3}, r)};
      },
      [](const std::vector<Tensor>& x) { return concat({x[0], x[1]}, 1); });
  check_op_gradients(
      "slice", kTrials, [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({3, 5}, r)}; },
      [](const std::vector<Tensor>& x) { return slice(x[0], 1, 1, 4); });
  check_op_gradients(
      "upsample_nearest2x", kTrials,
      [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({2, 2, 3}, r)}; },
      [](const std::vector<Tensor>& x) { return upsample_nearest2x(x[0]); });
  check_op_gradients(
      "avg_pool2x", kTrials, [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({2, 4, 6}, r)}; },
      [](const std::vector<Tensor>& x) { return avg_pool2x(x[0]); });
  check_op_gradients(
      "mean", kTrials, [](std::mt19937_64& r) { return std::vector<Tensor>{random_tensor({4, 3}, r)}; },
      [](const std::vector<Tensor>& x) { return mean(x[0]); });
}

TEST_CASE("finite_diff_check behaviour") {
  SUBCASE("quadratic is exact") {
    ParamStore store;
    store.add("x", Tensor({3}, {0.5, -1.25, 2.0}));
    auto report = finite_diff_check([&] { return sum(mul(store.at("x"), store.at("x"))); }, store);
    CHECK(report.max_rel_error < 1e-9);
    CHECK(report.checked == 3);
  }
  SUBCASE("a corrupted gradient rule is caught") {
    ParamStore store;
    store.add("x", Tensor({4}, {0.3, -0.7, 1.1, 0.2}));
    // Doubles the input but back-propagates 1.1x the true slope.
    auto bad_double = [](const Tensor& x) {
      std::vector<double> out(x.data().begin(), x.data().end());
      for (auto& v : out) v *= 2.0;
      return make_result("bad_double", x.shape(), std::move(out), {x},
                         [x](std::span<const double> g) mutable {
                           auto gx = x.mutable_grad();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.2 * g[i];
                         });
    };
    auto report = finite_diff_check([&] { return sum(mul(bad_double(store.at("x")), store.at("x"))); }, store);
    CHECK(report.max_rel_error > 1e-2);
  }
}
