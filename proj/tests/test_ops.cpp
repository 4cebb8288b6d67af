#include "stecnn/gradcheck.hpp"
#include "stecnn/ops.hpp"
#include "stecnn/random.hpp"

#include <doctest.h>

#include <cmath>

using namespace stecnn;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(std::move(shape), lo, hi, rng);
}

// Keeps values away from relu kinks so central differences stay valid.
Tensor<double> random_tensor_off_kink(Shape shape, Rng& rng, double margin = 1e-3) {
  auto t = random_tensor(std::move(shape), rng);
  for (Index i = 0; i < t.size(); ++i) {
    if (std::abs(t[i]) < margin) t[i] = t[i] < 0 ? -margin : margin;
  }
  return t;
}

}  // namespace

TEST_SUITE("conv1d") {
  TEST_CASE("circular two-tap example") {
    auto x = Tensor<double>::from_flat({1, 1, 4}, {1, 2, 3, 4});
    auto w = Tensor<double>::from_flat({1, 1, 2}, {1, 1});
    auto y = conv1d(x, w, Padding::Circular);
    CHECK(y(0, 0, 0) == 3);
    CHECK(y(0, 0, 1) == 5);
    CHECK(y(0, 0, 2) == 7);
    CHECK(y(0, 0, 3) == 5);
  }

  TEST_CASE("zero padding truncates the wrap") {
    auto x = Tensor<double>::from_flat({1, 1, 4}, {1, 2, 3, 4});
    auto w = Tensor<double>::from_flat({1, 1, 2}, {1, 1});
    auto y = conv1d(x, w, Padding::Zero);
    CHECK(y(0, 0, 3) == 4);  // second tap reads outside and contributes zero
    CHECK(y(0, 0, 0) == 3);
  }

  TEST_CASE("single-tap identity kernel") {
    Rng rng(11);
    auto x = random_tensor({2, 3, 8}, rng);
    auto w = Tensor<double>::zeros({3, 3, 1});
    for (Index c = 0; c < 3; ++c) w(c, c, 0) = 1.0;
    auto y = conv1d(x, w, Padding::Circular);
    CHECK((y.values() - x.values()).abs().maxCoeff() == 0.0);
  }

  TEST_CASE("zero input maps to zero output") {
    auto x = Tensor<double>::zeros({1, 2, 6});
    Rng rng(3);
    auto w = random_tensor({4, 2, 3}, rng);
    auto y = conv1d(x, w, Padding::Circular);
    CHECK(y.values().abs().maxCoeff() == 0.0);
  }

  TEST_CASE("linearity in the signal") {
    Rng rng(7);
    auto x = random_tensor({2, 2, 10}, rng);
    auto z = random_tensor({2, 2, 10}, rng);
    auto w = random_tensor({3, 2, 3}, rng);
    const double a = 1.7, b = -0.4;
    auto combo = add(scale(x, a), scale(z, b));
    auto lhs = conv1d(combo, w, Padding::Circular);
    auto rhs = add(scale(conv1d(x, w, Padding::Circular), a),
                   scale(conv1d(z, w, Padding::Circular), b));
    CHECK((lhs.values() - rhs.values()).abs().maxCoeff() < 1e-12);
  }

  TEST_CASE("channel mismatch and oversized kernels rejected") {
    auto x = Tensor<double>::zeros({1, 2, 4});
    CHECK_THROWS(conv1d(x, Tensor<double>::zeros({1, 3, 2}), Padding::Circular));
    CHECK_THROWS(conv1d(x, Tensor<double>::zeros({1, 2, 5}), Padding::Circular));
  }

  TEST_CASE("gradient check both paddings") {
    Rng rng(23);
    auto x = random_tensor({2, 2, 7}, rng);
    auto w0 = random_tensor({3, 2, 3}, rng);
    for (Padding pad : {Padding::Circular, Padding::Zero}) {
      CHECK(fd_gradcheck([&](const Tensor<double>& v) { return sum(mul(conv1d(v, w0, pad),
                                                                        conv1d(v, w0, pad))); },
                         x) < 1e-6);
      CHECK(fd_gradcheck(
                [&](const Tensor<double>& v) {
                  auto y = conv1d(x, v, pad, 2);
                  return sum(mul(y, y));
                },
                w0) < 1e-6);
    }
  }
}

TEST_SUITE("affine") {
  TEST_CASE("identity map") {
    auto x = Tensor<double>::from_flat({1, 2}, {1, 0});
    auto w = Tensor<double>::from_flat({2, 2}, {1, 0, 0, 1});
    auto b = Tensor<double>::zeros({2});
    auto y = affine(x, w, b);
    CHECK(y(0, 0) == 1);
    CHECK(y(0, 1) == 0);
  }

  TEST_CASE("row sum plus bias") {
    auto x = Tensor<double>::from_flat({1, 2}, {1, 2});
    auto w = Tensor<double>::from_flat({2, 1}, {1, 1});
    auto b = Tensor<double>::from_flat({1}, {3});
    CHECK(affine(x, w, b)(0, 0) == 6);
  }

  TEST_CASE("bias gradient equals the batch count") {
    Tape<double>::active().reset();
    Rng rng(5);
    auto x = random_tensor({4, 3}, rng);
    auto w = random_tensor({3, 2}, rng);
    auto b = Tensor<double>::zeros({2}, true);
    auto loss = sum(affine(x, w, b));
    backward(loss);
    CHECK(b.grad()[0] == doctest::Approx(4.0));
    CHECK(b.grad()[1] == doctest::Approx(4.0));
    Tape<double>::active().reset();
  }

  TEST_CASE("dimension mismatch rejected") {
    auto x = Tensor<double>::zeros({1, 3});
    CHECK_THROWS(affine(x, Tensor<double>::zeros({2, 2}), Tensor<double>::zeros({2})));
  }

  TEST_CASE("gradient check") {
    Rng rng(17);
    auto x = random_tensor({3, 4}, rng);
    auto w = random_tensor({4, 2}, rng);
    auto b = random_tensor({2}, rng);
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) {
                auto y = affine(v, w, b);
                return sum(mul(y, y));
              },
              x) < 1e-7);
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) {
                auto y = affine(x, v, b);
                return sum(mul(y, y));
              },
              w) < 1e-7);
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) {
                auto y = affine(x, w, v);
                return sum(mul(y, y));
              },
              b) < 1e-7);
  }
}

TEST_SUITE("batch_norm1d") {
  TEST_CASE("two-point batch standardizes to plus/minus one") {
    auto x = Tensor<double>::from_flat({2, 1}, {1, 3});
    auto gamma = Tensor<double>::ones({1});
    auto beta = Tensor<double>::zeros({1});
    auto rm = Tensor<double>::zeros({1});
    auto rv = Tensor<double>::ones({1});
    auto y = batch_norm1d(x, gamma, beta, rm, rv, /*training=*/true);
    CHECK(y(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y(1, 0) == doctest::Approx(1.0).epsilon(1e-4));
    // Running stats moved toward the batch statistics with momentum 0.1.
    CHECK(rm[0] == doctest::Approx(0.2));
    CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 1.0));
  }

  TEST_CASE("constant batch maps to (approximately) zero") {
    auto x = Tensor<double>::filled({3, 2}, 5.0);
    auto gamma = Tensor<double>::ones({2});
    auto beta = Tensor<double>::zeros({2});
    auto rm = Tensor<double>::zeros({2});
    auto rv = Tensor<double>::ones({2});
    auto y = batch_norm1d(x, gamma, beta, rm, rv, true);
    CHECK(y.values().abs().maxCoeff() < 1e-9);
  }

  TEST_CASE("already standardized batch is nearly unchanged") {
    auto x = Tensor<double>::from_flat({2, 1}, {-1, 1});
    auto gamma = Tensor<double>::ones({1});
    auto beta = Tensor<double>::zeros({1});
    auto rm = Tensor<double>::zeros({1});
    auto rv = Tensor<double>::ones({1});
    auto y = batch_norm1d(x, gamma, beta, rm, rv, true);
    CHECK(y(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y(1, 0) == doctest::Approx(1.0).epsilon(1e-4));
  }

  TEST_CASE("eval mode uses running statistics") {
    auto x = Tensor<double>::from_flat({2, 1}, {1, 3});
    auto gamma = Tensor<double>::ones({1});
    auto beta = Tensor<double>::zeros({1});
    auto rm = Tensor<double>::from_flat({1}, {2.0});
    auto rv = Tensor<double>::from_flat({1}, {4.0});
    auto y = batch_norm1d(x, gamma, beta, rm, rv, /*training=*/false);
    CHECK(y(0, 0) == doctest::Approx(-0.5).epsilon(1e-4));
    CHECK(y(1, 0) == doctest::Approx(0.5).epsilon(1e-4));
    CHECK(rm[0] == 2.0);  // eval mode leaves running stats alone
  }

  TEST_CASE("gradient check, train and eval, channel inner axes") {
    Rng rng(29);
    auto x = random_tensor({3, 2, 5}, rng);
    auto gamma = random_tensor({2}, rng, 0.5, 1.5);
    auto beta = random_tensor({2}, rng);
    for (bool training : {true, false}) {
      auto rm = Tensor<double>::zeros({2});
      auto rv = Tensor<double>::ones({2});
      CHECK(fd_gradcheck(
                [&](const Tensor<double>& v) {
                  auto rm2 = rm.clone();
                  auto rv2 = rv.clone();
                  auto y = batch_norm1d(v, gamma, beta, rm2, rv2, training);
                  return sum(mul(y, y));
                },
                x) < 1e-6);
      CHECK(fd_gradcheck(
                [&](const Tensor<double>& v) {
                  auto rm2 = rm.clone();
                  auto rv2 = rv.clone();
                  auto y = batch_norm1d(x, v, beta, rm2, rv2, training);
                  return sum(mul(y, y));
                },
                gamma) < 1e-6);
      CHECK(fd_gradcheck(
                [&](const Tensor<double>& v) {
                  auto rm2 = rm.clone();
                  auto rv2 = rv.clone();
                  auto y = batch_norm1d(x, gamma, v, rm2, rv2, training);
                  return sum(mul(y, y));
                },
                beta) < 1e-6);
    }
  }
}

TEST_SUITE("relu and pooling") {
  TEST_CASE("relu definition") {
    auto x = Tensor<double>::from_flat({3}, {-1, 0, 2});
    auto y = relu(x);
    CHECK(y[0] == 0);
    CHECK(y[1] == 0);
    CHECK(y[2] == 2);
  }

  TEST_CASE("max over axis 0") {
    auto x = Tensor<double>::from_flat({2, 2}, {1, 2, 3, 0});
    auto y = max_pool_axis(x, 0);
    CHECK(y[0] == 3);
    CHECK(y[1] == 2);
  }

  TEST_CASE("invalid axis rejected") {
    auto x = Tensor<double>::zeros({2, 2});
    CHECK_THROWS(max_pool_axis(x, 2));
    CHECK_THROWS(mean_pool_axis(x, -1));
  }

  TEST_CASE("max backward routes to the first maximal element") {
    Tape<double>::active().reset();
    auto x = Tensor<double>::from_flat({3}, {2, 2, 1}, true);
    auto loss = sum(max_pool_axis(x, 0));
    backward(loss);
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 0.0);
    Tape<double>::active().reset();
  }

  TEST_CASE("gradient check away from kinks and ties") {
    Rng rng(31);
    auto x = random_tensor_off_kink({2, 3, 4}, rng);
    CHECK(fd_gradcheck([](const Tensor<double>& v) { return sum(mul(relu(v), relu(v))); }, x) <
          1e-6);
    CHECK(fd_gradcheck(
              [](const Tensor<double>& v) {
                auto y = max_pool_axis(v, 1);
                return sum(mul(y, y));
              },
              x) < 1e-6);
    CHECK(fd_gradcheck(
              [](const Tensor<double>& v) {
                auto y = mean_pool_axis(v, 2);
                return sum(mul(y, y));
              },
              x) < 1e-6);
  }
}

TEST_SUITE("softmax_cross_entropy") {
  TEST_CASE("uniform logits over 17 classes give ln 17") {
    auto logits = Tensor<double>::zeros({3, 17});
    std::vector<int> labels{0, 5, 16};
    auto loss = softmax_cross_entropy(logits, labels);
    CHECK(loss.value() == doctest::Approx(std::log(17.0)).epsilon(1e-9));
  }

  TEST_CASE("two-class closed form") {
    auto logits = Tensor<double>::from_flat({1, 2}, {0.0, std::log(3.0)});
    std::vector<int> labels{1};
    auto loss = softmax_cross_entropy(logits, labels);
    CHECK(loss.value() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  }

  TEST_CASE("dominant true-class logit drives the loss to zero") {
    auto logits = Tensor<double>::from_flat({1, 3}, {50.0, 0.0, 0.0});
    std::vector<int> labels{0};
    CHECK(softmax_cross_entropy(logits, labels).value() < 1e-9);
  }

  TEST_CASE("label out of range rejected") {
    auto logits = Tensor<double>::zeros({1, 4});
    std::vector<int> bad{4};
    CHECK_THROWS(softmax_cross_entropy(logits, bad));
    std::vector<int> neg{-1};
    CHECK_THROWS(softmax_cross_entropy(logits, neg));
  }

  TEST_CASE("gradient equals softmax minus onehot over batch") {
    Tape<double>::active().reset();
    auto logits = Tensor<double>::from_flat({2, 3}, {0.3, -0.1, 0.2, 1.0, 0.0, -1.0}, true);
    std::vector<int> labels{2, 0};
    auto loss = softmax_cross_entropy(logits, labels);
    backward(loss);
    auto p = softmax_rows(logits);
    for (Index b = 0; b < 2; ++b)
      for (Index k = 0; k < 3; ++k) {
        const double expect = (p[b * 3 + k] - (labels[(std::size_t)b] == k ? 1.0 : 0.0)) / 2.0;
        CHECK(logits.grad()[b * 3 + k] == doctest::Approx(expect).epsilon(1e-12));
      }
    Tape<double>::active().reset();
  }

  TEST_CASE("gradient check") {
    Rng rng(41);
    auto logits = random_tensor({4, 5}, rng);
    std::vector<int> labels{0, 2, 4, 1};
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) { return softmax_cross_entropy(v, labels); }, logits) <
          1e-8);
  }
}

TEST_SUITE("l2_normalize_rows") {
  TEST_CASE("rows have unit norm") {
    Rng rng(43);
    auto x = random_tensor({5, 7}, rng);
    auto y = l2_normalize_rows(x);
    for (Index b = 0; b < 5; ++b) {
      CHECK(std::sqrt(y.values().segment(b * 7, 7).square().sum()) ==
            doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("gradient check") {
    Rng rng(47);
    auto x = random_tensor({3, 4}, rng, 0.5, 1.5);
    auto w = random_tensor({3, 4}, rng);
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) { return sum(mul(l2_normalize_rows(v), w)); }, x) <
          1e-7);
  }
}

TEST_SUITE("reshape") {
  TEST_CASE("flatten and gradient passthrough") {
    Tape<double>::active().reset();
    auto x = Tensor<double>::from_flat({2, 2}, {1, 2, 3, 4}, true);
    auto y = flatten_batch(reshape(x, {1, 2, 2}));
    CHECK(y.shape() == Shape{1, 4});
    auto loss = sum(mul(y, y));
    backward(loss);
    CHECK(x.grad()[3] == doctest::Approx(8.0));
    Tape<double>::active().reset();
    CHECK_THROWS(reshape(x, {3, 2}));
  }
}
