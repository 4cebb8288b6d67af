#include "stecnn/gradcheck.hpp"
#include "stecnn/group.hpp"
#include "stecnn/random.hpp"

#include <doctest.h>

using namespace stecnn;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  return Tensor<double>::uniform(std::move(shape), -1.0, 1.0, rng);
}

GroupElement random_element(Rng& rng) {
  // Integer translations and dyadic scales, the lattice the layers discretize.
  const std::int64_t x = static_cast<std::int64_t>(rng.uniform_index(41)) - 20;
  const int j = static_cast<int>(rng.uniform_index(4));
  GroupElement g = GroupElement::from_lattice(x, j);
  if (rng.bernoulli(0.5)) g = inverse(g);  // include non-lattice rationals
  return g;
}

}  // namespace

TEST_SUITE("group law") {
  TEST_CASE("identity, inverse, associativity on random elements") {
    Rng rng(101);
    const GroupElement e = GroupElement::identity();
    for (int i = 0; i < 100; ++i) {
      const GroupElement g = random_element(rng);
      const GroupElement h = random_element(rng);
      const GroupElement k = random_element(rng);
      CHECK(compose(g, e) == g);
      CHECK(compose(e, g) == g);
      CHECK(compose(g, inverse(g)) == e);
      CHECK(compose(inverse(g), g) == e);
      CHECK(compose(compose(g, h), k) == compose(g, compose(h, k)));
    }
  }

  TEST_CASE("composition table matches the semidirect product") {
    // (x,s).(x',s') = (s x' + x, s s')
    const GroupElement a = GroupElement::from_lattice(3, 1);   // (3, 2)
    const GroupElement b = GroupElement::from_lattice(-1, 2);  // (-1, 4)
    const GroupElement ab = compose(a, b);
    CHECK(ab.translation == Rational(1));  // 2*(-1) + 3
    CHECK(ab.scale == Rational(8));
    const GroupElement inv = inverse(a);
    CHECK(inv.translation == Rational(-3, 2));
    CHECK(inv.scale == Rational(1, 2));
  }

  TEST_CASE("scale grid is dyadic and increasing") {
    ScaleGrid grid(4);
    CHECK(grid.factor(0) == 1);
    CHECK(grid.factor(3) == 8);
    CHECK_THROWS(grid.factor(4));
    CHECK_THROWS(ScaleGrid(0));
  }
}

TEST_SUITE("scale_kernel") {
  TEST_CASE("zero insertion at scale 1") {
    auto base = Tensor<double>::from_flat({1, 1, 3}, {1, 2, 3});
    auto out = scale_kernel(base, 1);
    CHECK(out.shape() == Shape{1, 1, 5});
    CHECK(out[0] == 1);
    CHECK(out[1] == 0);
    CHECK(out[2] == 2);
    CHECK(out[3] == 0);
    CHECK(out[4] == 3);
  }

  TEST_CASE("scale 0 is the identity") {
    Rng rng(5);
    auto base = random_tensor({2, 3, 4}, rng);
    auto out = scale_kernel(base, 0);
    CHECK((out.values() - base.values()).abs().maxCoeff() == 0.0);
  }

  TEST_CASE("coefficient sum preserved") {
    auto base = Tensor<double>::from_flat({1, 1, 3}, {1, 2, 3});
    for (int j = 0; j < 4; ++j) {
      CHECK(scale_kernel(base, j).values().sum() == doctest::Approx(6.0));
    }
  }

  TEST_CASE("gradient gathers from dilated taps") {
    Rng rng(9);
    auto base = random_tensor({2, 1, 3}, rng);
    CHECK(fd_gradcheck(
              [](const Tensor<double>& v) {
                auto y = scale_kernel(v, 2);
                return sum(mul(y, y));
              },
              base) < 1e-8);
  }
}

TEST_SUITE("lift") {
  TEST_CASE("single-tap kernel replicates the input at every scale") {
    Rng rng(13);
    auto x = random_tensor({1, 1, 8}, rng);
    auto base = Tensor<double>::from_flat({1, 1, 1}, {1});
    auto f = lift(x, base, ScaleGrid(3), Padding::Circular);
    for (int j = 0; j < 3; ++j)
      for (Index u = 0; u < 8; ++u) CHECK(f(0, 0, j, u) == x(0, 0, u));
  }

  TEST_CASE("impulse response across scales") {
    auto x = Tensor<double>::from_flat({1, 1, 4}, {1, 0, 0, 0});
    auto base = Tensor<double>::from_flat({1, 1, 2}, {1, 1});
    auto f = lift(x, base, ScaleGrid(2), Padding::Circular);
    // scale 0, kernel [1,1]: y[u] = x[u] + x[u+1 mod 4]
    CHECK(f(0, 0, 0, 0) == 1);
    CHECK(f(0, 0, 0, 1) == 0);
    CHECK(f(0, 0, 0, 2) == 0);
    CHECK(f(0, 0, 0, 3) == 1);
    // scale 1, kernel [1,0,1]: y[u] = x[u] + x[u+2 mod 4]
    CHECK(f(0, 0, 1, 0) == 1);
    CHECK(f(0, 0, 1, 1) == 0);
    CHECK(f(0, 0, 1, 2) == 1);
    CHECK(f(0, 0, 1, 3) == 0);
  }

  TEST_CASE("zero input lifts to zero") {
    auto x = Tensor<double>::zeros({2, 3, 8});
    Rng rng(15);
    auto base = random_tensor({4, 3, 3}, rng);
    auto f = lift(x, base, ScaleGrid(2), Padding::Circular);
    CHECK(f.values().abs().maxCoeff() == 0.0);
  }

  TEST_CASE("each scale slice equals conv1d with the dilated kernel") {
    Rng rng(17);
    auto x = random_tensor({2, 3, 16}, rng);
    auto base = random_tensor({4, 3, 3}, rng);
    ScaleGrid grid(3);
    for (Padding pad : {Padding::Circular, Padding::Zero}) {
      auto f = lift(x, base, grid, pad);
      for (int j = 0; j < grid.num_scales; ++j) {
        auto ref = conv1d(x, scale_kernel(base, j), pad);
        for (Index b = 0; b < 2; ++b)
          for (Index o = 0; o < 4; ++o)
            for (Index u = 0; u < 16; ++u)
              CHECK(f(b, o, j, u) == doctest::Approx(ref(b, o, u)).epsilon(1e-13));
      }
    }
  }

  TEST_CASE("support overflow at the top scale rejected") {
    auto x = Tensor<double>::zeros({1, 1, 8});
    auto base = Tensor<double>::zeros({1, 1, 3});
    CHECK_THROWS(lift(x, base, ScaleGrid(3), Padding::Circular));  // support 9 > 8
  }

  TEST_CASE("gradient check") {
    Rng rng(19);
    auto x = random_tensor({2, 2, 8}, rng);
    auto base = random_tensor({3, 2, 2}, rng);
    ScaleGrid grid(3);
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) {
                auto y = lift(v, base, grid, Padding::Circular);
                return sum(mul(y, y));
              },
              x) < 1e-6);
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) {
                auto y = lift(x, v, grid, Padding::Zero);
                return sum(mul(y, y));
              },
              base) < 1e-6);
  }
}

TEST_SUITE("group_conv") {
  TEST_CASE("delta kernel at zero offset is the identity") {
    Rng rng(21);
    auto f = random_tensor({2, 1, 3, 8}, rng);
    auto w = Tensor<double>::from_flat({1, 1, 1, 1}, {1});
    auto out = group_conv(f, w, ScaleGrid(3), Padding::Circular);
    CHECK((out.values() - f.values()).abs().maxCoeff() == 0.0);
  }

  TEST_CASE("two-tap kernel on a constant map doubles it") {
    auto f = Tensor<double>::ones({1, 1, 3, 8});
    auto w = Tensor<double>::from_flat({1, 1, 1, 2}, {1, 1});
    auto out = group_conv(f, w, ScaleGrid(3), Padding::Circular);
    CHECK((out.values() - 2.0).abs().maxCoeff() < 1e-12);
  }

  TEST_CASE("zero kernel maps to zero") {
    Rng rng(23);
    auto f = random_tensor({1, 2, 3, 16}, rng);
    auto w = Tensor<double>::zeros({2, 2, 2, 3});
    auto out = group_conv(f, w, ScaleGrid(3), Padding::Circular);
    CHECK(out.values().abs().maxCoeff() == 0.0);
  }

  TEST_CASE("scale offsets beyond the top scale contribute zero") {
    // At the top scale only offset 0 is valid; a kernel with energy solely at
    // offset 1 must produce zero there.
    Rng rng(25);
    auto f = random_tensor({1, 1, 2, 8}, rng);
    auto w = Tensor<double>::zeros({1, 1, 2, 1});
    w(0, 0, 1, 0) = 1.0;
    auto out = group_conv(f, w, ScaleGrid(2), Padding::Circular);
    for (Index u = 0; u < 8; ++u) {
      CHECK(out(0, 0, 1, u) == 0.0);             // truncated at the boundary
      CHECK(out(0, 0, 0, u) == f(0, 0, 1, u));   // reads one scale up
    }
  }

  TEST_CASE("kernel spanning more scale offsets than the grid rejected") {
    auto f = Tensor<double>::zeros({1, 1, 2, 8});
    auto w = Tensor<double>::zeros({1, 1, 3, 1});
    CHECK_THROWS(group_conv(f, w, ScaleGrid(2), Padding::Circular));
  }

  TEST_CASE("gradient check") {
    Rng rng(27);
    auto f = random_tensor({2, 2, 3, 8}, rng);
    auto w = random_tensor({2, 2, 2, 2}, rng);
    ScaleGrid grid(3);
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) {
                auto y = group_conv(v, w, grid, Padding::Circular);
                return sum(mul(y, y));
              },
              f) < 1e-6);
    CHECK(fd_gradcheck(
              [&](const Tensor<double>& v) {
                auto y = group_conv(f, v, grid, Padding::Zero);
                return sum(mul(y, y));
              },
              w) < 1e-6);
  }
}

TEST_SUITE("project") {
  TEST_CASE("max over the scale axis") {
    auto f = Tensor<double>::from_flat({1, 1, 2, 2}, {1, 2, 3, 0});
    auto out = project(f, ProjectionMode::Max);
    CHECK(out.shape() == Shape{1, 1, 2});
    CHECK(out(0, 0, 0) == 3);
    CHECK(out(0, 0, 1) == 2);
  }

  TEST_CASE("mean over the scale axis") {
    auto f = Tensor<double>::from_flat({1, 1, 2, 2}, {1, 2, 3, 0});
    auto out = project(f, ProjectionMode::Mean);
    CHECK(out(0, 0, 0) == doctest::Approx(2.0));
    CHECK(out(0, 0, 1) == doctest::Approx(1.0));
  }

  TEST_CASE("single scale is the identity for both modes") {
    Rng rng(29);
    auto f = random_tensor({2, 3, 1, 8}, rng);
    for (auto mode : {ProjectionMode::Max, ProjectionMode::Mean}) {
      auto out = project(f, mode);
      CHECK((out.values() - f.values()).abs().maxCoeff() == 0.0);
    }
  }
}

TEST_SUITE("equivariance") {
  TEST_CASE("translation equivariance of lift, group_conv, project at all shifts") {
    Rng rng(31);
    ScaleGrid grid(3);
    const Index length = 16;
    auto base = random_tensor({4, 3, 3}, rng);
    auto gw = random_tensor({4, 4, 2, 3}, rng);
    auto x = random_tensor({2, 3, length}, rng);

    auto lift_layer = [&](const Tensor<double>& v) { return lift(v, base, grid, Padding::Circular); };
    auto stack = [&](const Tensor<double>& v) {
      return project(group_conv(lift(v, base, grid, Padding::Circular), gw, grid, Padding::Circular),
                     ProjectionMode::Max);
    };
    for (Index t = 0; t < length; ++t) {
      CHECK(check_equivariance<double>(lift_layer, x, GroupTransform::Shift, t) <= 1e-12);
      CHECK(check_equivariance<double>(stack, x, GroupTransform::Shift, t) <= 1e-12);
    }
  }

  TEST_CASE("dyadic scale covariance of lift") {
    Rng rng(33);
    ScaleGrid grid(3);
    auto base = random_tensor({2, 2, 3}, rng);
    auto x = random_tensor({1, 2, 16}, rng);
    auto lift_layer = [&](const Tensor<double>& v) { return lift(v, base, grid, Padding::Circular); };
    CHECK(check_equivariance<double>(lift_layer, x, GroupTransform::DyadicScale) <= 1e-12);
  }

  TEST_CASE("zero padding commutes with shifts on interior positions") {
    Rng rng(35);
    auto base = random_tensor({2, 2, 3}, rng);
    auto x = random_tensor({1, 2, 16}, rng);
    auto layer = [&](const Tensor<double>& v) { return conv1d(v, base, Padding::Zero); };
    CHECK(check_equivariance<double>(layer, x, GroupTransform::Shift, 1, /*interior_support=*/3) <=
          1e-12);
  }

  TEST_CASE("full reduction over scale and translation is shift invariant") {
    Rng rng(37);
    ScaleGrid grid(3);
    auto base = random_tensor({4, 2, 3}, rng);
    auto x = random_tensor({1, 2, 16}, rng);
    auto pooled = [&](const Tensor<double>& v) {
      auto f = lift(v, base, grid, Padding::Circular);
      return max_pool_axis(max_pool_axis(f, 3), 2);  // translation then scale
    };
    auto ref = pooled(x);
    for (Index t = 1; t < 16; ++t) {
      auto shifted = pooled(circular_shift_last(x, t));
      CHECK((shifted.values() - ref.values()).abs().maxCoeff() == 0.0);
    }
  }
}
