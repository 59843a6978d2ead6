#include "doctest.h"

#include <cmath>

#include "dotfan/autograd.hpp"
#include "test_support.hpp"

using namespace dotfan;
using dotfan::testing::central_differences;
using dotfan::testing::random_values;
using dotfan::testing::relative_error;

namespace {

// Checks d f / d x via autodiff against central differences.
void check_gradient(const ag::Shape& shape, std::uint64_t seed,
                    const std::function<ag::Var(const ag::Var&)>& f, double tol = 1e-6) {
  const auto x0 = random_values(ag::numel(shape), seed);
  ag::Var x = ag::Var::parameter(shape, x0);
  const auto g = ag::grad(f(x), {x})[0];
  REQUIRE(g.defined());
  const auto numeric = central_differences(
      [&](const std::vector<double>& v) { return f(ag::Var::constant(shape, v)).item(); }, x0);
  CHECK(relative_error(g.values(), numeric) < tol);
}

double naive_conv_at(const std::vector<double>& x, const std::vector<double>& w, int c, int h,
                     int wd, int k, int stride, int pad, int groups, int o_per_group, int n,
                     int o, int oy, int ox) {
  const int cg = c / groups;
  const int g = o / o_per_group;
  double acc = 0.0;
  for (int ci = 0; ci < cg; ++ci) {
    const int cin = g * cg + ci;
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const int iy = oy * stride - pad + ki, ix = ox * stride - pad + kj;
        if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
        acc += x[((n * c + cin) * h + iy) * wd + ix] * w[((o * cg + ci) * k + ki) * k + kj];
      }
  }
  return acc;
}

}  // namespace

TEST_CASE("conv2d forward matches a direct loop") {
  for (int groups : {1, 2}) {
    const int n = 2, c = 4, h = 7, wd = 6, o = 6, k = 3, stride = 2, pad = 1;
    const auto xv = random_values(n * c * h * wd, 11);
    const auto wv = random_values(o * (c / groups) * k * k, 12);
    const ag::ConvGeom geom{k, stride, pad, groups};
    auto y = ag::conv2d(ag::Var::constant({n, c, h, wd}, xv),
                        ag::Var::constant({o, c / groups, k, k}, wv), geom);
    const int ho = ag::conv_out_size(h, geom), wo = ag::conv_out_size(wd, geom);
    REQUIRE(y.shape() == ag::Shape{n, o, ho, wo});
    double worst = 0.0;
    for (int b = 0; b < n; ++b)
      for (int oc = 0; oc < o; ++oc)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const double ref = naive_conv_at(xv, wv, c, h, wd, k, stride, pad, groups,
                                             o / groups, b, oc, oy, ox);
            worst = std::max(worst, std::abs(ref - y.data()[((b * o + oc) * ho + oy) * wo + ox]));
          }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("elementwise chain gradients") {
  check_gradient({3, 4}, 1, [](const ag::Var& x) {
    auto y = ag::tanh(ag::scale(x, 1.3));
    y = ag::mul(y, ag::exp(ag::scale(x, 0.5)));
    y = ag::add(y, ag::sqrt(ag::add_scalar(ag::square(x), 1.0)));
    y = ag::leaky_relu(ag::sub(y, ag::log(ag::add_scalar(ag::square(x), 2.0))), 0.2);
    return ag::sum(ag::div(y, ag::add_scalar(ag::square(x), 1.5)));
  });
}

TEST_CASE("reduction and broadcast gradients") {
  const auto w = ag::Var::constant({2, 3, 2, 2}, random_values(24, 9));
  check_gradient({2, 3, 2, 2}, 2, [&](const ag::Var& x) {
    auto rows = ag::row_broadcast(ag::row_sum(ag::square(x)), x.shape());
    auto ch = ag::expand_channels(ag::sum_channels(ag::mul(x, w)), x.shape());
    auto sp = ag::broadcast_spatial(ag::spatial_sum(ag::tanh(x)), 2, 2);
    return ag::mean(ag::mul(ag::add(ag::add(rows, ch), sp), x));
  });
}

TEST_CASE("shape op gradients") {
  const auto c = ag::Var::constant({2, 2, 3, 3}, random_values(36, 5));
  check_gradient({2, 3, 3, 3}, 3, [&](const ag::Var& x) {
    auto cat = ag::concat1({x, c, ag::flip_horizontal(x)});
    auto mid = ag::slice1(cat, 2, 4);
    auto padded = ag::pad1(ag::tanh(mid), 1, 6);
    auto flat = ag::reshape(padded, {2, 54});
    return ag::sum(ag::mul(flat, ag::reshape(ag::slice1(cat, 0, 6), {2, 54})));
  });
}

TEST_CASE("matmul gradients for every transpose combination") {
  const auto b = ag::Var::constant({4, 5}, random_values(20, 7));
  const auto bt = ag::Var::constant({5, 4}, random_values(20, 8));
  check_gradient({3, 4}, 4, [&](const ag::Var& a) { return ag::sum(ag::square(ag::matmul(a, b))); });
  check_gradient({4, 3}, 5, [&](const ag::Var& a) {
    return ag::sum(ag::square(ag::matmul(a, b, true, false)));
  });
  check_gradient({3, 4}, 6, [&](const ag::Var& a) {
    return ag::sum(ag::square(ag::matmul(a, bt, false, true)));
  });
  check_gradient({4, 3}, 7, [&](const ag::Var& a) {
    return ag::sum(ag::square(ag::matmul(a, bt, true, true)));
  });
  // gradient w.r.t. the right operand
  const auto a = ag::Var::constant({3, 4}, random_values(12, 9));
  check_gradient({5, 4}, 8, [&](const ag::Var& r) {
    return ag::sum(ag::tanh(ag::matmul(a, r, false, true)));
  });
}

TEST_CASE("convolution gradients, plain and depthwise") {
  for (int groups : {1, 4}) {
    const ag::ConvGeom geom{3, 2, 1, groups};
    const auto w = ag::Var::constant({4, 4 / groups, 3, 3}, random_values(4 * (4 / groups) * 9, 21));
    check_gradient({2, 4, 5, 5}, 22, [&](const ag::Var& x) {
      return ag::sum(ag::tanh(ag::conv2d(x, w, geom)));
    });
    const auto x = ag::Var::constant({2, 4, 5, 5}, random_values(200, 23));
    check_gradient({4, 4 / groups, 3, 3}, 24, [&](const ag::Var& wv) {
      return ag::sum(ag::tanh(ag::conv2d(x, wv, geom)));
    });
  }
}

TEST_CASE("transposed convolution used as an upsampling layer") {
  const ag::ConvGeom geom{4, 2, 1, 1};
  const int out = ag::conv_transpose_out_size(3, geom);
  CHECK(out == 6);
  // weight [Cin, Cout, k, k]: Cin plays the conv's output-channel role
  const auto w = ag::Var::constant({3, 2, 4, 4}, random_values(96, 31));
  check_gradient({2, 3, 3, 3}, 32, [&](const ag::Var& x) {
    return ag::sum(ag::tanh(ag::conv_transpose2d(x, w, geom, {2, 2, out, out})));
  });
  const auto x = ag::Var::constant({2, 3, 3, 3}, random_values(54, 33));
  check_gradient({3, 2, 4, 4}, 34, [&](const ag::Var& wv) {
    return ag::sum(ag::tanh(ag::conv_transpose2d(x, wv, geom, {2, 2, out, out})));
  });
}

TEST_CASE("log-softmax and row normalisation") {
  const auto t = ag::Var::constant({3, 5}, random_values(15, 41));
  check_gradient({3, 5}, 42, [&](const ag::Var& x) {
    return ag::sum(ag::mul(ag::log_softmax_rows(ag::scale(x, 3.0)), t));
  });
  check_gradient({3, 5}, 43, [&](const ag::Var& x) {
    return ag::sum(ag::mul(ag::l2_normalize_rows(x), t));
  });
  auto ls = ag::log_softmax_rows(ag::Var::constant({1, 3}, {1000.0, 1000.0, 1000.0}));
  CHECK(ls.data()[0] == doctest::Approx(-std::log(3.0)));
}

TEST_CASE("second-order gradients through a small critic") {
  // F(w) = || d/dx sum(v * leaky(conv(x, w))) ||^2, differentiated w.r.t. w.
  const ag::ConvGeom geom{3, 2, 1, 1};
  const auto xv = random_values(2 * 2 * 6 * 6, 51);
  const auto vv = random_values(2 * 3 * 3 * 3, 52);
  const auto w0 = random_values(3 * 2 * 3 * 3, 53);
  auto first_order = [&](const ag::Var& w, bool create) {
    ag::Var x = ag::Var::parameter({2, 2, 6, 6}, xv);
    auto out = ag::sum(ag::mul(ag::leaky_relu(ag::conv2d(x, w, geom), 0.2),
                               ag::Var::constant({2, 3, 3, 3}, vv)));
    auto gx = ag::grad(out, {x}, create)[0];
    return ag::sum(ag::square(gx));
  };
  ag::Var w = ag::Var::parameter({3, 2, 3, 3}, w0);
  auto gw = ag::grad(first_order(w, true), {w})[0];
  REQUIRE(gw.defined());
  const auto numeric = central_differences(
      [&](const std::vector<double>& v) {
        return first_order(ag::Var::parameter({3, 2, 3, 3}, v), false).item();
      },
      w0);
  CHECK(relative_error(gw.values(), numeric) < 1e-6);
}

TEST_CASE("no-grad mode records nothing") {
  ag::Var x = ag::Var::parameter({2}, {1.0, 2.0});
  {
    ag::NoGradGuard guard;
    auto y = ag::square(x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ag::square(x).requires_grad());
  auto unrelated = ag::Var::parameter({2}, {0.0, 0.0});
  auto g = ag::grad(ag::sum(ag::square(x)), {unrelated});
  CHECK_FALSE(g[0].defined());
}

TEST_CASE("shape errors are reported") {
  auto a = ag::Var::constant({2}, {1, 2});
  auto b = ag::Var::constant({3}, {1, 2, 3});
  CHECK_THROWS_AS(ag::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ag::reshape(a, {3}), std::invalid_argument);
}

TEST_CASE("nearest upsampling and block pooling are adjoint") {
  const ag::Shape small{2, 3, 3, 4}, big{2, 3, 6, 8};
  const auto a = random_values(ag::numel(small), 21), b = random_values(ag::numel(big), 22);
  const auto up = ag::upsample_nearest2x(ag::Var::constant(small, a));
  REQUIRE(up.shape() == big);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x) CHECK(up.data()[(1 * 3 + 2) * 48 + y * 8 + x] == a[(1 * 3 + 2) * 12 + (y / 2) * 4 + x / 2]);
  const auto pooled = ag::pool_sum2x(ag::Var::constant(big, b));
  REQUIRE(pooled.shape() == small);
  // <U a, b> = <a, P b>
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) lhs += up.data()[i] * b[i];
  for (std::size_t i = 0; i < a.size(); ++i) rhs += a[i] * pooled.data()[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  const auto wu = random_values(ag::numel(big), 23), wp = random_values(ag::numel(small), 24);
  check_gradient(small, 25, [&](const ag::Var& x) {
    return ag::sum(ag::square(ag::upsample_nearest2x(x)) * ag::Var::constant(big, wu));
  });
  check_gradient(big, 26, [&](const ag::Var& x) {
    return ag::sum(ag::square(ag::pool_sum2x(x)) * ag::Var::constant(small, wp));
  });
  CHECK_THROWS(ag::pool_sum2x(ag::Var::constant({1, 1, 3, 4}, std::vector<double>(12, 0.0))));
}
