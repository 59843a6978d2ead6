#include "dotfan/losses.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dotfan/errors.hpp"
#include "test_support.hpp"

using namespace dotfan;
using namespace dotfan::losses;
using ag::Var;

namespace {

nn::NetworkSpec tiny_spec() {
  nn::NetworkSpec s;
  s.image_size = 8;
  s.base_channels = 2;
  s.num_downsamples = 1;
  s.num_residual_blocks = 1;
  s.code_dims = codes::CodeDims{3, 4, 2, 1};
  return s;
}

Var random_batch(ag::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  return Var::constant(shape, testing::random_values(ag::numel(shape), seed, lo, hi));
}

Image random_image(int size, std::uint64_t seed) {
  Image img;
  img.size = size;
  img.pixels = testing::random_values(3 * static_cast<std::size_t>(size) * size, seed);
  return img;
}

std::vector<double> unit_vector(int d, std::uint64_t seed) {
  auto v = testing::random_values(d, seed);
  double n = 0.0;
  for (double x : v) n += x * x;
  for (auto& x : v) x /= std::sqrt(n);
  return v;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-12); }

// Linear critic D(x) = w . flat(x) + bias.
Critic linear_critic(std::vector<double> w, double bias = 0.0) {
  return [w = std::move(w), bias](const Var& x) {
    const int n = x.dim(0);
    const int f = static_cast<int>(x.size()) / n;
    const Var flat = ag::reshape(x, {n, f});
    return ag::add_scalar(ag::matmul(flat, Var::constant({f, 1}, w)), bias);
  };
}

// Gradient of f(x) = sum over rows of the loss with respect to x by
// central differences, compared to reverse mode.
void check_image_gradient(const std::function<Var(const Var&)>& loss, const ag::Shape& shape,
                          std::uint64_t seed) {
  const auto x0 = testing::random_values(ag::numel(shape), seed, -0.9, 0.9);
  Var x = Var::parameter(shape, x0);
  const auto analytic = ag::grad(loss(x), {x})[0].values();
  const auto numeric = testing::central_differences(
      [&](const std::vector<double>& v) {
        ag::NoGradGuard guard;
        return loss(Var::constant(shape, v)).item();
      },
      x0, 1e-6);
  CHECK(testing::relative_error(analytic, numeric) < 1e-3);
}

}  // namespace

TEST_CASE("cycle loss") {
  const Image x = random_image(8, 1);
  CHECK(cycle_loss(x, x) == 0.0);
  CHECK(cycle_loss(Image::filled(8, -1.0), Image::filled(8, 1.0)) == doctest::Approx(4.0));
  CHECK_THROWS_AS(cycle_loss(Image::filled(8, 0.0), Image::filled(16, 0.0)), ContractError);

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Image a = random_image(8, seed), b = random_image(8, seed + 1000);
    double oracle = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
      oracle += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
    }
    oracle /= static_cast<double>(a.pixels.size());
    CHECK(rel(cycle_loss(a, b), oracle) <= 1e-6);
  }
}

TEST_CASE("symmetry loss") {
  const Image g = random_image(8, 3), x = random_image(8, 4);
  face::FaceMask zero{8, 8, std::vector<std::uint8_t>(64, 0), true};
  face::FaceMask ones{8, 8, std::vector<std::uint8_t>(64, 1), false};
  CHECK(symmetry_loss(zero, g, x) == 0.0);
  CHECK(rel(symmetry_loss(ones, g, x), cycle_loss(x, g)) < 1e-12);

  face::FaceMask half = zero;
  for (int y = 0; y < 8; ++y)
    for (int c = 0; c < 4; ++c) half.mask[y * 8 + c] = 1;
  CHECK(symmetry_loss(half, Image::filled(8, 0.5), Image::filled(8, -0.5)) == doctest::Approx(0.5));

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Image a = random_image(8, seed), b = random_image(8, seed + 7);
    face::FaceMask m = zero;
    const auto bits = testing::random_values(64, seed + 99, 0.0, 1.0);
    for (int i = 0; i < 64; ++i) m.mask[i] = bits[i] > 0.5;
    double oracle = 0.0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx) {
          const double d = a.at(c, y, xx) - b.at(c, y, xx);
          oracle += m.at(y, xx) * d * d;
        }
    oracle /= 3.0 * 64.0;
    CHECK(rel(symmetry_loss(m, a, b), oracle) <= 1e-6);
  }

  // A three-channel mask is equivalent to the broadcast one.
  const Var g2 = random_batch({2, 3, 8, 8}, 5), x2 = random_batch({2, 3, 8, 8}, 6);
  std::vector<double> m1(2 * 64), m3;
  for (std::size_t i = 0; i < m1.size(); ++i) m1[i] = (i % 3) == 0;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) m3.insert(m3.end(), m1.begin() + n * 64, m1.begin() + (n + 1) * 64);
  CHECK(symmetry_loss(Var::constant({2, 1, 8, 8}, m1), g2, x2).item() ==
        doctest::Approx(symmetry_loss(Var::constant({2, 3, 8, 8}, m3), g2, x2).item()));
  CHECK_THROWS_AS(symmetry_loss(Var::constant({2, 2, 8, 8}, std::vector<double>(256, 1.0)), g2, x2),
                  ContractError);
}

TEST_CASE("identity and pose losses") {
  const int d = 64;
  const auto e = unit_vector(d, 1);
  std::vector<double> neg(e);
  for (auto& v : neg) v = -v;
  CHECK(identity_loss(Var::constant({1, d}, e), Var::constant({1, d}, e)).item() == 0.0);
  CHECK(identity_loss(Var::constant({1, d}, e), Var::constant({1, d}, neg)).item() ==
        doctest::Approx(4.0 / d));

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::vector<double> a, b;
    for (int n = 0; n < 3; ++n) {
      const auto u = unit_vector(d, seed * 10 + n), v = unit_vector(d, seed * 10 + n + 5000);
      a.insert(a.end(), u.begin(), u.end());
      b.insert(b.end(), v.begin(), v.end());
    }
    double oracle = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) oracle += (a[i] - b[i]) * (a[i] - b[i]);
    oracle /= 3.0 * d;
    CHECK(rel(identity_loss(Var::constant({3, d}, a), Var::constant({3, d}, b)).item(), oracle) <=
          1e-6);
  }

  const auto theta = face::ShapeParams::frontal(199, 29).flatten();
  REQUIRE(theta.size() == 240);
  std::vector<double> off(theta);
  off[17] += 1.0;
  CHECK(pose_loss(Var::constant({1, 240}, theta), Var::constant({1, 240}, theta)).item() == 0.0);
  CHECK(pose_loss(Var::constant({1, 240}, theta), Var::constant({1, 240}, off)).item() ==
        doctest::Approx(1.0 / 240.0));
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto a = testing::random_values(2 * 26, seed, -2, 2);
    const auto b = testing::random_values(2 * 26, seed + 1, -2, 2);
    double oracle = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) oracle += (a[i] - b[i]) * (a[i] - b[i]);
    oracle /= 2.0 * 26.0;
    CHECK(rel(pose_loss(Var::constant({2, 26}, a), Var::constant({2, 26}, b)).item(), oracle) <=
          1e-6);
  }

  // Network-backed forms.
  const auto spec = tiny_spec();
  const nn::FaceExpert fem(spec, 1);
  const nn::ShapeRegressor fsr(spec, 2);
  const Image x = random_image(8, 11);
  CHECK(identity_loss(fem, x, x) == 0.0);
  const auto target = nn::regress_shape(fsr, x);
  CHECK(pose_loss(fsr, target, x) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("gradient penalty analytic cases") {
  const int f = 3 * 8 * 8;
  auto w = unit_vector(f, 3);
  const Var real = random_batch({4, 3, 8, 8}, 1), fake = random_batch({4, 3, 8, 8}, 2);
  std::mt19937_64 rng(5);

  const auto unit = critic_loss(linear_critic(w), real, fake, rng, 10.0);
  CHECK(std::abs(unit.penalty.item()) <= 1e-8);

  std::vector<double> w2(w);
  for (auto& v : w2) v *= 2.0;
  const auto twice = critic_loss(linear_critic(w2), real, fake, rng, 10.0);
  CHECK(std::abs(10.0 * twice.penalty.item() - 10.0) <= 1e-6);

  // d_loss = mean D(fake) - mean D(real) + lambda * penalty for a linear critic.
  double on_real = 0.0, on_fake = 0.0;
  for (int n = 0; n < 4; ++n)
    for (int k = 0; k < f; ++k) {
      on_real += w2[k] * real.data()[n * f + k] / 4.0;
      on_fake += w2[k] * fake.data()[n * f + k] / 4.0;
    }
  CHECK(rel(twice.d_loss.item(), on_fake - on_real + 10.0) <= 1e-6);
  CHECK(rel(twice.wasserstein, on_real - on_fake) <= 1e-6);

  // g_loss is the negated critic value.
  const Critic constant_critic = [](const Var& x) {
    return ag::add_scalar(ag::scale(ag::reshape(ag::row_sum(x), {x.dim(0), 1}), 0.0), 0.7);
  };
  CHECK(generator_adversarial_loss(constant_critic, fake).item() == doctest::Approx(-0.7));

  const Critic detached = [](const Var& x) { return Var::full({x.dim(0), 1}, 0.3); };
  CHECK_THROWS_AS(critic_loss(detached, real, fake, rng, 10.0), ContractError);
}

TEST_CASE("gradient penalty matches a hand-derived oracle for a smooth critic") {
  // D(x) = v . tanh(A x): grad = A^T (v * (1 - tanh(A x)^2)).
  const int f = 12, h = 5, n = 3;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto a = testing::random_values(f * h, seed, -0.5, 0.5);
    const auto v = testing::random_values(h, seed + 1);
    const Critic critic = [&](const Var& x) {
      const Var hidden = ag::tanh(ag::matmul(ag::reshape(x, {x.dim(0), f}), Var::constant({f, h}, a)));
      return ag::matmul(hidden, Var::constant({h, 1}, v));
    };
    const auto real = testing::random_values(n * f, seed + 2);
    const auto fake = testing::random_values(n * f, seed + 3);
    const auto u = testing::random_values(n, seed + 4, 0.0, 1.0);
    const double penalty = gradient_penalty(critic, Var::constant({n, 3, 2, 2}, real),
                                            Var::constant({n, 3, 2, 2}, fake), u)
                               .item();
    double oracle = 0.0;
    for (int s = 0; s < n; ++s) {
      std::vector<double> xh(f);
      for (int k = 0; k < f; ++k) xh[k] = u[s] * real[s * f + k] + (1 - u[s]) * fake[s * f + k];
      std::vector<double> g(f, 0.0);
      for (int j = 0; j < h; ++j) {
        double z = 0.0;
        for (int k = 0; k < f; ++k) z += xh[k] * a[k * h + j];
        const double t = std::tanh(z);
        for (int k = 0; k < f; ++k) g[k] += a[k * h + j] * v[j] * (1 - t * t);
      }
      double norm = 0.0;
      for (double gk : g) norm += gk * gk;
      oracle += (std::sqrt(norm) - 1.0) * (std::sqrt(norm) - 1.0) / n;
    }
    CHECK(rel(penalty, oracle) <= 1e-6);
  }
}

TEST_CASE("critic gradient flows through the penalty") {
  // d(penalty)/d(critic weights) against finite differences.
  const auto spec = tiny_spec();
  nn::Discriminator d(spec, 3);
  const Var real = random_batch({2, 3, 8, 8}, 1), fake = random_batch({2, 3, 8, 8}, 2);
  const std::vector<double> u{0.3, 0.8};
  const Critic critic = [&](const Var& x) { return d.source_score(x); };
  for (const auto& [name, p] : d.parameters().entries()) {
    if (name.rfind("down0.w", 0) != 0 && name != "src.w") continue;
    Var param = p;
    const auto analytic = ag::grad(gradient_penalty(critic, real, fake, u), {param})[0].values();
    const std::vector<double> keep(param.data().begin(), param.data().end());
    const auto numeric = testing::central_differences(
        [&](const std::vector<double>& v) {
          std::copy(v.begin(), v.end(), param.mutable_data().begin());
          return gradient_penalty(critic, real, fake, u).item();
        },
        keep, 1e-6);
    std::copy(keep.begin(), keep.end(), param.mutable_data().begin());
    INFO(name);
    CHECK(testing::relative_error(analytic, numeric) < 1e-3);
  }
}

TEST_CASE("classification losses") {
  std::vector<double> certain(14, 0.0);
  certain[4] = 200.0;
  const std::vector<int> four{4};
  CHECK(classification_loss(Var::constant({1, 14}, certain), four).item() < 1e-12);

  std::vector<double> e_inverse(14, std::log((std::exp(1.0) - 1.0) / 13.0));
  e_inverse[6] = 0.0;
  const std::vector<int> six{6};
  CHECK(classification_loss(Var::constant({1, 14}, e_inverse), six).item() ==
        doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<int> zero{0};
  CHECK(classification_loss(Var::zeros({1, 14}), zero).item() ==
        doctest::Approx(std::log(14.0)).epsilon(1e-12));

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto logits = testing::random_values(3 * 14, seed, -4, 4);
    const std::vector<int> labels{static_cast<int>(seed % 14), static_cast<int>((seed * 5) % 14), 13};
    double oracle = 0.0;
    for (int n = 0; n < 3; ++n) {
      double z = 0.0;
      for (int k = 0; k < 14; ++k) z += std::exp(logits[n * 14 + k]);
      oracle += -(logits[n * 14 + labels[n]] - std::log(z)) / 3.0;
    }
    CHECK(rel(classification_loss(Var::constant({3, 14}, logits), labels).item(), oracle) <= 1e-6);
  }

  const auto spec = tiny_spec();
  const nn::Discriminator d(spec, 4);
  const Var x = random_batch({2, 3, 8, 8}, 1), g = random_batch({2, 3, 8, 8}, 2);
  const std::vector<codes::IlluminationCode> truth{codes::IlluminationCode::one_hot(1),
                                                   codes::IlluminationCode::one_hot(13)};
  const std::vector<codes::IlluminationCode> wanted{codes::IlluminationCode::one_hot(5),
                                                    codes::IlluminationCode::one_hot(0)};
  const auto both = classification_losses(d, x, truth, g, wanted);
  const std::vector<int> tl{1, 13}, wl{5, 0};
  CHECK(both.d_cls.item() == classification_loss(d.forward(x).cls, tl).item());
  CHECK(both.g_cls.item() == classification_loss(d.forward(g).cls, wl).item());

  std::array<double, 14> soft{};
  soft[2] = soft[3] = 0.5;
  const std::vector<codes::IlluminationCode> bad{codes::IlluminationCode::from_values(soft),
                                                 codes::IlluminationCode::one_hot(0)};
  CHECK_THROWS_AS(classification_losses(d, x, bad, g, wanted), ContractError);
}

TEST_CASE("total generator loss") {
  const LossWeights w;
  GeneratorLossReport ones{1, 1, 1, 1, 1, 1, 0};
  CHECK(total_generator_loss(ones, w).total == 26.0);
  CHECK(total_generator_loss(GeneratorLossReport{}, w).total == 0.0);
  GeneratorLossReport id_only;
  id_only.id = 2.0;
  CHECK(total_generator_loss(id_only, w).total == 16.0);

  AblationMask no_id;
  no_id.set(Component::id, false);
  CHECK(total_generator_loss(ones, w, no_id).total == 18.0);

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto v = testing::random_values(6, seed, 0.0, 3.0);
    GeneratorLossReport r{v[0], v[1], v[2], v[3], v[4], v[5], 0};
    const double oracle = v[0] + v[1] + 8 * v[2] + 6 * v[3] + 5 * v[4] + 5 * v[5];
    CHECK(rel(total_generator_loss(r, w).total, oracle) <= 1e-6);
  }

  GeneratorLossReport bad = ones;
  bad.pose = std::nan("");
  try {
    total_generator_loss(bad, w);
    FAIL("expected LossError");
  } catch (const LossError& e) {
    CHECK(e.component() == "pose");
  }
  LossWeights negative;
  negative.w_sym = -1.0;
  CHECK_THROWS_AS(total_generator_loss(ones, negative), ContractError);
}

TEST_CASE("ablation removes a component's gradient exactly") {
  const auto spec = tiny_spec();
  nn::Generator g(spec, 9);
  const Var code = random_batch({2, spec.code_dims.total()}, 3);
  const Var target = random_batch({2, 3, 8, 8}, 4);
  const auto params = g.parameters().vars();

  auto terms_for = [&](const Var& out) {
    GeneratorTerms t;
    t[Component::cycle] = cycle_loss(target, out);
    t[Component::sym] = ag::mean(ag::square(out));
    t[Component::adv] = ag::neg(ag::mean(out));
    return t;
  };
  const LossWeights w;
  for (Component off : {Component::cycle, Component::sym, Component::adv}) {
    AblationMask mask;
    for (Component c : {Component::cls, Component::id, Component::pose}) mask.set(c, false);
    mask.set(off, false);
    GeneratorLossReport report;
    const Var out = g.forward(code);
    const auto ablated = ag::grad(weighted_objective(terms_for(out), w, mask, &report), params);

    // Reference: every term present but the ablated one detached.
    auto terms = terms_for(out);
    Var reference;
    for (Component c : {Component::cycle, Component::sym, Component::adv}) {
      const Var t = c == off ? terms[c].detach() : terms[c];
      const Var scaled = ag::scale(t, c == off ? 0.0 : w.weight(c));
      reference = reference.defined() ? reference + scaled : scaled;
    }
    const auto expected = ag::grad(reference, params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      CHECK(testing::relative_error(ablated[i].values(), expected[i].values(), 1.0) <= 1e-10);
    }
    CHECK(report.get(off) == terms[off].item());  // still reported
  }

  // An enabled component must be evaluated.
  GeneratorTerms missing;
  missing[Component::cycle] = Var::scalar(1.0);
  CHECK_THROWS_AS(weighted_objective(missing, w, AblationMask{}), ContractError);
}

TEST_CASE("loss gradients match finite differences on 8x8 inputs") {
  const auto spec = tiny_spec();
  const nn::FaceExpert fem(spec, 1);
  const nn::ShapeRegressor fsr(spec, 2);
  const nn::Discriminator d(spec, 3);
  const ag::Shape shape{1, 3, 8, 8};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Var x = random_batch(shape, seed + 500);
    std::vector<double> bits(64);
    const auto r = testing::random_values(64, seed + 900, 0.0, 1.0);
    for (int i = 0; i < 64; ++i) bits[i] = r[i] > 0.4;
    const Var mask = Var::constant({1, 1, 8, 8}, bits);
    const Var theta = random_batch({1, spec.code_dims.pose_length()}, seed + 700);
    const std::vector<int> label{static_cast<int>(seed % 14)};

    check_image_gradient([&](const Var& g) { return cycle_loss(x, g); }, shape, seed);
    check_image_gradient([&](const Var& g) { return symmetry_loss(mask, g, x); }, shape, seed);
    check_image_gradient([&](const Var& g) { return identity_loss(fem, x, g); }, shape, seed);
    check_image_gradient([&](const Var& g) { return pose_loss(fsr, theta, g); }, shape, seed);
    check_image_gradient([&](const Var& g) { return classification_loss(d.forward(g).cls, label); },
                         shape, seed);
  }
}

TEST_CASE("frozen networks are untouched by loss evaluation") {
  const auto spec = tiny_spec();
  nn::FaceExpert fem(spec, 1);
  nn::ShapeRegressor fsr(spec, 2);
  fem.parameters().set_trainable(false);
  fsr.parameters().set_trainable(false);
  const nn::FaceExpert fem_before = fem;
  const nn::ShapeRegressor fsr_before = fsr;

  const Var x = random_batch({2, 3, 8, 8}, 1);
  Var g = Var::parameter({2, 3, 8, 8}, testing::random_values(2 * 192, 2));
  const Var theta = random_batch({2, spec.code_dims.pose_length()}, 3);
  for (int i = 0; i < 5; ++i) {
    const Var total = identity_loss(fem, x, g) + pose_loss(fsr, theta, g);
    auto grads = ag::grad(total, {g, fem.parameters().vars()[0], fsr.parameters().vars()[0]});
    CHECK(grads[0].defined());
    CHECK_FALSE(grads[1].defined());
    CHECK_FALSE(grads[2].defined());
    auto data = g.mutable_data();
    for (std::size_t k = 0; k < data.size(); ++k) data[k] -= 0.1 * grads[0].data()[k];
  }
  CHECK(fem.parameters().bit_equal(fem_before.parameters()));
  CHECK(fsr.parameters().bit_equal(fsr_before.parameters()));
}

TEST_CASE("angular margin loss") {
  const int d = 8, k = 5, n = 6;
  auto unit_rows = [&](int rows, std::uint64_t seed) {
    std::vector<double> out;
    for (int r = 0; r < rows; ++r) {
      const auto u = unit_vector(d, seed + r);
      out.insert(out.end(), u.begin(), u.end());
    }
    return Var::constant({rows, d}, out);
  };
  const std::vector<int> labels{0, 1, 2, 3, 4, 2};

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Var e = unit_rows(n, seed * 31), w = unit_rows(k, seed * 31 + 1000);
    const double s = 64.0;
    double oracle = 0.0;
    for (int i = 0; i < n; ++i) {
      std::vector<double> z(k);
      double top = -1e300;
      for (int j = 0; j < k; ++j) {
        double c = 0.0;
        for (int t = 0; t < d; ++t) c += e.data()[i * d + t] * w.data()[j * d + t];
        z[j] = s * c;
        top = std::max(top, z[j]);
      }
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - top);
      oracle += -(z[labels[i]] - top - std::log(sum)) / n;
    }
    CHECK(rel(angular_margin_loss(e, w, labels, s, 0.0).item(), oracle) <= 1e-6);

    // The margin only ever makes the target harder.
    double previous = -1.0;
    for (int step = 0; step <= 5; ++step) {
      const double value = angular_margin_loss(e, w, labels, s, 0.1 * step).item();
      CHECK(value >= previous);
      previous = value;
    }
  }

  const std::vector<int> only{0, 0};
  CHECK(angular_margin_loss(unit_rows(2, 7), unit_rows(1, 9), only, 64.0, 0.0).item() ==
        doctest::Approx(0.0));

  const Var raw = random_batch({n, d}, 1);
  CHECK_THROWS_AS(angular_margin_loss(raw, unit_rows(k, 2), labels, 64.0, 0.5), ContractError);
  CHECK_THROWS_AS(angular_margin_loss(unit_rows(n, 3), raw, labels, 64.0, 0.5), ContractError);

  // Gradient through row normalisation of free embeddings and weights.
  const auto e0 = testing::random_values(n * d, 41);
  const auto w0 = testing::random_values(k * d, 42);
  const auto loss = [&](const std::vector<double>& ev, const std::vector<double>& wv) {
    return angular_margin_loss(ag::l2_normalize_rows(Var::constant({n, d}, ev)),
                               ag::l2_normalize_rows(Var::constant({k, d}, wv)), labels, 8.0, 0.5)
        .item();
  };
  Var ev = Var::parameter({n, d}, e0), wv = Var::parameter({k, d}, w0);
  const auto grads = ag::grad(angular_margin_loss(ag::l2_normalize_rows(ev),
                                                  ag::l2_normalize_rows(wv), labels, 8.0, 0.5),
                              {ev, wv});
  const auto ne = testing::central_differences([&](const std::vector<double>& v) { return loss(v, w0); },
                                               e0, 1e-6);
  const auto nw = testing::central_differences([&](const std::vector<double>& v) { return loss(e0, v); },
                                               w0, 1e-6);
  CHECK(testing::relative_error(grads[0].values(), ne) < 1e-4);
  CHECK(testing::relative_error(grads[1].values(), nw) < 1e-4);
}

TEST_CASE("log lines are one JSON record per step") {
  GeneratorLossReport r{0.5, 1.5, 0.1, 0.2, 0.3, 0.4, 0};
  r = total_generator_loss(r, LossWeights{});
  const auto j = nlohmann::json::parse(log_line(12, r, {{"gp", 0.25}}));
  CHECK(j["step"] == 12);
  CHECK(j["cycle"].get<double>() == 0.4);
  CHECK(j["total"].get<double>() == r.total);
  CHECK(j["gp"].get<double>() == 0.25);
  CHECK(log_line(12, r).find('\n') == std::string::npos);
}
