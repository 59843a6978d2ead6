#include "dotfan/losses.hpp"

#include <cmath>
#include <numbers>

#include "dotfan/errors.hpp"

namespace dotfan::losses {

using ag::Var;

namespace {

void require_same_shape(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(what) + ": shape " + ag::shape_str(a.shape()) + " vs " +
                        ag::shape_str(b.shape()));
  }
}

// sum((a - b)^2) / numel, i.e. the batch mean of per-sample MSE.
Var mean_squared(const Var& a, const Var& b) { return ag::mean(ag::square(a - b)); }

double as_double(const Var& v) { return v.item(); }

constexpr double kUnitTolerance = 1e-6;

void require_unit_rows(const Var& a, const char* what) {
  const int n = a.dim(0);
  const std::size_t d = a.size() / n;
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a.data()[i * d + k] * a.data()[i * d + k];
    if (std::abs(std::sqrt(s) - 1.0) > kUnitTolerance) {
      throw ContractError(std::string(what) + ": row " + std::to_string(i) + " is not unit norm");
    }
  }
}

}  // namespace

const char* component_name(Component c) {
  switch (c) {
    case Component::adv: return "adv";
    case Component::cls: return "cls";
    case Component::id: return "id";
    case Component::pose: return "pose";
    case Component::sym: return "sym";
    case Component::cycle: return "cycle";
  }
  return "?";
}

double LossWeights::weight(Component c) const {
  switch (c) {
    case Component::adv: return w_adv;
    case Component::cls: return w_cls;
    case Component::id: return w_id;
    case Component::pose: return w_pose;
    case Component::sym: return w_sym;
    case Component::cycle: return w_cycle;
  }
  return 0.0;
}

void LossWeights::validate() const {
  for (double w : {w_adv, w_cls, w_id, w_pose, w_sym, w_cycle, lambda_gp}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("loss weights must be finite and >= 0");
  }
}

double GeneratorLossReport::get(Component c) const {
  switch (c) {
    case Component::adv: return adv;
    case Component::cls: return cls;
    case Component::id: return id;
    case Component::pose: return pose;
    case Component::sym: return sym;
    case Component::cycle: return cycle;
  }
  return 0.0;
}

void GeneratorLossReport::set(Component c, double value) {
  switch (c) {
    case Component::adv: adv = value; break;
    case Component::cls: cls = value; break;
    case Component::id: id = value; break;
    case Component::pose: pose = value; break;
    case Component::sym: sym = value; break;
    case Component::cycle: cycle = value; break;
  }
}

GeneratorLossReport total_generator_loss(GeneratorLossReport r, const LossWeights& w,
                                         const AblationMask& mask) {
  w.validate();
  r.total = 0.0;
  for (Component c : kComponents) {
    const double v = r.get(c);
    if (!std::isfinite(v)) {
      throw LossError(component_name(c), std::string("loss component '") + component_name(c) +
                                             "' is not finite");
    }
    if (mask.on(c)) r.total += w.weight(c) * v;
  }
  return r;
}

Var weighted_objective(const GeneratorTerms& terms, const LossWeights& w, const AblationMask& mask,
                       GeneratorLossReport* report) {
  w.validate();
  Var total;
  GeneratorLossReport r;
  for (Component c : kComponents) {
    const Var& t = terms[c];
    if (!t.defined()) {
      if (mask.on(c)) {
        throw ContractError(std::string("enabled loss component '") + component_name(c) +
                            "' was not evaluated");
      }
      continue;
    }
    r.set(c, t.item());
    if (!mask.on(c)) continue;
    const Var scaled = ag::scale(t, w.weight(c));
    total = total.defined() ? total + scaled : scaled;
  }
  r = total_generator_loss(r, w, mask);
  if (report != nullptr) *report = r;
  return total.defined() ? total : Var::scalar(0.0);
}

// ---------------------------------------------------------------- reconstruction

Var cycle_loss(const Var& x, const Var& x_cycled) {
  require_same_shape(x, x_cycled, "cycle_loss");
  return mean_squared(x_cycled, x);
}

Var symmetry_loss(const Var& mask, const Var& generated, const Var& x_flipped) {
  require_same_shape(generated, x_flipped, "symmetry_loss");
  const auto& gs = generated.shape();
  const auto& ms = mask.shape();
  if (ms.size() != 4 || ms[0] != gs[0] || ms[2] != gs[2] || ms[3] != gs[3] ||
      (ms[1] != 1 && ms[1] != gs[1])) {
    throw ContractError("symmetry_loss: mask " + ag::shape_str(ms) + " does not fit " +
                        ag::shape_str(gs));
  }
  Var full = mask;
  if (ms[1] == 1 && gs[1] != 1) {
    std::vector<double> values;
    values.reserve(generated.size());
    const std::size_t plane = static_cast<std::size_t>(gs[2]) * gs[3];
    for (int n = 0; n < gs[0]; ++n)
      for (int c = 0; c < gs[1]; ++c)
        values.insert(values.end(), mask.data().begin() + n * plane,
                      mask.data().begin() + (n + 1) * plane);
    full = Var::constant(gs, std::move(values));
  }
  return ag::mean(full * ag::square(generated - x_flipped));
}

Var mask_batch(std::span<const face::FaceMask> masks) {
  if (masks.empty()) throw ContractError("mask_batch: no masks");
  const int h = masks.front().height, w = masks.front().width;
  std::vector<double> values;
  values.reserve(masks.size() * h * w);
  for (const auto& m : masks) {
    if (m.height != h || m.width != w) throw ContractError("mask_batch: masks differ in size");
    values.insert(values.end(), m.mask.begin(), m.mask.end());
  }
  return Var::constant({static_cast<int>(masks.size()), 1, h, w}, std::move(values));
}

double cycle_loss(const Image& x, const Image& x_cycled) {
  return as_double(cycle_loss(nn::to_batch(x), nn::to_batch(x_cycled)));
}

double symmetry_loss(const face::FaceMask& mask, const Image& generated, const Image& x_flipped) {
  ag::NoGradGuard guard;
  return as_double(symmetry_loss(mask_batch(std::span(&mask, 1)), nn::to_batch(generated),
                                 nn::to_batch(x_flipped)));
}

// ---------------------------------------------------------------- frozen networks

Var identity_loss(const Var& embedding_x, const Var& embedding_generated) {
  require_same_shape(embedding_x, embedding_generated, "identity_loss");
  return mean_squared(embedding_generated, embedding_x);
}

Var identity_loss(const nn::FaceExpert& fem, const Var& x, const Var& generated) {
  Var target;
  {
    ag::NoGradGuard guard;
    target = fem.forward(x);
  }
  return identity_loss(target, fem.forward(generated));
}

double identity_loss(const nn::FaceExpert& fem, const Image& x, const Image& generated) {
  ag::NoGradGuard guard;
  return as_double(identity_loss(fem, nn::to_batch(x), nn::to_batch(generated)));
}

Var pose_loss(const Var& target_theta, const Var& predicted_theta) {
  require_same_shape(target_theta, predicted_theta, "pose_loss");
  return mean_squared(predicted_theta, target_theta);
}

Var pose_loss(const nn::ShapeRegressor& fsr, const Var& target_theta, const Var& generated) {
  return pose_loss(target_theta, fsr.forward(generated));
}

double pose_loss(const nn::ShapeRegressor& fsr, const face::ShapeParams& target,
                 const Image& generated) {
  ag::NoGradGuard guard;
  const auto flat = target.flatten();
  const Var t = Var::constant({1, static_cast<int>(flat.size())}, flat);
  return as_double(pose_loss(fsr, t, nn::to_batch(generated)));
}

// ---------------------------------------------------------------- adversarial

namespace {

Var critic_scores(const Critic& critic, const Var& x) {
  Var s = critic(x);
  if (s.size() != static_cast<std::size_t>(x.dim(0))) {
    throw ContractError("critic must return one score per sample, got " + ag::shape_str(s.shape()));
  }
  return s;
}

}  // namespace

Var gradient_penalty(const Critic& critic, const Var& real, const Var& fake,
                     std::span<const double> u) {
  require_same_shape(real, fake, "gradient_penalty");
  const int n = real.dim(0);
  if (u.size() != static_cast<std::size_t>(n)) throw ContractError("gradient_penalty: one u per sample");
  const std::size_t per = real.size() / n;
  std::vector<double> mixed(real.size());
  for (int i = 0; i < n; ++i)
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t j = i * per + k;
      mixed[j] = u[i] * real.data()[j] + (1.0 - u[i]) * fake.data()[j];
    }
  const Var x_hat = Var::parameter(real.shape(), std::move(mixed));
  const Var scores = critic_scores(critic, x_hat);
  const Var g = ag::grad(ag::sum(scores), {x_hat}, /*create_graph=*/true)[0];
  if (!g.defined()) throw ContractError("critic output does not depend on its input");
  const Var norm = ag::sqrt(ag::add_scalar(ag::row_sum(ag::square(g)), 1e-12));
  return ag::mean(ag::square(ag::add_scalar(norm, -1.0)));
}

CriticLoss critic_loss(const Critic& critic, const Var& real, const Var& fake,
                       std::mt19937_64& rng, double lambda_gp) {
  require_same_shape(real, fake, "critic_loss");
  const Var fake_c = fake.detach();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> u(real.dim(0));
  for (auto& v : u) v = unit(rng);
  const Var on_real = ag::mean(critic_scores(critic, real));
  const Var on_fake = ag::mean(critic_scores(critic, fake_c));
  const Var penalty = gradient_penalty(critic, real.detach(), fake_c, u);
  CriticLoss out;
  out.penalty = penalty;
  out.d_loss = on_fake - on_real + ag::scale(penalty, lambda_gp);
  out.wasserstein = on_real.item() - on_fake.item();
  return out;
}

Var generator_adversarial_loss(const Critic& critic, const Var& generated) {
  return ag::neg(ag::mean(critic_scores(critic, generated)));
}

AdversarialLosses adversarial_losses(const Critic& critic, const Var& x, const Var& generated,
                                     std::mt19937_64& rng, double lambda_gp) {
  const CriticLoss c = critic_loss(critic, x, generated, rng, lambda_gp);
  return AdversarialLosses{c.d_loss, generator_adversarial_loss(critic, generated), c.penalty};
}

// ---------------------------------------------------------------- classification

Var classification_loss(const Var& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2 || logits.dim(0) != static_cast<int>(labels.size())) {
    throw ContractError("classification_loss: logits " + ag::shape_str(logits.shape()) +
                        " for " + std::to_string(labels.size()) + " labels");
  }
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<double> pick(logits.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw ContractError("classification_loss: label out of range");
    pick[static_cast<std::size_t>(i) * k + labels[i]] = 1.0;
  }
  const Var picked = ag::sum(ag::log_softmax_rows(logits) * Var::constant(logits.shape(), pick));
  return ag::scale(picked, -1.0 / n);
}

std::vector<int> labels_of(std::span<const codes::IlluminationCode> codes) {
  std::vector<int> out;
  out.reserve(codes.size());
  for (const auto& c : codes) out.push_back(c.label());  // throws on soft codes
  return out;
}

ClassificationLosses classification_losses(const nn::Discriminator& d, const Var& x,
                                           std::span<const codes::IlluminationCode> true_labels,
                                           const Var& generated,
                                           std::span<const codes::IlluminationCode> target_labels) {
  const auto real_labels = labels_of(true_labels);
  const auto fake_labels = labels_of(target_labels);
  return ClassificationLosses{classification_loss(d.forward(x).cls, real_labels),
                              classification_loss(d.forward(generated).cls, fake_labels)};
}

// ---------------------------------------------------------------- angular margin

Var angular_margin_loss(const Var& embeddings, const Var& class_weights, std::span<const int> labels,
                        double s, double m) {
  if (embeddings.shape().size() != 2 || class_weights.shape().size() != 2 ||
      embeddings.dim(1) != class_weights.dim(1) || embeddings.dim(0) != static_cast<int>(labels.size())) {
    throw ContractError("angular_margin_loss: incompatible shapes");
  }
  if (!(s > 0.0) || !(m >= 0.0) || m >= std::numbers::pi / 2) {
    throw ContractError("angular_margin_loss: need s > 0 and 0 <= m < pi/2");
  }
  require_unit_rows(embeddings, "angular_margin_loss embeddings");
  require_unit_rows(class_weights, "angular_margin_loss class weights");

  const int n = embeddings.dim(0), k = class_weights.dim(0);
  const Var cosine = ag::matmul(embeddings, class_weights, false, true);  // [N,K]
  std::vector<double> target(cosine.size(), 0.0), easy(cosine.size(), 1.0);
  const double threshold = std::cos(std::numbers::pi - m);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw ContractError("angular_margin_loss: label out of range");
    const std::size_t j = static_cast<std::size_t>(i) * k + labels[i];
    target[j] = 1.0;
    // theta + m would pass pi: fall back to the monotone surrogate.
    easy[j] = cosine.data()[j] > threshold ? 1.0 : 0.0;
  }
  const Var sine = ag::sqrt(ag::clamp_min(ag::add_scalar(ag::neg(ag::square(cosine)), 1.0), 1e-12));
  const Var shifted = ag::scale(cosine, std::cos(m)) - ag::scale(sine, std::sin(m));
  const Var surrogate = ag::add_scalar(cosine, -m * std::sin(m));
  const Var with_margin = ag::where(easy, shifted, surrogate);
  const Var logits = ag::scale(ag::where(target, with_margin, cosine), s);
  const Var picked = ag::sum(ag::log_softmax_rows(logits) * Var::constant(cosine.shape(), target));
  return ag::scale(picked, -1.0 / n);
}

// ---------------------------------------------------------------- logging

nlohmann::json to_json(const GeneratorLossReport& r) {
  nlohmann::json j;
  for (Component c : kComponents) j[component_name(c)] = r.get(c);
  j["total"] = r.total;
  return j;
}

std::string log_line(int step, const GeneratorLossReport& r, const nlohmann::json& extra) {
  nlohmann::json j = to_json(r);
  j["step"] = step;
  if (extra.is_object())
    for (auto& [key, value] : extra.items()) j[key] = value;
  return j.dump();
}

}  // namespace dotfan::losses
