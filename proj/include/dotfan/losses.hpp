#pragma once

// Generator, critic and embedding losses. Batched losses take [N,...]
// tensors and average over the batch; each divides by the length of its own
// residual (pixels, embedding width or Theta length).

#include <array>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dotfan/autograd.hpp"
#include "dotfan/codes.hpp"
#include "dotfan/face_model.hpp"
#include "dotfan/image.hpp"
#include "dotfan/networks.hpp"
#include "json.hpp"

namespace dotfan::losses {

enum class Component { adv = 0, cls, id, pose, sym, cycle };
inline constexpr int kComponentCount = 6;
const char* component_name(Component c);
inline constexpr std::array<Component, kComponentCount> kComponents{
    Component::adv, Component::cls, Component::id, Component::pose, Component::sym, Component::cycle};

struct LossWeights {
  double w_adv = 1.0;
  double w_cls = 1.0;
  double w_id = 8.0;
  double w_pose = 6.0;
  double w_sym = 5.0;
  double w_cycle = 5.0;
  double lambda_gp = 10.0;

  double weight(Component c) const;
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

// Per-component on/off switches; a disabled term is never added to the
// objective, so it contributes no gradient.
struct AblationMask {
  std::array<bool, kComponentCount> enabled{true, true, true, true, true, true};

  bool on(Component c) const { return enabled[static_cast<int>(c)]; }
  void set(Component c, bool value) { enabled[static_cast<int>(c)] = value; }
  bool operator==(const AblationMask&) const = default;
};

struct GeneratorLossReport {
  double adv = 0.0;
  double cls = 0.0;
  double id = 0.0;
  double pose = 0.0;
  double sym = 0.0;
  double cycle = 0.0;
  double total = 0.0;

  double get(Component c) const;
  void set(Component c, double value);
};

// Weighted sum of the components (total is recomputed). Throws LossError
// naming the first non-finite component.
GeneratorLossReport total_generator_loss(GeneratorLossReport components, const LossWeights& w,
                                         const AblationMask& mask = {});

// Differentiable counterpart used by the trainer. Components absent from
// the mask may be left undefined.
struct GeneratorTerms {
  std::array<ag::Var, kComponentCount> terms;

  ag::Var& operator[](Component c) { return terms[static_cast<int>(c)]; }
  const ag::Var& operator[](Component c) const { return terms[static_cast<int>(c)]; }
};
ag::Var weighted_objective(const GeneratorTerms& terms, const LossWeights& w,
                           const AblationMask& mask, GeneratorLossReport* report = nullptr);

// ---- reconstruction terms ----
ag::Var cycle_loss(const ag::Var& x, const ag::Var& x_cycled);
// mask is [N,1,H,W] or [N,3,H,W] with entries in {0, 1}.
ag::Var symmetry_loss(const ag::Var& mask, const ag::Var& generated, const ag::Var& x_flipped);
ag::Var mask_batch(std::span<const face::FaceMask> masks);

double cycle_loss(const Image& x, const Image& x_cycled);
double symmetry_loss(const face::FaceMask& mask, const Image& generated, const Image& x_flipped);

// ---- frozen-network terms ----
ag::Var identity_loss(const ag::Var& embedding_x, const ag::Var& embedding_generated);
// Embeds x without a tape; gradients reach `generated` only.
ag::Var identity_loss(const nn::FaceExpert& fem, const ag::Var& x, const ag::Var& generated);
double identity_loss(const nn::FaceExpert& fem, const Image& x, const Image& generated);

ag::Var pose_loss(const ag::Var& target_theta, const ag::Var& predicted_theta);
ag::Var pose_loss(const nn::ShapeRegressor& fsr, const ag::Var& target_theta,
                  const ag::Var& generated);
double pose_loss(const nn::ShapeRegressor& fsr, const face::ShapeParams& target,
                 const Image& generated);

// ---- adversarial terms ----
// A critic maps [N,3,H,W] to scores [N,1] (or [N]).
using Critic = std::function<ag::Var(const ag::Var&)>;

struct CriticLoss {
  ag::Var d_loss;       // mean D(fake) - mean D(real) + lambda * penalty
  ag::Var penalty;      // mean (||grad D(x_hat)|| - 1)^2, unweighted
  double wasserstein = 0.0;  // mean D(real) - mean D(fake)
};

// x_hat = u x + (1 - u) fake with u ~ U(0, 1) per sample. `fake` is
// treated as a constant.
CriticLoss critic_loss(const Critic& critic, const ag::Var& real, const ag::Var& fake,
                       std::mt19937_64& rng, double lambda_gp);
// Penalty at fixed interpolation weights u (one per sample).
ag::Var gradient_penalty(const Critic& critic, const ag::Var& real, const ag::Var& fake,
                         std::span<const double> u);
ag::Var generator_adversarial_loss(const Critic& critic, const ag::Var& generated);

struct AdversarialLosses {
  ag::Var d_loss;
  ag::Var g_loss;
  ag::Var penalty;
};
AdversarialLosses adversarial_losses(const Critic& critic, const ag::Var& x,
                                     const ag::Var& generated, std::mt19937_64& rng,
                                     double lambda_gp);

// ---- domain classification ----
// Mean negative log-likelihood of `labels` under softmax(logits).
ag::Var classification_loss(const ag::Var& logits, std::span<const int> labels);
std::vector<int> labels_of(std::span<const codes::IlluminationCode> codes);

struct ClassificationLosses {
  ag::Var d_cls;
  ag::Var g_cls;
};
ClassificationLosses classification_losses(const nn::Discriminator& d, const ag::Var& x,
                                           std::span<const codes::IlluminationCode> true_labels,
                                           const ag::Var& generated,
                                           std::span<const codes::IlluminationCode> target_labels);

// ---- angular margin ----
// embeddings [N,d] and class_weights [K,d], both with unit rows.
ag::Var angular_margin_loss(const ag::Var& embeddings, const ag::Var& class_weights,
                            std::span<const int> labels, double s, double m);

// ---- logging ----
nlohmann::json to_json(const GeneratorLossReport& r);
std::string log_line(int step, const GeneratorLossReport& r, const nlohmann::json& extra = {});

}  // namespace dotfan::losses
