#pragma once

// Verification metrics over cosine similarities, the identity-preservation
// score for synthesized faces, and the train-then-verify recognition
// experiment.
//
// A pair is accepted when similarity >= threshold. Thresholds range over
// every observed similarity plus +inf (accept nothing) and -inf (accept
// everything).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "dotfan/codes.hpp"
#include "dotfan/image.hpp"
#include "dotfan/networks.hpp"
#include "dotfan/trainer.hpp"
#include "json.hpp"

namespace dotfan::eval {

struct VerificationPair {
  codes::IdentityCode embedding_a;
  codes::IdentityCode embedding_b;
  bool same_identity = false;
};

struct ScoredPair {
  double similarity = 0.0;
  bool same_identity = false;
};

struct RocPoint {
  double threshold = 0.0;
  double far = 0.0;
  double tar = 0.0;
};

inline constexpr double kFarTargets[] = {0.01, 0.001};

struct EvalReport {
  double accuracy = 0.0;                // best over all thresholds
  std::map<double, double> tar_at_far;  // keyed by FAR target
  double auc = 0.0;
  std::size_t n_pairs = 0;
  double threshold_used = 0.0;          // threshold reaching `accuracy`
  std::vector<RocPoint> roc;            // from (0, 0) to (1, 1), FAR non-decreasing

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

// Throws ContractError unless both classes are present and every
// similarity is finite.
EvalReport verification_metrics(std::span<const ScoredPair> pairs);
// Cosine similarity of unit embeddings; throws ContractError otherwise.
EvalReport verification_metrics(std::span<const VerificationPair> pairs);

// TAR at the most permissive threshold whose FAR <= far_target.
double tar_at_far(std::span<const RocPoint> roc, double far_target);

void write_report(const std::filesystem::path& path, const EvalReport& report);
// CSV `threshold,far,tar`; infinite thresholds print as inf / -inf.
void write_roc_csv(const std::filesystem::path& path, const EvalReport& report);

// Mean cosine between embeddings of paired images; in [-1, 1].
double identity_preservation(const nn::FaceExpert& fem, std::span<const Image> sources,
                             std::span<const Image> synthesized);

// Fraction of images whose arg-max domain logit equals their label,
// restricted to labels in [0, max_label].
double domain_accuracy(const nn::Discriminator& d, std::span<const Image> images,
                       std::span<const int> labels, int max_label = codes::kLitLabelCount - 1);

// Every same/different pair of the set, subsampled to at most max_pairs
// (half positives when possible) with a seeded draw.
std::vector<ScoredPair> build_pairs(const nn::FaceExpert& fem, const train::TrainingSet& test,
                                    std::size_t max_pairs, std::uint64_t seed);

// Trains a fresh embedder on `train` (no hold-out) and verifies on `test`.
// Throws ContractError when the identity sets overlap.
EvalReport recognition_experiment(const train::TrainingSet& train_set, const train::TrainingSet& test_set,
                                  const train::TrainConfig& config, std::size_t max_pairs = 2000);
EvalReport recognition_experiment(const std::filesystem::path& train_manifest,
                                  const std::filesystem::path& test_manifest,
                                  const train::TrainConfig& config, std::size_t max_pairs = 2000);

}  // namespace dotfan::eval
