#include "dotfan/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "dotfan/errors.hpp"
#include "dotfan/io.hpp"
#include "dotfan/seeding.hpp"

namespace dotfan::eval {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kUnitTolerance = 1e-6;
constexpr std::uint64_t kPairTag = fnv1a("verification_pairs");
constexpr std::size_t kChunk = 64;

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("embeddings differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (std::abs(std::sqrt(na) - 1.0) > kUnitTolerance || std::abs(std::sqrt(nb) - 1.0) > kUnitTolerance) {
    throw ContractError("verification embeddings must be unit-norm");
  }
  return std::clamp(dot, -1.0, 1.0);
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::vector<std::vector<double>> embed(const nn::FaceExpert& fem, std::span<const Image> images) {
  ag::NoGradGuard guard;
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
    const ag::Var e = fem.forward(nn::to_batch(chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(nn::row_of(e, static_cast<int>(i)));
  }
  return out;
}

}  // namespace

EvalReport verification_metrics(std::span<const ScoredPair> pairs) {
  std::size_t positives = 0;
  for (const auto& p : pairs) {
    if (!std::isfinite(p.similarity)) throw ContractError("similarity must be finite");
    positives += p.same_identity;
  }
  const std::size_t negatives = pairs.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw ContractError("verification needs at least one positive and one negative pair");
  }

  std::vector<ScoredPair> sorted(pairs.begin(), pairs.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredPair& a, const ScoredPair& b) { return a.similarity > b.similarity; });

  EvalReport r;
  r.n_pairs = pairs.size();
  const double n = static_cast<double>(pairs.size());
  // Threshold +inf accepts nothing.
  r.roc.push_back({kInf, 0.0, 0.0});
  r.accuracy = static_cast<double>(negatives) / n;
  r.threshold_used = kInf;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i].similarity;
    for (; i < sorted.size() && sorted[i].similarity == t; ++i) {
      if (sorted[i].same_identity) ++tp;
      else ++fp;
    }
    const double acc = static_cast<double>(tp + (negatives - fp)) / n;
    if (acc > r.accuracy) r.accuracy = acc, r.threshold_used = t;
    r.roc.push_back({t, static_cast<double>(fp) / negatives, static_cast<double>(tp) / positives});
  }
  // Threshold -inf accepts everything; it adds no new ROC point.
  r.roc.push_back({-kInf, 1.0, 1.0});
  const double all_accept = static_cast<double>(positives) / n;
  if (all_accept > r.accuracy) r.accuracy = all_accept, r.threshold_used = -kInf;

  for (std::size_t i = 1; i < r.roc.size(); ++i) {
    r.auc += (r.roc[i].far - r.roc[i - 1].far) * (r.roc[i].tar + r.roc[i - 1].tar) / 2.0;
  }
  for (double target : kFarTargets) r.tar_at_far[target] = tar_at_far(r.roc, target);
  return r;
}

EvalReport verification_metrics(std::span<const VerificationPair> pairs) {
  std::vector<ScoredPair> scored;
  scored.reserve(pairs.size());
  for (const auto& p : pairs) {
    scored.push_back({cosine(p.embedding_a.values, p.embedding_b.values), p.same_identity});
  }
  return verification_metrics(scored);
}

double tar_at_far(std::span<const RocPoint> roc, double far_target) {
  double best = 0.0;
  for (const auto& p : roc) {
    if (p.far <= far_target) best = std::max(best, p.tar);
  }
  return best;
}

json EvalReport::to_json() const {
  json tar = json::object();
  for (const auto& [far, value] : tar_at_far) {
    std::ostringstream key;
    key << far;
    tar[key.str()] = value;
  }
  return json{{"accuracy", accuracy}, {"tar_at_far", tar},        {"auc", auc},
              {"n_pairs", n_pairs},   {"threshold_used", number_or_null(threshold_used)}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  try {
    r.accuracy = j.at("accuracy").get<double>();
    r.auc = j.at("auc").get<double>();
    r.n_pairs = j.at("n_pairs").get<std::size_t>();
    const auto& t = j.at("threshold_used");
    r.threshold_used = t.is_null() ? std::numeric_limits<double>::quiet_NaN() : t.get<double>();
    for (const auto& [key, value] : j.at("tar_at_far").items()) r.tar_at_far[std::stod(key)] = value.get<double>();
  } catch (const std::exception& e) {
    throw DataError(std::string("malformed evaluation report: ") + e.what());
  }
  return r;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  io::write_text(path, report.to_json().dump(2) + "\n");
}

void write_roc_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ostringstream os;
  os << std::setprecision(17) << "threshold,far,tar\n";
  for (const auto& p : report.roc) {
    if (std::isinf(p.threshold)) os << (p.threshold > 0 ? "inf" : "-inf");
    else os << p.threshold;
    os << ',' << p.far << ',' << p.tar << "\n";
  }
  io::write_text(path, os.str());
}

double identity_preservation(const nn::FaceExpert& fem, std::span<const Image> sources,
                             std::span<const Image> synthesized) {
  if (sources.size() != synthesized.size()) {
    throw ContractError("identity_preservation: source and synthesized counts differ");
  }
  if (sources.empty()) throw ContractError("identity_preservation: no images");
  const auto a = embed(fem, sources);
  const auto b = embed(fem, synthesized);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += cosine(a[i], b[i]);
  return std::clamp(total / static_cast<double>(a.size()), -1.0, 1.0);
}

double domain_accuracy(const nn::Discriminator& d, std::span<const Image> images,
                       std::span<const int> labels, int max_label) {
  if (images.size() != labels.size()) throw ContractError("domain_accuracy: label count mismatch");
  std::size_t correct = 0, total = 0;
  ag::NoGradGuard guard;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
    const ag::Var logits = d.forward(nn::to_batch(chunk)).cls;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const int label = labels[start + i];
      if (label < 0 || label > max_label) continue;
      const auto row = nn::row_of(logits, static_cast<int>(i));
      const auto arg = std::max_element(row.begin(), row.end()) - row.begin();
      correct += arg == label;
      ++total;
    }
  }
  if (total == 0) throw ContractError("domain_accuracy: no image carries a label in range");
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::vector<ScoredPair> build_pairs(const nn::FaceExpert& fem, const train::TrainingSet& test,
                                    std::size_t max_pairs, std::uint64_t seed) {
  const auto emb = embed(fem, test.images);
  std::vector<ScoredPair> pos, neg;
  for (std::size_t i = 0; i < emb.size(); ++i)
    for (std::size_t j = i + 1; j < emb.size(); ++j) {
      const ScoredPair p{cosine(emb[i], emb[j]), test.identities[i] == test.identities[j]};
      (p.same_identity ? pos : neg).push_back(p);
    }
  if (pos.size() + neg.size() <= max_pairs) {
    pos.insert(pos.end(), neg.begin(), neg.end());
    return pos;
  }
  const std::size_t n_pos = std::min(pos.size(), max_pairs / 2);
  const std::size_t n_neg = std::min(neg.size(), max_pairs - n_pos);
  std::mt19937_64 rng(derive_seed(seed, {kPairTag}));
  std::vector<ScoredPair> out;
  std::sample(pos.begin(), pos.end(), std::back_inserter(out), n_pos, rng);
  std::sample(neg.begin(), neg.end(), std::back_inserter(out), n_neg, rng);
  return out;
}

EvalReport recognition_experiment(const train::TrainingSet& train_set, const train::TrainingSet& test_set,
                                  const train::TrainConfig& config, std::size_t max_pairs) {
  const auto train_ids = train_set.identity_labels();
  for (int id : test_set.identity_labels()) {
    if (std::binary_search(train_ids.begin(), train_ids.end(), id)) {
      throw ContractError("recognition_experiment: identity " + std::to_string(id) +
                          " appears in both train and test sets");
    }
  }
  auto c = config;
  c.holdout_fraction = 0.0;
  const auto fem = train::pretrain_fem(train_set, c).fem;
  const auto pairs = build_pairs(fem, test_set, max_pairs, config.seed);
  return verification_metrics(pairs);
}

EvalReport recognition_experiment(const std::filesystem::path& train_manifest,
                                  const std::filesystem::path& test_manifest,
                                  const train::TrainConfig& config, std::size_t max_pairs) {
  return recognition_experiment(train::TrainingSet::from_manifest(train_manifest),
                                train::TrainingSet::from_manifest(test_manifest), config, max_pairs);
}

}  // namespace dotfan::eval
