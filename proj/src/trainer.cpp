#include "dotfan/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "dotfan/errors.hpp"
#include "dotfan/seeding.hpp"
#include "json.hpp"

namespace dotfan::train {

using ag::Var;
using losses::Component;
using nlohmann::json;

namespace {

constexpr std::uint64_t kFemTag = fnv1a("pretrain_fem");
constexpr std::uint64_t kFsrTag = fnv1a("pretrain_fsr");
constexpr std::uint64_t kJointTag = fnv1a("joint");
constexpr std::uint64_t kCriticTag = fnv1a("critic");
constexpr std::uint64_t kInitTag = fnv1a("init");
constexpr int kEvalChunk = 64;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid training config: " + what);
}

std::string use_key(Component c) { return std::string("use_") + losses::component_name(c); }
std::string weight_key(Component c) { return std::string("w_") + losses::component_name(c); }

std::vector<Image> gather(const TrainingSet& d, std::span<const std::size_t> idx) {
  std::vector<Image> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(d.images[i]);
  return out;
}

Var batch_of(const TrainingSet& d, std::span<const std::size_t> idx) {
  const auto images = gather(d, idx);
  return nn::to_batch(images);
}

bool finite(double v) { return std::isfinite(v); }

// Deterministic batches over a permutation; the tail batch is kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(perm.begin() + i, perm.begin() + std::min(n, i + batch));
  }
  return out;
}

Var embed_all(const nn::FaceExpert& fem, const TrainingSet& data) {
  ag::NoGradGuard guard;
  std::vector<double> values;
  int width = 0;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + kEvalChunk); ++i) idx.push_back(i);
    const Var e = fem.forward(batch_of(data, idx));
    width = e.dim(1);
    values.insert(values.end(), e.data().begin(), e.data().end());
  }
  return Var::constant({static_cast<int>(data.size()), width}, std::move(values));
}

// Copies weights into an existing parameter set so optimizer handles stay valid.
void assign_weights(nn::ParameterSet& dst, const nn::ParameterSet& src) {
  if (dst.size() != src.size()) throw CheckpointError("parameter sets differ in size");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto& [name, var] = dst.entries()[i];
    const auto& [src_name, src_var] = src.entries()[i];
    if (name != src_name || var.shape() != src_var.shape()) {
      throw CheckpointError("parameter '" + name + "' does not match the checkpoint");
    }
    Var target = var;
    std::copy(src_var.data().begin(), src_var.data().end(), target.mutable_data().begin());
  }
}

std::vector<Var> concat_vars(std::vector<Var> a, const std::vector<Var>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void check_frozen_specs(const TrainConfig& c, const face::MorphableModel& model,
                        const nn::FaceExpert& fem, const nn::ShapeRegressor& fsr) {
  const auto& net = c.network;
  if (model.shape_dim() != net.code_dims.d_s || model.exp_dim() != net.code_dims.d_e) {
    throw CheckpointError("morphable model dimensions do not match the network config");
  }
  if (fem.spec().image_size != net.image_size || fem.spec().code_dims.d_id != net.code_dims.d_id) {
    throw CheckpointError("identity embedder is incompatible with the network config");
  }
  if (fsr.spec().image_size != net.image_size || fsr.spec().code_dims.d_s != net.code_dims.d_s ||
      fsr.spec().code_dims.d_e != net.code_dims.d_e) {
    throw CheckpointError("shape regressor is incompatible with the network config");
  }
}

}  // namespace

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  require(batch_size >= 2, "batch_size must be >= 2");
  require(total_iterations >= 1, "total_iterations must be >= 1");
  require(epochs >= 1 && epochs <= total_iterations, "epochs must be in [1, total_iterations]");
  require(lr > 0.0, "lr must be positive");
  require(lr_decay_start_epoch >= 0 && lr_decay_start_epoch <= epochs,
          "lr_decay_start_epoch must be in [0, epochs]");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must be in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must be in [0, 1)");
  require(critic_steps_per_gen_step >= 1, "critic_steps_per_gen_step must be >= 1");
  require(pretrain_epochs >= 1, "pretrain_epochs must be >= 1");
  require(pretrain_lr > 0.0, "pretrain_lr must be positive");
  require(arcface_scale > 0.0, "arcface_scale must be positive");
  require(arcface_margin >= 0.0 && arcface_margin < 1.5, "arcface_margin must be in [0, 1.5)");
  require(holdout_fraction >= 0.0 && holdout_fraction < 1.0, "holdout_fraction must be in [0, 1)");
  try {
    loss_weights.validate();
    target_poses.validate();
    network.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  TrainConfig c;
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.total_iterations = kv.get_int("total_iterations", c.total_iterations);
  c.epochs = kv.get_int("epochs", c.epochs);
  c.lr = kv.get_double("lr", c.lr);
  c.lr_decay_start_epoch = kv.get_int("lr_decay_start_epoch", c.lr_decay_start_epoch);
  c.adam_beta1 = kv.get_double("adam_beta1", c.adam_beta1);
  c.adam_beta2 = kv.get_double("adam_beta2", c.adam_beta2);
  c.critic_steps_per_gen_step = kv.get_int("critic_steps_per_gen_step", c.critic_steps_per_gen_step);
  auto& w = c.loss_weights;
  w.w_adv = kv.get_double("w_adv", w.w_adv);
  w.w_cls = kv.get_double("w_cls", w.w_cls);
  w.w_id = kv.get_double("w_id", w.w_id);
  w.w_pose = kv.get_double("w_pose", w.w_pose);
  w.w_sym = kv.get_double("w_sym", w.w_sym);
  w.w_cycle = kv.get_double("w_cycle", w.w_cycle);
  w.lambda_gp = kv.get_double("lambda_gp", w.lambda_gp);
  for (Component comp : losses::kComponents) {
    c.ablation_mask.set(comp, kv.get_bool(use_key(comp), c.ablation_mask.on(comp)));
  }
  c.seed = kv.get_u64("seed", c.seed);
  auto& p = c.target_poses;
  p.yaw_min_deg = kv.get_double("target_yaw_min_deg", p.yaw_min_deg);
  p.yaw_max_deg = kv.get_double("target_yaw_max_deg", p.yaw_max_deg);
  p.pitch_min_deg = kv.get_double("target_pitch_min_deg", p.pitch_min_deg);
  p.pitch_max_deg = kv.get_double("target_pitch_max_deg", p.pitch_max_deg);
  p.roll_min_deg = kv.get_double("target_roll_min_deg", p.roll_min_deg);
  p.roll_max_deg = kv.get_double("target_roll_max_deg", p.roll_max_deg);
  p.translation_max = kv.get_double("target_translation_max", p.translation_max);
  p.expression_max = kv.get_double("target_expression_max", p.expression_max);
  c.pretrain_epochs = kv.get_int("pretrain_epochs", c.pretrain_epochs);
  c.pretrain_lr = kv.get_double("pretrain_lr", c.pretrain_lr);
  c.arcface_scale = kv.get_double("arcface_scale", c.arcface_scale);
  c.arcface_margin = kv.get_double("arcface_margin", c.arcface_margin);
  c.holdout_fraction = kv.get_double("holdout_fraction", c.holdout_fraction);
  auto& n = c.network;
  n.image_size = kv.get_int("image_size", n.image_size);
  n.base_channels = kv.get_int("base_channels", n.base_channels);
  n.num_downsamples = kv.get_int("num_downsamples", n.num_downsamples);
  n.num_residual_blocks = kv.get_int("num_residual_blocks", n.num_residual_blocks);
  n.code_dims.d_l = kv.get_int("d_l", n.code_dims.d_l);
  n.code_dims.d_id = kv.get_int("d_id", n.code_dims.d_id);
  n.code_dims.d_s = kv.get_int("d_s", n.code_dims.d_s);
  n.code_dims.d_e = kv.get_int("d_e", n.code_dims.d_e);
  return c;
}

void TrainConfig::to_key_values(KeyValues& kv) const {
  auto put_i = [&](const std::string& k, long long v) { kv.set(k, std::to_string(v)); };
  auto put_d = [&](const std::string& k, double v) { kv.set(k, format_double(v)); };
  put_i("batch_size", batch_size);
  put_i("total_iterations", total_iterations);
  put_i("epochs", epochs);
  put_d("lr", lr);
  put_i("lr_decay_start_epoch", lr_decay_start_epoch);
  put_d("adam_beta1", adam_beta1);
  put_d("adam_beta2", adam_beta2);
  put_i("critic_steps_per_gen_step", critic_steps_per_gen_step);
  for (Component comp : losses::kComponents) {
    put_d(weight_key(comp), loss_weights.weight(comp));
    kv.set(use_key(comp), ablation_mask.on(comp) ? "true" : "false");
  }
  put_d("lambda_gp", loss_weights.lambda_gp);
  kv.set("seed", std::to_string(seed));
  put_d("target_yaw_min_deg", target_poses.yaw_min_deg);
  put_d("target_yaw_max_deg", target_poses.yaw_max_deg);
  put_d("target_pitch_min_deg", target_poses.pitch_min_deg);
  put_d("target_pitch_max_deg", target_poses.pitch_max_deg);
  put_d("target_roll_min_deg", target_poses.roll_min_deg);
  put_d("target_roll_max_deg", target_poses.roll_max_deg);
  put_d("target_translation_max", target_poses.translation_max);
  put_d("target_expression_max", target_poses.expression_max);
  put_i("pretrain_epochs", pretrain_epochs);
  put_d("pretrain_lr", pretrain_lr);
  put_d("arcface_scale", arcface_scale);
  put_d("arcface_margin", arcface_margin);
  put_d("holdout_fraction", holdout_fraction);
  put_i("image_size", network.image_size);
  put_i("base_channels", network.base_channels);
  put_i("num_downsamples", network.num_downsamples);
  put_i("num_residual_blocks", network.num_residual_blocks);
  put_i("d_l", network.code_dims.d_l);
  put_i("d_id", network.code_dims.d_id);
  put_i("d_s", network.code_dims.d_s);
  put_i("d_e", network.code_dims.d_e);
}

std::string TrainConfig::to_text() const {
  KeyValues kv;
  to_key_values(kv);
  return kv.to_text();
}

TrainConfig TrainConfig::parse(std::string_view text, const std::string& source) {
  const auto kv = KeyValues::parse(text, source);
  auto c = from_key_values(kv);
  kv.require_all_used();
  c.validate();
  return c;
}

int epoch_of(const TrainConfig& c, int step) {
  const long long e = static_cast<long long>(step) * c.epochs / c.total_iterations;
  return static_cast<int>(std::min<long long>(e, c.epochs - 1));
}

int decay_start_step(const TrainConfig& c) {
  // Smallest step whose epoch is >= lr_decay_start_epoch.
  const long long num = static_cast<long long>(c.lr_decay_start_epoch) * c.total_iterations;
  return static_cast<int>((num + c.epochs - 1) / c.epochs);
}

double learning_rate(const TrainConfig& c, int step) {
  const int start = decay_start_step(c);
  const int last = c.total_iterations - 1;
  if (step < start) return c.lr;
  if (last <= start) return step >= last ? 0.0 : c.lr;
  const double remaining = static_cast<double>(last - std::min(step, last)) / (last - start);
  return c.lr * remaining;
}

// ---------------------------------------------------------------- data

std::vector<int> TrainingSet::identity_labels() const {
  std::set<int> s(identities.begin(), identities.end());
  return {s.begin(), s.end()};
}

bool TrainingSet::has_all_thetas() const {
  return std::all_of(thetas.begin(), thetas.end(), [](const auto& t) { return t.has_value(); });
}

void TrainingSet::validate() const {
  const std::size_t n = images.size();
  if (identities.size() != n || illuminations.size() != n || thetas.size() != n) {
    throw ContractError("training set columns differ in length");
  }
  if (n == 0) throw ContractError("training set is empty");
  for (std::size_t i = 0; i < n; ++i) {
    if (images[i].size != images.front().size) throw ContractError("training images differ in size");
    if (illuminations[i] < 0 || illuminations[i] >= codes::kIlluminationSize) {
      throw ContractError("illumination label out of range");
    }
  }
}

TrainingSet TrainingSet::subset(std::span<const std::size_t> indices) const {
  TrainingSet out;
  for (auto i : indices) {
    out.images.push_back(images.at(i));
    out.identities.push_back(identities.at(i));
    out.illuminations.push_back(illuminations.at(i));
    out.thetas.push_back(thetas.at(i));
  }
  return out;
}

TrainingSet TrainingSet::from_dataset(const synth::ToyDataset& dataset) {
  TrainingSet out;
  for (const auto& r : dataset.records) {
    out.images.push_back(r.image);
    out.identities.push_back(r.identity_label);
    out.illuminations.push_back(r.illumination_label);
    out.thetas.emplace_back(r.theta);
  }
  return out;
}

TrainingSet TrainingSet::from_manifest(const std::filesystem::path& csv) {
  const auto manifest = synth::read_manifest(csv);
  TrainingSet out;
  out.images = synth::load_images(csv, manifest);
  for (const auto& row : manifest.rows) {
    out.identities.push_back(row.identity);
    out.illuminations.push_back(row.illumination);
    out.thetas.push_back(row.theta);
  }
  return out;
}

std::pair<TrainingSet, TrainingSet> split_holdout(const TrainingSet& data, double fraction) {
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < data.size(); ++i) by_identity[data.identities[i]].push_back(i);
  std::vector<std::size_t> train_idx, held_idx;
  for (const auto& [label, idx] : by_identity) {
    const auto n = idx.size();
    auto held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
    held = std::min(held, n - 1);
    train_idx.insert(train_idx.end(), idx.begin(), idx.end() - held);
    held_idx.insert(held_idx.end(), idx.end() - held, idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(held_idx.begin(), held_idx.end());
  return {data.subset(train_idx), data.subset(held_idx)};
}

// ---------------------------------------------------------------- Adam

Adam::Adam(std::vector<Var> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step(std::span<const Var> grads, double lr) {
  if (grads.size() != params_.size()) throw ContractError("Adam: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k].mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    const bool has = grads[k].defined();
    if (has && grads[k].size() != w.size()) throw ContractError("Adam: gradient shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has ? grads[k].data()[i] : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Adam::save_to(io::ArrayArchive& archive, const std::string& prefix) const {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const int n = static_cast<int>(m_[k].size());
    archive.arrays[prefix + "/m/" + std::to_string(k)] = io::NamedArray{{n}, m_[k]};
    archive.arrays[prefix + "/v/" + std::to_string(k)] = io::NamedArray{{n}, v_[k]};
  }
  archive.arrays[prefix + "/t"] = io::NamedArray{{1}, {static_cast<double>(t_)}};
}

void Adam::load_from(const io::ArrayArchive& archive, const std::string& prefix) {
  try {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto& m = archive.at(prefix + "/m/" + std::to_string(k)).values;
      const auto& v = archive.at(prefix + "/v/" + std::to_string(k)).values;
      if (m.size() != m_[k].size() || v.size() != v_[k].size()) {
        throw CheckpointError("optimizer moments for '" + prefix + "' have the wrong size");
      }
      m_[k] = m;
      v_[k] = v;
    }
    t_ = static_cast<std::int64_t>(archive.at(prefix + "/t").values.at(0));
  } catch (const std::out_of_range& e) {
    throw CheckpointError("optimizer state '" + prefix + "' incomplete: " + e.what());
  }
}

// ---------------------------------------------------------------- pretraining

double cosine_gap(const nn::FaceExpert& fem, const TrainingSet& data) {
  if (data.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const Var emb = embed_all(fem, data);
  const int n = emb.dim(0), d = emb.dim(1);
  double intra = 0.0, inter = 0.0;
  long long n_intra = 0, n_inter = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double c = 0.0;
      for (int k = 0; k < d; ++k) c += emb.data()[i * d + k] * emb.data()[j * d + k];
      if (data.identities[i] == data.identities[j]) intra += c, ++n_intra;
      else inter += c, ++n_inter;
    }
  if (n_intra == 0 || n_inter == 0) return std::numeric_limits<double>::quiet_NaN();
  return intra / n_intra - inter / n_inter;
}

FemPretrainResult pretrain_fem(const TrainingSet& data, const TrainConfig& config, std::ostream* log) {
  config.validate();
  data.validate();
  const auto labels = data.identity_labels();
  if (labels.size() < 2) throw ContractError("identity embedder pretraining needs >= 2 identities");
  std::map<int, int> class_of;
  for (std::size_t k = 0; k < labels.size(); ++k) class_of[labels[k]] = static_cast<int>(k);
  const auto [train, held] = split_holdout(data, config.holdout_fraction);

  FemPretrainResult result{nn::FaceExpert(config.network, derive_seed(config.seed, {kFemTag, kInitTag})),
                           0.0, {}, 0.0};
  nn::FaceExpert& fem = result.fem;
  const int k = static_cast<int>(labels.size());
  const int d = config.network.code_dims.d_id;
  std::vector<double> w0(static_cast<std::size_t>(k) * d);
  std::mt19937_64 init_rng(derive_seed(config.seed, {kFemTag, 1}));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : w0) v = normal(init_rng);
  Var class_weights = Var::parameter({k, d}, std::move(w0));
  const auto params = concat_vars(fem.parameters().vars(), {class_weights});
  Adam opt(params, config.adam_beta1, config.adam_beta2);

  bool first = true;
  for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    const auto batches = epoch_batches(train.size(), config.batch_size,
                                       derive_seed(config.seed, {kFemTag, 2, static_cast<std::uint64_t>(epoch)}));
    double acc = 0.0;
    for (const auto& idx : batches) {
      std::vector<int> cls;
      for (auto i : idx) cls.push_back(class_of.at(train.identities[i]));
      const Var emb = fem.forward(batch_of(train, idx));
      const Var loss = losses::angular_margin_loss(emb, ag::l2_normalize_rows(class_weights), cls,
                                                   config.arcface_scale, config.arcface_margin);
      const double value = loss.item();
      if (!finite(value)) {
        throw LossError("arcface", "non-finite angular margin loss in epoch " + std::to_string(epoch));
      }
      if (first) result.first_batch_loss = value, first = false;
      acc += value;
      opt.step(ag::grad(loss, params), config.pretrain_lr);
    }
    result.epoch_losses.push_back(acc / static_cast<double>(batches.size()));
    if (log) *log << json{{"epoch", epoch}, {"arcface", result.epoch_losses.back()}}.dump() << "\n";
  }
  result.heldout_gap = cosine_gap(fem, held);
  return result;
}

FsrPretrainResult pretrain_fsr(const TrainingSet& data, const TrainConfig& config, std::ostream* log) {
  config.validate();
  data.validate();
  if (!data.has_all_thetas()) throw DataError("shape regressor pretraining needs Theta on every record");
  const auto [train, held] = split_holdout(data, config.holdout_fraction);
  const int d_s = config.network.code_dims.d_s, d_e = config.network.code_dims.d_e;
  const int p = static_cast<int>(face::shape_params_length(d_s, d_e));

  std::vector<face::ShapeParams> pool;
  for (const auto& t : train.thetas) {
    if (t->shape_dim() != d_s || t->exp_dim() != d_e) {
      throw DataError("Theta dimensions do not match the network config");
    }
    pool.push_back(*t);
  }
  std::vector<std::vector<double>> targets, weights;
  for (const auto& t : pool) {
    targets.push_back(t.flatten());
    weights.push_back(face::build_importance_matrix(t, pool).flatten());
  }

  FsrPretrainResult result{nn::ShapeRegressor(config.network, derive_seed(config.seed, {kFsrTag, kInitTag})),
                           {}, 0.0, 0.0};
  nn::ShapeRegressor& fsr = result.fsr;
  const auto params = fsr.parameters().vars();
  Adam opt(params, config.adam_beta1, config.adam_beta2);
  for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    const auto batches = epoch_batches(train.size(), config.batch_size,
                                       derive_seed(config.seed, {kFsrTag, 2, static_cast<std::uint64_t>(epoch)}));
    double acc = 0.0;
    for (const auto& idx : batches) {
      const int b = static_cast<int>(idx.size());
      std::vector<double> t, w;
      for (auto i : idx) {
        t.insert(t.end(), targets[i].begin(), targets[i].end());
        w.insert(w.end(), weights[i].begin(), weights[i].end());
      }
      const Var pred = fsr.forward(batch_of(train, idx));
      const Var residual = pred - Var::constant({b, p}, std::move(t));
      // Per-sample weighted parameter distance, averaged over the batch.
      const Var loss = ag::scale(ag::sum(Var::constant({b, p}, std::move(w)) * ag::square(residual)), 1.0 / b);
      const double value = loss.item();
      if (!finite(value)) throw LossError("wpdc", "non-finite WPDC in epoch " + std::to_string(epoch));
      acc += value;
      opt.step(ag::grad(loss, params), config.pretrain_lr);
    }
    result.epoch_losses.push_back(acc / static_cast<double>(batches.size()));
    if (log) *log << json{{"epoch", epoch}, {"wpdc", result.epoch_losses.back()}}.dump() << "\n";
  }

  std::vector<double> mean(p, 0.0);
  for (const auto& t : targets)
    for (int i = 0; i < p; ++i) mean[i] += t[i] / static_cast<double>(targets.size());
  const auto mean_params = face::ShapeParams::unflatten(mean, d_s, d_e);
  if (held.size() > 0) {
    for (std::size_t i = 0; i < held.size(); ++i) {
      const auto& target = *held.thetas[i];
      const auto w = face::build_importance_matrix(target, pool);
      result.heldout_wpdc += face::wpdc_loss(nn::regress_shape(fsr, held.images[i]), target, w);
      result.mean_predictor_wpdc += face::wpdc_loss(mean_params, target, w);
    }
    result.heldout_wpdc /= static_cast<double>(held.size());
    result.mean_predictor_wpdc /= static_cast<double>(held.size());
  } else {
    result.heldout_wpdc = result.mean_predictor_wpdc = std::numeric_limits<double>::quiet_NaN();
  }
  return result;
}

// ---------------------------------------------------------------- joint training

std::string JointStepReport::to_log_line() const {
  return losses::log_line(step, generator,
                          json{{"epoch", epoch}, {"lr", lr}, {"d_loss", d_loss}, {"gp", gp},
                               {"wasserstein", wasserstein}, {"d_cls", d_cls}});
}

JointStepReport parse_log_line(const std::string& line) {
  JointStepReport r;
  try {
    const auto j = json::parse(line);
    r.step = j.at("step").get<int>();
    r.epoch = j.at("epoch").get<int>();
    r.lr = j.at("lr").get<double>();
    for (Component c : losses::kComponents) r.generator.set(c, j.at(losses::component_name(c)).get<double>());
    r.generator.total = j.at("total").get<double>();
    r.d_loss = j.at("d_loss").get<double>();
    r.gp = j.at("gp").get<double>();
    r.wasserstein = j.at("wasserstein").get<double>();
    r.d_cls = j.at("d_cls").get<double>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed log line: ") + e.what());
  }
  return r;
}

JointTrainer::JointTrainer(face::MorphableModel model, TrainingSet data, nn::FaceExpert fem,
                           nn::ShapeRegressor fsr, TrainConfig config)
    : model_(std::move(model)),
      data_(std::move(data)),
      fem_(std::move(fem)),
      fsr_(std::move(fsr)),
      config_(std::move(config)),
      e_(config_.network, derive_seed(config_.seed, {kJointTag, kInitTag, 1})),
      g_(config_.network, derive_seed(config_.seed, {kJointTag, kInitTag, 2})),
      d_(config_.network, derive_seed(config_.seed, {kJointTag, kInitTag, 3})),
      opt_eg_(concat_vars(e_.parameters().vars(), g_.parameters().vars()), config_.adam_beta1,
              config_.adam_beta2),
      opt_d_(d_.parameters().vars(), config_.adam_beta1, config_.adam_beta2) {
  config_.validate();
  data_.validate();
  check_frozen_specs(config_, model_, fem_, fsr_);
  if (data_.images.front().size != config_.network.image_size) {
    throw DataError("training images do not match the configured image size");
  }
  if (data_.size() < static_cast<std::size_t>(config_.batch_size)) {
    throw DataError("training set is smaller than one batch");
  }
  fem_.parameters().set_trainable(false);
  fsr_.parameters().set_trainable(false);
}

JointTrainer JointTrainer::resume(const std::filesystem::path& dir, face::MorphableModel model,
                                  TrainingSet data, nn::FaceExpert fem, nn::ShapeRegressor fsr,
                                  TrainConfig config) {
  const auto state = io::ArrayArchive::load(dir / kStateFile, "train_state");
  json header;
  try {
    header = json::parse(state.header);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("unreadable trainer state header: ") + e.what());
  }
  if (header.value("config", std::string()) != config.to_text()) {
    throw CheckpointError("trainer state was written with a different config");
  }
  JointTrainer t(std::move(model), std::move(data), std::move(fem), std::move(fsr), std::move(config));
  assign_weights(t.e_.parameters(), nn::Encoder::load(dir / kEncoderFile, t.config_.network).parameters());
  assign_weights(t.g_.parameters(), nn::Generator::load(dir / kGeneratorFile, t.config_.network).parameters());
  assign_weights(t.d_.parameters(),
                 nn::Discriminator::load(dir / kDiscriminatorFile, t.config_.network).parameters());
  t.opt_eg_.load_from(state, "eg");
  t.opt_d_.load_from(state, "d");
  t.step_ = header.at("step").get<int>();
  return t;
}

void JointTrainer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  e_.save(dir / kEncoderFile);
  g_.save(dir / kGeneratorFile);
  d_.save(dir / kDiscriminatorFile);
  io::ArrayArchive state;
  state.kind = "train_state";
  // Random draws derive from (seed, step), so the step is the whole RNG state.
  state.header = json{{"step", step_}, {"epoch", epoch_of(config_, std::max(0, step_ - 1))},
                      {"seed", config_.seed}, {"config", config_.to_text()}}
                     .dump();
  opt_eg_.save_to(state, "eg");
  opt_d_.save_to(state, "d");
  state.save(dir / kStateFile);
}

struct JointTrainer::StepBatch {
  Var x;
  Var x_flip;
  std::vector<int> source_labels;
  std::vector<int> cls_target;  // domain the generated image should show
  Var emb_x;
  Var theta_x;
  Var theta_flip;
  Var pose_target;
  Var illum_target;
  Var illum_source;
};

JointTrainer::StepBatch JointTrainer::prepare(int step) const {
  const TrainConfig& c = config_;
  const auto dims = c.network.code_dims;
  const int b = c.batch_size;
  const int p = dims.pose_length();
  const int k = codes::kIlluminationSize;
  std::mt19937_64 rng(derive_seed(c.seed, {kJointTag, static_cast<std::uint64_t>(step)}));
  StepBatch batch;

  // Distinct records in random order.
  std::vector<std::size_t> all(data_.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::size_t> idx;
  std::sample(all.begin(), all.end(), std::back_inserter(idx), b, rng);
  std::shuffle(idx.begin(), idx.end(), rng);
  batch.x = batch_of(data_, idx);
  for (auto i : idx) batch.source_labels.push_back(data_.illuminations[i]);
  batch.x_flip = ag::flip_horizontal(batch.x);

  // Frozen-network features of x and of its mirror image.
  {
    ag::NoGradGuard guard;
    batch.emb_x = fem_.forward(batch.x);
    batch.theta_x = fsr_.forward(batch.x);
    batch.theta_flip = fsr_.forward(batch.x_flip);
  }

  // Target attributes; the shape segment is kept from the regressed source.
  const auto illum = codes::IlluminationDistribution::uniform_all();
  std::vector<double> pose_t(static_cast<std::size_t>(b) * p), onehot_t(static_cast<std::size_t>(b) * k, 0.0),
      onehot_x(static_cast<std::size_t>(b) * k, 0.0);
  batch.cls_target.resize(b);
  for (int i = 0; i < b; ++i) {
    const auto target = codes::sample_target_attributes(rng, c.target_poses, illum, dims.d_s, dims.d_e);
    auto flat = target.pose.flatten();
    const int shape_at = face::kRotationLength + face::kTranslationLength;
    for (int j = shape_at; j < shape_at + dims.d_s; ++j) flat[j] = batch.theta_x.data()[i * p + j];
    std::copy(flat.begin(), flat.end(), pose_t.begin() + static_cast<std::ptrdiff_t>(i) * p);
    const int label = target.illumination.label();
    onehot_t[i * k + label] = 1.0;
    onehot_x[i * k + batch.source_labels[i]] = 1.0;
    // Pass-through keeps the source's lighting, so its domain is the source's.
    batch.cls_target[i] = label == codes::kPassThroughLabel ? batch.source_labels[i] : label;
  }
  batch.pose_target = Var::constant({b, p}, std::move(pose_t));
  batch.illum_target = Var::constant({b, k}, std::move(onehot_t));
  batch.illum_source = Var::constant({b, k}, std::move(onehot_x));
  return batch;
}

losses::GeneratorTerms JointTrainer::generator_terms(const StepBatch& batch) const {
  const auto& mask = config_.ablation_mask;
  const auto dims = config_.network.code_dims;
  const int s = config_.network.image_size;
  const Var latent = e_.forward(batch.x);
  const Var generated = g_.forward(ag::concat1({latent, batch.emb_x, batch.pose_target, batch.illum_target}));
  losses::GeneratorTerms terms;
  if (mask.on(Component::adv) || mask.on(Component::cls)) {
    const auto out = d_.forward(generated);
    if (mask.on(Component::adv)) terms[Component::adv] = ag::neg(ag::mean(out.src));
    if (mask.on(Component::cls)) terms[Component::cls] = losses::classification_loss(out.cls, batch.cls_target);
  }
  if (mask.on(Component::id)) {
    terms[Component::id] = losses::identity_loss(batch.emb_x, fem_.forward(generated));
  }
  if (mask.on(Component::pose)) {
    terms[Component::pose] = losses::pose_loss(batch.pose_target, fsr_.forward(generated));
  }
  if (mask.on(Component::sym)) {
    std::vector<face::FaceMask> masks;
    for (int i = 0; i < batch.theta_flip.dim(0); ++i) {
      const auto row = nn::row_of(batch.theta_flip, i);
      masks.push_back(face::render_mask(model_, face::ShapeParams::unflatten(row, dims.d_s, dims.d_e), s, s));
    }
    const Var mirrored = g_.forward(ag::concat1({latent, batch.emb_x, batch.theta_flip, batch.illum_source}));
    terms[Component::sym] = losses::symmetry_loss(losses::mask_batch(masks), mirrored, batch.x_flip);
  }
  if (mask.on(Component::cycle)) {
    const Var cycled =
        g_.forward(ag::concat1({e_.forward(generated), batch.emb_x, batch.theta_x, batch.illum_source}));
    terms[Component::cycle] = losses::cycle_loss(batch.x, cycled);
  }
  return terms;
}

losses::GeneratorLossReport JointTrainer::evaluate_generator(int step) const {
  ag::NoGradGuard guard;
  const auto batch = prepare(step);
  losses::GeneratorLossReport report;
  losses::weighted_objective(generator_terms(batch), config_.loss_weights, config_.ablation_mask, &report);
  return report;
}

JointStepReport JointTrainer::step() {
  if (done()) throw ContractError("joint training already reached total_iterations");
  const TrainConfig& c = config_;
  const auto& w = c.loss_weights;
  const auto step_id = static_cast<std::uint64_t>(step_);
  JointStepReport report;
  report.step = step_;
  report.epoch = epoch_of(c, step_);
  report.lr = learning_rate(c, step_);
  const auto fail = [&](const std::string& component, double value) {
    if (!finite(value)) {
      throw LossError(component, "loss '" + component + "' is not finite at step " + std::to_string(step_));
    }
  };
  const StepBatch batch = prepare(step_);

  // Critic updates against one detached fake batch.
  const losses::Critic critic = [this](const Var& v) { return d_.source_score(v); };
  Var fake;
  {
    ag::NoGradGuard guard;
    fake = g_.forward(ag::concat1({e_.forward(batch.x), batch.emb_x, batch.pose_target, batch.illum_target}));
  }
  const auto d_params = d_.parameters().vars();
  for (int j = 0; j < c.critic_steps_per_gen_step; ++j) {
    std::mt19937_64 crng(derive_seed(c.seed, {kCriticTag, step_id, static_cast<std::uint64_t>(j)}));
    const auto cl = losses::critic_loss(critic, batch.x, fake, crng, w.lambda_gp);
    const Var d_cls = losses::classification_loss(d_.forward(batch.x).cls, batch.source_labels);
    fail("d_adv", cl.d_loss.item());
    fail("d_cls", d_cls.item());
    const Var total = cl.d_loss + ag::scale(d_cls, w.w_cls);
    opt_d_.step(ag::grad(total, d_params), report.lr);
    report.d_loss = cl.d_loss.item();
    report.gp += cl.penalty.item() / c.critic_steps_per_gen_step;
    report.wasserstein += cl.wasserstein / c.critic_steps_per_gen_step;
    report.d_cls = d_cls.item();
  }

  // Encoder and generator update.
  const auto terms = generator_terms(batch);
  Var objective;
  try {
    objective = losses::weighted_objective(terms, w, c.ablation_mask, &report.generator);
  } catch (const LossError& e) {
    throw LossError(e.component(), std::string(e.what()) + " at step " + std::to_string(step_));
  }
  opt_eg_.step(ag::grad(objective, concat_vars(e_.parameters().vars(), g_.parameters().vars())), report.lr);
  ++step_;
  return report;
}

std::vector<JointStepReport> run_joint(JointTrainer& trainer, const RunOptions& options) {
  const auto& c = trainer.config();
  const int stop = options.stop_at < 0 ? c.total_iterations : std::min(options.stop_at, c.total_iterations);
  std::vector<JointStepReport> reports;
  while (trainer.current_step() < stop) {
    reports.push_back(trainer.step());
    if (options.log) *options.log << reports.back().to_log_line() << "\n";
    const int next = trainer.current_step();
    const bool epoch_end = next == c.total_iterations || epoch_of(c, next) != epoch_of(c, next - 1);
    const bool stopping = next == stop;
    if (options.checkpoint_dir && (epoch_end || stopping)) trainer.save(*options.checkpoint_dir);
  }
  if (options.log) options.log->flush();
  return reports;
}

JointResult train_joint(const face::MorphableModel& model, const TrainingSet& data,
                        const nn::FaceExpert& fem, const nn::ShapeRegressor& fsr,
                        const TrainConfig& config, const RunOptions& options) {
  JointTrainer trainer(model, data, fem, fsr, config);
  auto log = run_joint(trainer, options);
  return JointResult{trainer.encoder(), trainer.generator(), trainer.discriminator(), std::move(log)};
}

}  // namespace dotfan::train
