#pragma once

// Pretraining of the identity embedder (angular margin) and the shape
// regressor (weighted parameter distance), and joint adversarial training
// of encoder, generator and critic against the frozen pretrained pair.
//
// Every random draw derives from hash(seed, purpose, step), so a run is a
// pure function of (config, data, pretrained weights) and can be resumed
// from any saved step bit-exactly.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dotfan/autograd.hpp"
#include "dotfan/codes.hpp"
#include "dotfan/config.hpp"
#include "dotfan/face_model.hpp"
#include "dotfan/image.hpp"
#include "dotfan/io.hpp"
#include "dotfan/losses.hpp"
#include "dotfan/networks.hpp"
#include "dotfan/synth_data.hpp"

namespace dotfan::train {

struct TrainConfig {
  // Joint training.
  int batch_size = 16;
  int total_iterations = 2000;
  int epochs = 12;
  double lr = 1e-3;
  int lr_decay_start_epoch = 6;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int critic_steps_per_gen_step = 5;
  losses::LossWeights loss_weights;
  losses::AblationMask ablation_mask;
  std::uint64_t seed = 0;
  codes::PoseRanges target_poses;

  // Pretraining of the identity embedder and the shape regressor.
  int pretrain_epochs = 40;
  double pretrain_lr = 1e-3;
  double arcface_scale = 64.0;
  double arcface_margin = 0.5;
  double holdout_fraction = 0.2;  // per identity, for pretraining diagnostics

  nn::NetworkSpec network;

  // Throws ConfigError.
  void validate() const;
  // Reads only the keys it owns; the caller decides about leftovers.
  static TrainConfig from_key_values(const KeyValues& kv);
  void to_key_values(KeyValues& kv) const;
  std::string to_text() const;
  // Parses text holding only TrainConfig keys, then validates.
  static TrainConfig parse(std::string_view text, const std::string& source = "config");

  bool operator==(const TrainConfig&) const = default;
};

// Epoch containing `step`; epochs split total_iterations evenly.
int epoch_of(const TrainConfig& c, int step);
// First step of lr decay.
int decay_start_step(const TrainConfig& c);
// Constant before decay_start_step, then linear down to 0 at the last step.
double learning_rate(const TrainConfig& c, int step);

// Images with labels; thetas are present for synthetic sources.
struct TrainingSet {
  std::vector<Image> images;
  std::vector<int> identities;
  std::vector<int> illuminations;
  std::vector<std::optional<face::ShapeParams>> thetas;

  std::size_t size() const { return images.size(); }
  // Distinct identity labels in ascending order.
  std::vector<int> identity_labels() const;
  bool has_all_thetas() const;
  void validate() const;
  TrainingSet subset(std::span<const std::size_t> indices) const;

  static TrainingSet from_dataset(const synth::ToyDataset& dataset);
  static TrainingSet from_manifest(const std::filesystem::path& csv);
};

// Holds out the last ceil(fraction * n) images of each identity, keeping at
// least one for training. Returns (train, held_out).
std::pair<TrainingSet, TrainingSet> split_holdout(const TrainingSet& data, double fraction);

class Adam {
 public:
  Adam(std::vector<ag::Var> params, double beta1, double beta2, double eps = 1e-8);
  Adam(const Adam&) = delete;
  Adam& operator=(const Adam&) = delete;
  Adam(Adam&&) = default;
  Adam& operator=(Adam&&) = default;

  // Undefined gradients count as zero.
  void step(std::span<const ag::Var> grads, double lr);
  std::int64_t step_count() const { return t_; }

  void save_to(io::ArrayArchive& archive, const std::string& prefix) const;
  // Throws CheckpointError when the stored moments do not fit.
  void load_from(const io::ArrayArchive& archive, const std::string& prefix);

 private:
  std::vector<ag::Var> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double beta1_;
  double beta2_;
  double eps_;
  std::int64_t t_ = 0;
};

// ---- pretraining ----

struct FemPretrainResult {
  nn::FaceExpert fem;
  double first_batch_loss = 0.0;     // before any update
  std::vector<double> epoch_losses;  // mean loss per epoch
  double heldout_gap = 0.0;          // mean intra minus mean inter cosine; NaN without held-out data
};

// Throws ContractError with fewer than two identities.
FemPretrainResult pretrain_fem(const TrainingSet& data, const TrainConfig& config,
                               std::ostream* log = nullptr);

// Mean intra-identity minus mean inter-identity cosine of the embeddings.
double cosine_gap(const nn::FaceExpert& fem, const TrainingSet& data);

struct FsrPretrainResult {
  nn::ShapeRegressor fsr;
  std::vector<double> epoch_losses;
  double heldout_wpdc = 0.0;         // mean over held-out records
  double mean_predictor_wpdc = 0.0;  // same records, predicting the training mean
};

// Throws DataError when a record lacks Theta.
FsrPretrainResult pretrain_fsr(const TrainingSet& data, const TrainConfig& config,
                               std::ostream* log = nullptr);

// ---- joint training ----

struct JointStepReport {
  int step = 0;
  int epoch = 0;
  double lr = 0.0;
  losses::GeneratorLossReport generator;
  double d_loss = 0.0;       // last critic step, adversarial part plus penalty
  double gp = 0.0;           // unweighted gradient penalty, mean over critic steps
  double wasserstein = 0.0;  // mean over critic steps
  double d_cls = 0.0;        // real-image domain classification loss

  std::string to_log_line() const;
};

// Parses one log line written by JointStepReport::to_log_line.
JointStepReport parse_log_line(const std::string& line);

class JointTrainer {
 public:
  // Freezes fem and fsr. Throws CheckpointError when their specs or the
  // model dimensions disagree with config.network.
  JointTrainer(face::MorphableModel model, TrainingSet data, nn::FaceExpert fem,
               nn::ShapeRegressor fsr, TrainConfig config);
  // Optimizers reference the owned weights, so copies are not allowed.
  JointTrainer(const JointTrainer&) = delete;
  JointTrainer& operator=(const JointTrainer&) = delete;
  JointTrainer(JointTrainer&&) = default;
  JointTrainer& operator=(JointTrainer&&) = default;

  // Continues from a directory written by save(); the stored config must
  // equal `config`.
  static JointTrainer resume(const std::filesystem::path& dir, face::MorphableModel model,
                             TrainingSet data, nn::FaceExpert fem, nn::ShapeRegressor fsr,
                             TrainConfig config);

  // Critic steps followed by one encoder/generator step. Throws LossError
  // naming the component and step on a non-finite loss.
  JointStepReport step();
  // Generator terms on the batch and targets drawn for `step`, without
  // updating anything.
  losses::GeneratorLossReport evaluate_generator(int step) const;
  int current_step() const { return step_; }
  bool done() const { return step_ >= config_.total_iterations; }

  // Writes encoder, generator, discriminator and trainer state.
  void save(const std::filesystem::path& dir) const;

  const TrainConfig& config() const { return config_; }
  const face::MorphableModel& model() const { return model_; }
  const nn::Encoder& encoder() const { return e_; }
  const nn::Generator& generator() const { return g_; }
  const nn::Discriminator& discriminator() const { return d_; }
  const nn::FaceExpert& fem() const { return fem_; }
  const nn::ShapeRegressor& fsr() const { return fsr_; }

 private:
  struct StepBatch;
  StepBatch prepare(int step) const;
  losses::GeneratorTerms generator_terms(const StepBatch& batch) const;

  face::MorphableModel model_;
  TrainingSet data_;
  nn::FaceExpert fem_;
  nn::ShapeRegressor fsr_;
  TrainConfig config_;
  nn::Encoder e_;
  nn::Generator g_;
  nn::Discriminator d_;
  Adam opt_eg_;
  Adam opt_d_;
  int step_ = 0;
};

struct RunOptions {
  int stop_at = -1;                                // exclusive; -1 runs to the end
  std::ostream* log = nullptr;                     // one JSON line per step
  std::optional<std::filesystem::path> checkpoint_dir;  // saved at every epoch end and on stopping
};

std::vector<JointStepReport> run_joint(JointTrainer& trainer, const RunOptions& options = {});

// Convenience wrapper: builds the trainer and runs it to completion.
struct JointResult {
  nn::Encoder encoder;
  nn::Generator generator;
  nn::Discriminator discriminator;
  std::vector<JointStepReport> log;
};
JointResult train_joint(const face::MorphableModel& model, const TrainingSet& data,
                        const nn::FaceExpert& fem, const nn::ShapeRegressor& fsr,
                        const TrainConfig& config, const RunOptions& options = {});

// Checkpoint file names inside a training directory.
inline constexpr const char* kEncoderFile = "encoder.ckpt";
inline constexpr const char* kGeneratorFile = "generator.ckpt";
inline constexpr const char* kDiscriminatorFile = "discriminator.ckpt";
inline constexpr const char* kStateFile = "train_state.ckpt";
inline constexpr const char* kFemFile = "fem.ckpt";
inline constexpr const char* kFsrFile = "fsr.ckpt";

}  // namespace dotfan::train
