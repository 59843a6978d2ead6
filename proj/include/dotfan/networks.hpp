#pragma once

// The five networks: encoder E, generator G, critic/classifier D, the
// identity embedder (FEM) and the shape regressor (FSR). Every network is a
// pure function of (weights, input); there is no dropout or normalisation
// state, so inference is exactly repeatable.
//
// Copying a network deep-copies its weights.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dotfan/autograd.hpp"
#include "dotfan/codes.hpp"
#include "dotfan/face_model.hpp"
#include "dotfan/image.hpp"
#include "json.hpp"

namespace dotfan::nn {

constexpr double kLeakySlope = 0.2;

struct NetworkSpec {
  int image_size = 32;
  int base_channels = 8;
  int num_downsamples = 3;
  int num_residual_blocks = 2;
  codes::CodeDims code_dims;

  // image_size must be divisible by 2^num_downsamples with a bottleneck of
  // at least 4 x 4.
  void validate() const;
  int bottleneck_size() const { return image_size >> num_downsamples; }
  // Trunk width after `level + 1` stride-2 blocks.
  int channels_at(int level) const { return base_channels << level; }

  bool operator==(const NetworkSpec&) const = default;
};

void to_json(nlohmann::json& j, const NetworkSpec& s);
void from_json(const nlohmann::json& j, NetworkSpec& s);

// Named trainable tensors in insertion order.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  const ag::Var& add(std::string name, ag::Shape shape, std::vector<double> values);
  const ag::Var& operator[](const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const std::vector<std::pair<std::string, ag::Var>>& entries() const { return entries_; }
  std::vector<ag::Var> vars() const;

  // Gradient tracking for every tensor; off freezes the network.
  void set_trainable(bool on);
  bool bit_equal(const ParameterSet& other) const;

 private:
  std::vector<std::pair<std::string, ag::Var>> entries_;
};

// Reads the spec stored in a checkpoint of the given kind.
NetworkSpec read_checkpoint_spec(const std::filesystem::path& path, const std::string& kind);

class Network {
 public:
  const NetworkSpec& spec() const { return spec_; }
  const ParameterSet& parameters() const { return params_; }
  ParameterSet& parameters() { return params_; }
  const std::string& kind() const { return kind_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  // One archive: named arrays plus a {kind, spec} JSON header.
  void save(const std::filesystem::path& path) const;

 protected:
  Network(std::string kind, NetworkSpec spec);
  // Replaces weights from `path`; throws CheckpointError on a kind, spec or
  // tensor-shape mismatch.
  void load_weights(const std::filesystem::path& path);
  void check_image_input(const ag::Var& x) const;

  std::string kind_;
  NetworkSpec spec_;
  ParameterSet params_;
};

// x [N,3,S,S] -> latent [N,d_l]
class Encoder : public Network {
 public:
  static constexpr const char* kKind = "encoder";
  Encoder(NetworkSpec spec, std::uint64_t seed);
  ag::Var forward(const ag::Var& x) const;
  // Without `expected` the stored spec is used.
  static Encoder load(const std::filesystem::path& path);
  static Encoder load(const std::filesystem::path& path, const NetworkSpec& expected);
};

// flattened code [N,total] -> image [N,3,S,S] in [-1, 1]
class Generator : public Network {
 public:
  static constexpr const char* kKind = "generator";
  Generator(NetworkSpec spec, std::uint64_t seed);
  ag::Var forward(const ag::Var& code) const;
  // Without `expected` the stored spec is used.
  static Generator load(const std::filesystem::path& path);
  static Generator load(const std::filesystem::path& path, const NetworkSpec& expected);
};

struct CriticOutput {
  ag::Var src;  // [N,1], unbounded
  ag::Var cls;  // [N,14] logits
};

class Discriminator : public Network {
 public:
  static constexpr const char* kKind = "discriminator";
  Discriminator(NetworkSpec spec, std::uint64_t seed);
  CriticOutput forward(const ag::Var& x) const;
  // Critic head only; skips the classifier matmul.
  ag::Var source_score(const ag::Var& x) const;
  // Without `expected` the stored spec is used.
  static Discriminator load(const std::filesystem::path& path);
  static Discriminator load(const std::filesystem::path& path, const NetworkSpec& expected);

 private:
  ag::Var features(const ag::Var& x) const;
};

// x -> unit-norm embedding [N,d_id]
class FaceExpert : public Network {
 public:
  static constexpr const char* kKind = "face_expert";
  FaceExpert(NetworkSpec spec, std::uint64_t seed);
  ag::Var forward(const ag::Var& x) const;
  // Without `expected` the stored spec is used.
  static FaceExpert load(const std::filesystem::path& path);
  static FaceExpert load(const std::filesystem::path& path, const NetworkSpec& expected);
};

// x -> Theta [N, 12 + d_s + d_e], depthwise-separable trunk
class ShapeRegressor : public Network {
 public:
  static constexpr const char* kKind = "shape_regressor";
  static constexpr int kHiddenWidth = 32;
  ShapeRegressor(NetworkSpec spec, std::uint64_t seed);
  ag::Var forward(const ag::Var& x) const;
  // Without `expected` the stored spec is used.
  static ShapeRegressor load(const std::filesystem::path& path);
  static ShapeRegressor load(const std::filesystem::path& path, const NetworkSpec& expected);
};

// ---- batch conversion ----
ag::Var to_batch(std::span<const Image> images);
ag::Var to_batch(const Image& image);
Image image_at(const ag::Var& batch, int index);
std::vector<Image> to_images(const ag::Var& batch);
ag::Var codes_to_batch(std::span<const codes::AttributeCode> codes);
std::vector<double> row_of(const ag::Var& matrix, int index);

// ---- single-image inference (no gradient tape) ----
codes::LatentCode encode(const Encoder& e, const Image& x);
Image generate(const Generator& g, const codes::AttributeCode& f);

struct DiscriminatorOutput {
  double src_score = 0.0;
  std::vector<double> cls_logits;

  std::vector<double> probabilities() const;
};
DiscriminatorOutput discriminate(const Discriminator& d, const Image& x);
codes::IdentityCode embed_identity(const FaceExpert& fem, const Image& x);
face::ShapeParams regress_shape(const ShapeRegressor& fsr, const Image& x);

}  // namespace dotfan::nn
