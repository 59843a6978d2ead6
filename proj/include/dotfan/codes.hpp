#pragma once

// The disentangled attribute code f = [latent, identity, pose, illumination]
// that conditions the generator.

#include <array>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dotfan/face_model.hpp"
#include "json.hpp"

namespace dotfan::codes {

constexpr int kIlluminationSize = 14;
// Label-free case: keep the input's lighting and shadows.
constexpr int kPassThroughLabel = 13;
constexpr int kLitLabelCount = 13;

// Defaults are desk scale; paper() gives the 240-long pose segment.
struct CodeDims {
  int d_l = 32;
  int d_id = 64;
  int d_s = 10;
  int d_e = 4;

  static CodeDims paper() { return CodeDims{32, 64, 199, 29}; }

  int pose_length() const { return static_cast<int>(face::shape_params_length(d_s, d_e)); }
  int total() const { return d_l + d_id + pose_length() + kIlluminationSize; }
  // Segment offsets into the flattened code.
  int latent_offset() const { return 0; }
  int identity_offset() const { return d_l; }
  int pose_offset() const { return d_l + d_id; }
  int illumination_offset() const { return d_l + d_id + pose_length(); }

  bool operator==(const CodeDims&) const = default;
};

void to_json(nlohmann::json& j, const CodeDims& d);
void from_json(const nlohmann::json& j, CodeDims& d);

class IlluminationCode {
 public:
  IlluminationCode() { values_[kPassThroughLabel] = 1.0; }
  static IlluminationCode one_hot(int label);
  // Soft codes only arise on the interpolation path.
  static IlluminationCode from_values(std::span<const double> values);

  const std::array<double, kIlluminationSize>& values() const { return values_; }
  bool is_one_hot() const;
  // Index of the active entry; throws ContractError on soft codes.
  int label() const;

  bool operator==(const IlluminationCode&) const = default;

 private:
  std::array<double, kIlluminationSize> values_{};
};

struct LatentCode {
  std::vector<double> values;
  bool operator==(const LatentCode&) const = default;
};

struct IdentityCode {
  std::vector<double> values;
  static IdentityCode normalized(std::vector<double> raw);
  bool operator==(const IdentityCode&) const = default;
};

struct AttributeCode {
  LatentCode latent;
  IdentityCode identity;
  face::ShapeParams pose;
  IlluminationCode illumination;

  CodeDims dims() const;
  std::vector<double> flatten() const;
  static AttributeCode unflatten(std::span<const double> flat, const CodeDims& dims);

  bool operator==(const AttributeCode&) const = default;
};

// Validates every segment and names the first offending one.
AttributeCode compose(LatentCode latent, IdentityCode identity, face::ShapeParams pose,
                      IlluminationCode illumination);

// Swaps in (R, T, alpha_exp) from `new_pose`; alpha_shape too unless keep_shape.
AttributeCode replace_pose(const AttributeCode& f, const face::ShapeParams& new_pose,
                           bool keep_shape = true);
AttributeCode replace_illumination(const AttributeCode& f, int label);

// alpha * right + (1 - alpha) * left, identity re-normalised, illumination
// left soft. The endpoints return the inputs unchanged.
AttributeCode interpolate(const AttributeCode& left, const AttributeCode& right, double alpha);

struct PoseRanges {
  double yaw_min_deg = -45.0;
  double yaw_max_deg = 45.0;
  double pitch_min_deg = -10.0;
  double pitch_max_deg = 10.0;
  double roll_min_deg = -5.0;
  double roll_max_deg = 5.0;
  double translation_max = 0.05;  // |T_x|, |T_y| in normalised image units
  double expression_max = 1.0;    // |alpha_exp| bound

  void validate() const;
  bool operator==(const PoseRanges&) const = default;
};

struct IlluminationDistribution {
  std::array<double, kIlluminationSize> weights{};

  static IlluminationDistribution uniform(std::span<const int> labels);
  static IlluminationDistribution uniform_all();
  void validate() const;
};

struct TargetAttributes {
  face::ShapeParams pose;  // alpha_shape zero; only R, T, alpha_exp are meaningful
  IlluminationCode illumination;
};

TargetAttributes sample_target_attributes(std::mt19937_64& rng, const PoseRanges& ranges,
                                          const IlluminationDistribution& illumination,
                                          int d_s, int d_e);

// Flat vector plus a {d_l, d_id, d_s, d_e} header.
nlohmann::json code_to_json(const AttributeCode& f);
AttributeCode code_from_json(const nlohmann::json& j);

}  // namespace dotfan::codes
