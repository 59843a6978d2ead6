#include "dotfan/codes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dotfan/errors.hpp"

namespace dotfan::codes {

namespace {

constexpr double kUnitNormTolerance = 1e-5;

double norm(std::span<const double> v) {
  return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

void to_json(nlohmann::json& j, const CodeDims& d) {
  j = nlohmann::json{{"d_l", d.d_l}, {"d_id", d.d_id}, {"d_s", d.d_s}, {"d_e", d.d_e}};
}

void from_json(const nlohmann::json& j, CodeDims& d) {
  j.at("d_l").get_to(d.d_l);
  j.at("d_id").get_to(d.d_id);
  j.at("d_s").get_to(d.d_s);
  j.at("d_e").get_to(d.d_e);
}

IlluminationCode IlluminationCode::one_hot(int label) {
  if (label < 0 || label >= kIlluminationSize) {
    throw ContractError("illumination label " + std::to_string(label) + " outside 0.." +
                        std::to_string(kIlluminationSize - 1));
  }
  IlluminationCode c;
  c.values_.fill(0.0);
  c.values_[label] = 1.0;
  return c;
}

IlluminationCode IlluminationCode::from_values(std::span<const double> values) {
  if (values.size() != kIlluminationSize) throw ContractError("illumination code must have 14 entries");
  IlluminationCode c;
  std::copy(values.begin(), values.end(), c.values_.begin());
  return c;
}

bool IlluminationCode::is_one_hot() const {
  int ones = 0;
  for (double v : values_) {
    if (v == 1.0) ++ones;
    else if (v != 0.0) return false;
  }
  return ones == 1;
}

int IlluminationCode::label() const {
  if (!is_one_hot()) throw ContractError("illumination code is not one-hot");
  return static_cast<int>(std::max_element(values_.begin(), values_.end()) - values_.begin());
}

IdentityCode IdentityCode::normalized(std::vector<double> raw) {
  const double n = norm(raw);
  if (!(n > 0.0) || !std::isfinite(n)) throw ContractError("identity code cannot be normalised");
  for (auto& v : raw) v /= n;
  return IdentityCode{std::move(raw)};
}

CodeDims AttributeCode::dims() const {
  return CodeDims{static_cast<int>(latent.values.size()), static_cast<int>(identity.values.size()),
                  pose.shape_dim(), pose.exp_dim()};
}

std::vector<double> AttributeCode::flatten() const {
  std::vector<double> out(latent.values);
  out.insert(out.end(), identity.values.begin(), identity.values.end());
  const auto p = pose.flatten();
  out.insert(out.end(), p.begin(), p.end());
  out.insert(out.end(), illumination.values().begin(), illumination.values().end());
  return out;
}

AttributeCode AttributeCode::unflatten(std::span<const double> flat, const CodeDims& dims) {
  if (flat.size() != static_cast<std::size_t>(dims.total())) {
    throw ContractError("attribute code of length " + std::to_string(flat.size()) +
                        ", expected " + std::to_string(dims.total()));
  }
  AttributeCode f;
  f.latent.values.assign(flat.begin(), flat.begin() + dims.d_l);
  f.identity.values.assign(flat.begin() + dims.identity_offset(),
                           flat.begin() + dims.pose_offset());
  f.pose = face::ShapeParams::unflatten(
      flat.subspan(dims.pose_offset(), dims.pose_length()), dims.d_s, dims.d_e);
  f.illumination = IlluminationCode::from_values(flat.subspan(dims.illumination_offset()));
  return f;
}

AttributeCode compose(LatentCode latent, IdentityCode identity, face::ShapeParams pose,
                      IlluminationCode illumination) {
  if (latent.values.empty() || !all_finite(latent.values)) {
    throw ContractError("latent segment: empty or non-finite");
  }
  if (identity.values.empty() || std::abs(norm(identity.values) - 1.0) > kUnitNormTolerance) {
    throw ContractError("identity segment: not unit norm");
  }
  if (!all_finite(pose.flatten())) throw ContractError("pose segment: non-finite entry");
  if (!illumination.is_one_hot()) throw ContractError("illumination segment: not one-hot");
  return AttributeCode{std::move(latent), std::move(identity), std::move(pose), illumination};
}

AttributeCode replace_pose(const AttributeCode& f, const face::ShapeParams& new_pose,
                           bool keep_shape) {
  if (new_pose.shape_dim() != f.pose.shape_dim() || new_pose.exp_dim() != f.pose.exp_dim()) {
    throw ContractError("replace_pose: pose dimensions differ");
  }
  AttributeCode out = f;
  out.pose = new_pose;
  if (keep_shape) out.pose.alpha_shape = f.pose.alpha_shape;
  return out;
}

AttributeCode replace_illumination(const AttributeCode& f, int label) {
  AttributeCode out = f;
  out.illumination = IlluminationCode::one_hot(label);
  return out;
}

AttributeCode interpolate(const AttributeCode& left, const AttributeCode& right, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("interpolate: alpha outside [0, 1]");
  const CodeDims dims = left.dims();
  if (!(right.dims() == dims)) throw ContractError("interpolate: code dimensions differ");
  if (alpha == 0.0) return left;
  if (alpha == 1.0) return right;
  const auto l = left.flatten();
  const auto r = right.flatten();
  std::vector<double> mix(l.size());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * r[i] + (1.0 - alpha) * l[i];
  AttributeCode out = AttributeCode::unflatten(mix, dims);
  // Antipodal identities average to zero; fall back to the nearer endpoint.
  if (norm(out.identity.values) < 1e-12) {
    out.identity = alpha < 0.5 ? left.identity : right.identity;
  } else {
    out.identity = IdentityCode::normalized(std::move(out.identity.values));
  }
  return out;
}

void PoseRanges::validate() const {
  auto check = [](double lo, double hi, double bound, const char* name) {
    if (!(lo <= hi) || lo < -bound || hi > bound) {
      throw ContractError(std::string("pose range for ") + name + " is empty or out of bounds");
    }
  };
  check(yaw_min_deg, yaw_max_deg, 90.0, "yaw");
  check(pitch_min_deg, pitch_max_deg, 90.0, "pitch");
  check(roll_min_deg, roll_max_deg, 180.0, "roll");
  if (!(translation_max >= 0.0) || !(expression_max >= 0.0)) {
    throw ContractError("translation/expression bounds must be non-negative");
  }
}

IlluminationDistribution IlluminationDistribution::uniform(std::span<const int> labels) {
  if (labels.empty()) throw ContractError("illumination distribution needs at least one label");
  IlluminationDistribution d;
  for (int l : labels) {
    if (l < 0 || l >= kIlluminationSize) throw ContractError("illumination label out of range");
    d.weights[l] = 1.0;
  }
  return d;
}

IlluminationDistribution IlluminationDistribution::uniform_all() {
  IlluminationDistribution d;
  d.weights.fill(1.0);
  return d;
}

void IlluminationDistribution::validate() const {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("illumination weight must be >= 0");
    total += w;
  }
  if (!(total > 0.0)) throw ContractError("illumination distribution has no mass");
}

TargetAttributes sample_target_attributes(std::mt19937_64& rng, const PoseRanges& ranges,
                                          const IlluminationDistribution& illumination,
                                          int d_s, int d_e) {
  ranges.validate();
  illumination.validate();
  constexpr double deg = std::numbers::pi / 180.0;
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  TargetAttributes out;
  out.pose = face::ShapeParams::frontal(d_s, d_e);
  const double yaw = uniform(ranges.yaw_min_deg, ranges.yaw_max_deg);
  const double pitch = uniform(ranges.pitch_min_deg, ranges.pitch_max_deg);
  const double roll = uniform(ranges.roll_min_deg, ranges.roll_max_deg);
  out.pose.rotation = face::rotation_from_euler(yaw * deg, pitch * deg, roll * deg);
  out.pose.translation[0] = uniform(-ranges.translation_max, ranges.translation_max);
  out.pose.translation[1] = uniform(-ranges.translation_max, ranges.translation_max);
  for (auto& a : out.pose.alpha_exp) a = uniform(-ranges.expression_max, ranges.expression_max);
  std::discrete_distribution<int> pick(illumination.weights.begin(), illumination.weights.end());
  out.illumination = IlluminationCode::one_hot(pick(rng));
  return out;
}

nlohmann::json code_to_json(const AttributeCode& f) {
  return nlohmann::json{{"header", f.dims()}, {"values", f.flatten()}};
}

AttributeCode code_from_json(const nlohmann::json& j) {
  const CodeDims dims = j.at("header").get<CodeDims>();
  const auto values = j.at("values").get<std::vector<double>>();
  return AttributeCode::unflatten(values, dims);
}

}  // namespace dotfan::codes
