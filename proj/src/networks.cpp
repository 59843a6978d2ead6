#include "dotfan/networks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "dotfan/errors.hpp"
#include "dotfan/io.hpp"
#include "dotfan/seeding.hpp"

namespace dotfan::nn {

using ag::ConvGeom;
using ag::Var;

void NetworkSpec::validate() const {
  if (image_size <= 0 || base_channels <= 0 || num_downsamples <= 0 || num_residual_blocks < 0) {
    throw ContractError("network spec: sizes must be positive");
  }
  if (image_size % (1 << num_downsamples) != 0 || bottleneck_size() < 4) {
    throw ContractError("network spec: image_size " + std::to_string(image_size) +
                        " does not leave a 4x4 or larger bottleneck after " +
                        std::to_string(num_downsamples) + " downsamples");
  }
  const auto& d = code_dims;
  if (d.d_l <= 0 || d.d_id <= 0 || d.d_s < 0 || d.d_e < 0) {
    throw ContractError("network spec: invalid code dimensions");
  }
}

void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = nlohmann::json{{"image_size", s.image_size},
                     {"base_channels", s.base_channels},
                     {"num_downsamples", s.num_downsamples},
                     {"num_residual_blocks", s.num_residual_blocks},
                     {"code_dims", s.code_dims}};
}

void from_json(const nlohmann::json& j, NetworkSpec& s) {
  j.at("image_size").get_to(s.image_size);
  j.at("base_channels").get_to(s.base_channels);
  j.at("num_downsamples").get_to(s.num_downsamples);
  j.at("num_residual_blocks").get_to(s.num_residual_blocks);
  j.at("code_dims").get_to(s.code_dims);
}

// ---------------------------------------------------------------- ParameterSet

ParameterSet::ParameterSet(const ParameterSet& other) {
  entries_.reserve(other.entries_.size());
  for (const auto& [name, v] : other.entries_) {
    Var copy = Var::parameter(v.shape(), v.values());
    copy.set_requires_grad(v.requires_grad());
    entries_.emplace_back(name, std::move(copy));
  }
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) *this = ParameterSet(other);
  return *this;
}

const Var& ParameterSet::add(std::string name, ag::Shape shape, std::vector<double> values) {
  if (contains(name)) throw ContractError("duplicate parameter " + name);
  entries_.emplace_back(std::move(name), Var::parameter(std::move(shape), std::move(values)));
  return entries_.back().second;
}

const Var& ParameterSet::operator[](const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw ContractError("unknown parameter " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

std::vector<Var> ParameterSet::vars() const {
  std::vector<Var> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

void ParameterSet::set_trainable(bool on) {
  for (auto& e : entries_) e.second.set_requires_grad(on);
}

bool ParameterSet::bit_equal(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [na, a] = entries_[i];
    const auto& [nb, b] = other.entries_[i];
    if (na != nb || a.shape() != b.shape()) return false;
    if (!std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; })) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------- layers

namespace {

class Builder {
 public:
  Builder(ParameterSet& params, std::uint64_t seed, const std::string& kind)
      : params_(params), seed_(seed), kind_(kind) {}

  // Hidden layers feed a leaky ReLU; output layers keep unit variance
  // unless `scale` shrinks them.
  void conv(const std::string& name, int out, int in_per_group, int k, bool hidden = true,
            double scale = 1.0) {
    tensor(name + ".w", {out, in_per_group, k, k}, in_per_group * k * k, hidden, scale);
    params_.add(name + ".b", {out}, std::vector<double>(out, 0.0));
  }
  void linear(const std::string& name, int in, int out, bool hidden = false) {
    tensor(name + ".w", {in, out}, in, hidden);
    params_.add(name + ".b", {out}, std::vector<double>(out, 0.0));
  }

 private:
  void tensor(const std::string& name, ag::Shape shape, int fan_in, bool hidden, double scale = 1.0) {
    const double gain = hidden ? 2.0 / (1.0 + kLeakySlope * kLeakySlope) : 1.0;
    const double bound = scale * std::sqrt(3.0 * gain / std::max(fan_in, 1));
    std::mt19937_64 rng(derive_seed(seed_, {fnv1a(kind_), fnv1a(name)}));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> values(ag::numel(shape));
    for (auto& v : values) v = u(rng);
    params_.add(name, std::move(shape), std::move(values));
  }

  ParameterSet& params_;
  std::uint64_t seed_;
  const std::string& kind_;
};

Var add_bias(const Var& y, const Var& b) { return y + ag::expand_channels(b, y.shape()); }

Var conv(const ParameterSet& p, const std::string& name, const Var& x, const ConvGeom& g) {
  return add_bias(ag::conv2d(x, p[name + ".w"], g), p[name + ".b"]);
}

Var linear(const ParameterSet& p, const std::string& name, const Var& x) {
  return add_bias(ag::matmul(x, p[name + ".w"]), p[name + ".b"]);
}

Var lrelu(const Var& x) { return ag::leaky_relu(x, kLeakySlope); }

constexpr ConvGeom kDown{4, 2, 1, 1};
constexpr double kGeneratorOutputScale = 0.1;

// Plain stride-2 trunk shared by E, D and FEM.
void build_trunk(Builder& b, const NetworkSpec& s) {
  for (int i = 0; i < s.num_downsamples; ++i) {
    b.conv("down" + std::to_string(i), s.channels_at(i), i == 0 ? 3 : s.channels_at(i - 1), 4);
  }
}

Var run_trunk(const ParameterSet& p, const NetworkSpec& s, Var h) {
  for (int i = 0; i < s.num_downsamples; ++i) h = lrelu(conv(p, "down" + std::to_string(i), h, kDown));
  return h;
}

Var global_average(const Var& h) {
  return ag::scale(ag::spatial_sum(h), 1.0 / (h.dim(2) * h.dim(3)));
}

Var flatten(const Var& h) { return ag::reshape(h, {h.dim(0), h.dim(1) * h.dim(2) * h.dim(3)}); }

}  // namespace

// ---------------------------------------------------------------- Network

Network::Network(std::string kind, NetworkSpec spec) : kind_(std::move(kind)), spec_(spec) {
  spec_.validate();
}

void Network::save(const std::filesystem::path& path) const {
  io::ArrayArchive archive;
  archive.kind = kind_;
  archive.header = nlohmann::json{{"kind", kind_}, {"spec", spec_}}.dump();
  for (const auto& [name, v] : params_.entries()) {
    archive.arrays[name] = io::NamedArray{v.shape(), v.values()};
  }
  archive.save(path);
}

NetworkSpec read_checkpoint_spec(const std::filesystem::path& path, const std::string& kind) {
  const auto archive = io::ArrayArchive::load(path, kind);
  try {
    auto spec = nlohmann::json::parse(archive.header).at("spec").get<NetworkSpec>();
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed network header (" + e.what() + ")");
  } catch (const ContractError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

void Network::load_weights(const std::filesystem::path& path) {
  const NetworkSpec stored = read_checkpoint_spec(path, kind_);
  if (!(stored == spec_)) {
    throw CheckpointError(path.string() + ": network spec " + nlohmann::json(stored).dump() +
                          " differs from expected " + nlohmann::json(spec_).dump());
  }
  const auto archive = io::ArrayArchive::load(path, kind_);
  if (archive.arrays.size() != params_.size()) {
    throw CheckpointError(path.string() + ": tensor count differs");
  }
  for (const auto& [name, v] : params_.entries()) {
    const auto it = archive.arrays.find(name);
    if (it == archive.arrays.end() || it->second.shape != v.shape() ||
        it->second.values.size() != v.size()) {
      throw CheckpointError(path.string() + ": tensor " + name + " missing or misshapen");
    }
    Var target = v;
    std::copy(it->second.values.begin(), it->second.values.end(), target.mutable_data().begin());
  }
}

void Network::check_image_input(const Var& x) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != spec_.image_size || s[3] != spec_.image_size) {
    throw ContractError(kind_ + ": input " + ag::shape_str(s) + " does not match image size " +
                        std::to_string(spec_.image_size));
  }
}

#define DOTFAN_DEFINE_LOAD(Type)                                                        \
  Type Type::load(const std::filesystem::path& path) {                                  \
    Type net(read_checkpoint_spec(path, kKind), 0);                                     \
    net.load_weights(path);                                                             \
    return net;                                                                         \
  }                                                                                     \
  Type Type::load(const std::filesystem::path& path, const NetworkSpec& expected) {     \
    Type net(expected, 0);                                                              \
    net.load_weights(path);                                                             \
    return net;                                                                         \
  }

DOTFAN_DEFINE_LOAD(Encoder)
DOTFAN_DEFINE_LOAD(Generator)
DOTFAN_DEFINE_LOAD(Discriminator)
DOTFAN_DEFINE_LOAD(FaceExpert)
DOTFAN_DEFINE_LOAD(ShapeRegressor)

#undef DOTFAN_DEFINE_LOAD

// ---------------------------------------------------------------- Encoder

Encoder::Encoder(NetworkSpec spec, std::uint64_t seed) : Network(kKind, spec) {
  Builder b(params_, seed, kind_);
  build_trunk(b, spec_);
  b.linear("head", spec_.channels_at(spec_.num_downsamples - 1), spec_.code_dims.d_l);
}

Var Encoder::forward(const Var& x) const {
  check_image_input(x);
  return linear(params_, "head", global_average(run_trunk(params_, spec_, x)));
}

// ---------------------------------------------------------------- Generator

Generator::Generator(NetworkSpec spec, std::uint64_t seed) : Network(kKind, spec) {
  Builder b(params_, seed, kind_);
  const int total = spec_.code_dims.total();
  const int s0 = spec_.bottleneck_size();
  const int cb = spec_.channels_at(spec_.num_downsamples - 1);
  b.linear("project", total, cb * s0 * s0, true);
  b.conv("fuse", cb, cb + total, 1);
  for (int r = 0; r < spec_.num_residual_blocks; ++r) {
    b.conv("res" + std::to_string(r) + "a", cb, cb, 3);
    b.conv("res" + std::to_string(r) + "b", cb, cb, 3, false);
  }
  int c = cb;
  for (int j = 0; j < spec_.num_downsamples; ++j) {
    const int out = std::max(spec_.base_channels, cb >> (j + 1));
    b.conv("up" + std::to_string(j), out, c, 3);
    c = out;
  }
  // A small output layer starts the generator near a flat grey image.
  b.conv("out", 3, c, 3, false, kGeneratorOutputScale);
}

Var Generator::forward(const Var& code) const {
  const int total = spec_.code_dims.total();
  if (code.shape().size() != 2 || code.dim(1) != total) {
    throw ContractError("generator: code " + ag::shape_str(code.shape()) + " but expected [N," +
                        std::to_string(total) + "]");
  }
  const int n = code.dim(0);
  const int s0 = spec_.bottleneck_size();
  const int cb = spec_.channels_at(spec_.num_downsamples - 1);
  Var h = lrelu(ag::reshape(linear(params_, "project", code), {n, cb, s0, s0}));
  h = ag::concat1({h, ag::broadcast_spatial(code, s0, s0)});
  h = lrelu(conv(params_, "fuse", h, ConvGeom{1, 1, 0, 1}));
  for (int r = 0; r < spec_.num_residual_blocks; ++r) {
    const std::string name = "res" + std::to_string(r);
    Var t = lrelu(conv(params_, name + "a", h, ConvGeom{}));
    h = h + conv(params_, name + "b", t, ConvGeom{});
  }
  // Nearest-neighbour upsampling then a 3x3 conv avoids checkerboard artifacts.
  for (int j = 0; j < spec_.num_downsamples; ++j) {
    h = lrelu(conv(params_, "up" + std::to_string(j), ag::upsample_nearest2x(h), ConvGeom{}));
  }
  return ag::tanh(conv(params_, "out", h, ConvGeom{}));
}

// ---------------------------------------------------------------- Discriminator

Discriminator::Discriminator(NetworkSpec spec, std::uint64_t seed) : Network(kKind, spec) {
  Builder b(params_, seed, kind_);
  build_trunk(b, spec_);
  const int s0 = spec_.bottleneck_size();
  const int flat = spec_.channels_at(spec_.num_downsamples - 1) * s0 * s0;
  b.linear("src", flat, 1);
  b.linear("cls", flat, codes::kIlluminationSize);
}

Var Discriminator::features(const Var& x) const {
  check_image_input(x);
  return flatten(run_trunk(params_, spec_, x));
}

CriticOutput Discriminator::forward(const Var& x) const {
  const Var f = features(x);
  return CriticOutput{linear(params_, "src", f), linear(params_, "cls", f)};
}

Var Discriminator::source_score(const Var& x) const { return linear(params_, "src", features(x)); }

// ---------------------------------------------------------------- FaceExpert

FaceExpert::FaceExpert(NetworkSpec spec, std::uint64_t seed) : Network(kKind, spec) {
  Builder b(params_, seed, kind_);
  build_trunk(b, spec_);
  b.linear("embed", spec_.channels_at(spec_.num_downsamples - 1), spec_.code_dims.d_id);
}

Var FaceExpert::forward(const Var& x) const {
  check_image_input(x);
  const Var e = linear(params_, "embed", global_average(run_trunk(params_, spec_, x)));
  return ag::l2_normalize_rows(e);
}

// ---------------------------------------------------------------- ShapeRegressor

ShapeRegressor::ShapeRegressor(NetworkSpec spec, std::uint64_t seed) : Network(kKind, spec) {
  Builder b(params_, seed, kind_);
  b.conv("stem", spec_.channels_at(0), 3, 3);
  for (int i = 1; i < spec_.num_downsamples; ++i) {
    const int c = spec_.channels_at(i - 1);
    b.conv("dw" + std::to_string(i), c, 1, 3);
    b.conv("pw" + std::to_string(i), spec_.channels_at(i), c, 1);
  }
  const int s0 = spec_.bottleneck_size();
  const int flat = spec_.channels_at(spec_.num_downsamples - 1) * s0 * s0;
  b.linear("hidden", flat, kHiddenWidth, true);
  b.linear("theta", kHiddenWidth, spec_.code_dims.pose_length());
}

Var ShapeRegressor::forward(const Var& x) const {
  check_image_input(x);
  Var h = lrelu(conv(params_, "stem", x, ConvGeom{3, 2, 1, 1}));
  for (int i = 1; i < spec_.num_downsamples; ++i) {
    const int c = spec_.channels_at(i - 1);
    h = lrelu(conv(params_, "dw" + std::to_string(i), h, ConvGeom{3, 2, 1, c}));
    h = lrelu(conv(params_, "pw" + std::to_string(i), h, ConvGeom{1, 1, 0, 1}));
  }
  return linear(params_, "theta", lrelu(linear(params_, "hidden", flatten(h))));
}

// ---------------------------------------------------------------- conversion

Var to_batch(std::span<const Image> images) {
  if (images.empty()) throw ContractError("to_batch: no images");
  const int size = images.front().size;
  std::vector<double> values;
  values.reserve(images.size() * 3 * images.front().plane());
  for (const auto& img : images) {
    if (img.size != size || img.pixels.size() != 3 * img.plane()) {
      throw ContractError("to_batch: images differ in size");
    }
    values.insert(values.end(), img.pixels.begin(), img.pixels.end());
  }
  return Var::constant({static_cast<int>(images.size()), 3, size, size}, std::move(values));
}

Var to_batch(const Image& image) { return to_batch(std::span<const Image>(&image, 1)); }

Image image_at(const Var& batch, int index) {
  const auto& s = batch.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != s[3] || index < 0 || index >= s[0]) {
    throw ContractError("image_at: bad batch or index");
  }
  Image img;
  img.size = s[2];
  const std::size_t n = 3 * img.plane();
  const auto first = batch.data().begin() + static_cast<std::ptrdiff_t>(n * index);
  img.pixels.assign(first, first + static_cast<std::ptrdiff_t>(n));
  return img;
}

std::vector<Image> to_images(const Var& batch) {
  std::vector<Image> out;
  for (int i = 0; i < batch.dim(0); ++i) out.push_back(image_at(batch, i));
  return out;
}

Var codes_to_batch(std::span<const codes::AttributeCode> codes) {
  if (codes.empty()) throw ContractError("codes_to_batch: no codes");
  const auto dims = codes.front().dims();
  std::vector<double> values;
  for (const auto& f : codes) {
    if (!(f.dims() == dims)) throw ContractError("codes_to_batch: codes differ in dimensions");
    const auto flat = f.flatten();
    values.insert(values.end(), flat.begin(), flat.end());
  }
  return Var::constant({static_cast<int>(codes.size()), dims.total()}, std::move(values));
}

std::vector<double> row_of(const Var& matrix, int index) {
  const int cols = static_cast<int>(matrix.size()) / matrix.dim(0);
  const auto first = matrix.data().begin() + static_cast<std::ptrdiff_t>(index) * cols;
  return std::vector<double>(first, first + cols);
}

// ---------------------------------------------------------------- inference

codes::LatentCode encode(const Encoder& e, const Image& x) {
  x.validate();
  ag::NoGradGuard guard;
  return codes::LatentCode{row_of(e.forward(to_batch(x)), 0)};
}

Image generate(const Generator& g, const codes::AttributeCode& f) {
  ag::NoGradGuard guard;
  return image_at(g.forward(codes_to_batch(std::span(&f, 1))), 0);
}

std::vector<double> DiscriminatorOutput::probabilities() const {
  const double top = *std::max_element(cls_logits.begin(), cls_logits.end());
  std::vector<double> p(cls_logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(cls_logits[i] - top);
  for (auto& v : p) v /= total;
  return p;
}

DiscriminatorOutput discriminate(const Discriminator& d, const Image& x) {
  x.validate();
  ag::NoGradGuard guard;
  const auto out = d.forward(to_batch(x));
  return DiscriminatorOutput{out.src.item(), row_of(out.cls, 0)};
}

codes::IdentityCode embed_identity(const FaceExpert& fem, const Image& x) {
  x.validate();
  ag::NoGradGuard guard;
  return codes::IdentityCode{row_of(fem.forward(to_batch(x)), 0)};
}

face::ShapeParams regress_shape(const ShapeRegressor& fsr, const Image& x) {
  x.validate();
  ag::NoGradGuard guard;
  const auto& d = fsr.spec().code_dims;
  return face::ShapeParams::unflatten(row_of(fsr.forward(to_batch(x)), 0), d.d_s, d.d_e);
}

}  // namespace dotfan::nn
