#include "dotfan/face_model.hpp"

#include <Eigen/LU>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "dotfan/errors.hpp"
#include "dotfan/io.hpp"
#include "json.hpp"

namespace dotfan::face {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_dims(const ShapeParams& p, int d_s, int d_e, const char* what) {
  if (p.shape_dim() != d_s || p.exp_dim() != d_e) {
    throw ContractError(std::string(what) + ": parameter dimensions (" +
                        std::to_string(p.shape_dim()) + ", " + std::to_string(p.exp_dim()) +
                        ") do not match (" + std::to_string(d_s) + ", " + std::to_string(d_e) + ")");
  }
}

double orthonormality_error(const Eigen::MatrixXd& basis) {
  if (basis.cols() == 0) return 0.0;
  const Eigen::MatrixXd gram = basis.transpose() * basis;
  return (gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
}

std::vector<double> to_row_major(const Eigen::MatrixXd& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  Eigen::Map<RowMat>(out.data(), m.rows(), m.cols()) = m;
  return out;
}

Eigen::MatrixXd from_row_major(const io::NamedArray& a) {
  if (a.shape.size() != 2) throw CheckpointError("expected a 2-D array");
  return Eigen::Map<const RowMat>(a.values.data(), a.shape[0], a.shape[1]);
}

// Random orthonormal columns inside the mirror-symmetric subspace.
Eigen::MatrixXd symmetric_basis(const std::vector<int>& mirror, int d, std::mt19937_64& rng) {
  const int v = static_cast<int>(mirror.size());
  Eigen::MatrixXd raw(3 * v, d);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int c = 0; c < d; ++c) {
    Eigen::VectorXd g(3 * v);
    for (int i = 0; i < 3 * v; ++i) g[i] = normal(rng);
    for (int i = 0; i < v; ++i) {
      const int j = mirror[i];
      raw(3 * i + 0, c) = 0.5 * (g[3 * i + 0] - g[3 * j + 0]);
      raw(3 * i + 1, c) = 0.5 * (g[3 * i + 1] + g[3 * j + 1]);
      raw(3 * i + 2, c) = 0.5 * (g[3 * i + 2] + g[3 * j + 2]);
    }
  }
  if (d == 0) return raw;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(3 * v, d);
  return q;
}

double cross(const std::array<double, 2>& o, const std::array<double, 2>& a,
             const std::array<double, 2>& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

// Andrew's monotone chain; returns the hull counter-clockwise without repeats.
std::vector<std::array<double, 2>> convex_hull(std::vector<std::array<double, 2>> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<std::array<double, 2>> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameter blocks

ShapeParams ShapeParams::frontal(int d_s, int d_e) {
  if (d_s < 0 || d_e < 0) throw ContractError("negative shape/expression dimension");
  ShapeParams p;
  p.alpha_shape.assign(d_s, 0.0);
  p.alpha_exp.assign(d_e, 0.0);
  return p;
}

ShapeParams ShapeParams::unflatten(std::span<const double> flat, int d_s, int d_e) {
  if (flat.size() != shape_params_length(d_s, d_e)) {
    throw ContractError("shape parameter vector of length " + std::to_string(flat.size()) +
                        ", expected " + std::to_string(shape_params_length(d_s, d_e)));
  }
  ShapeParams p;
  std::copy_n(flat.begin(), 9, p.rotation.begin());
  std::copy_n(flat.begin() + 9, 3, p.translation.begin());
  p.alpha_shape.assign(flat.begin() + 12, flat.begin() + 12 + d_s);
  p.alpha_exp.assign(flat.begin() + 12 + d_s, flat.end());
  return p;
}

std::vector<double> ShapeParams::flatten() const {
  std::vector<double> out;
  out.reserve(size());
  out.insert(out.end(), rotation.begin(), rotation.end());
  out.insert(out.end(), translation.begin(), translation.end());
  out.insert(out.end(), alpha_shape.begin(), alpha_shape.end());
  out.insert(out.end(), alpha_exp.begin(), alpha_exp.end());
  return out;
}

ImportanceMatrix ImportanceMatrix::ones(int d_s, int d_e) {
  ImportanceMatrix w;
  w.w_rotation.fill(1.0);
  w.w_translation.fill(1.0);
  w.w_shape.assign(d_s, 1.0);
  w.w_exp.assign(d_e, 1.0);
  return w;
}

ImportanceMatrix ImportanceMatrix::unflatten(std::span<const double> flat, int d_s, int d_e) {
  const ShapeParams p = ShapeParams::unflatten(flat, d_s, d_e);
  ImportanceMatrix w;
  w.w_rotation = p.rotation;
  w.w_translation = p.translation;
  w.w_shape = p.alpha_shape;
  w.w_exp = p.alpha_exp;
  return w;
}

std::vector<double> ImportanceMatrix::flatten() const {
  std::vector<double> out(w_rotation.begin(), w_rotation.end());
  out.insert(out.end(), w_translation.begin(), w_translation.end());
  out.insert(out.end(), w_shape.begin(), w_shape.end());
  out.insert(out.end(), w_exp.begin(), w_exp.end());
  return out;
}

std::size_t FaceMask::area() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

FaceMask FaceMask::mirrored() const {
  FaceMask out = *this;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      out.mask[static_cast<std::size_t>(y) * width + x] = at(y, width - 1 - x);
  return out;
}

// ---------------------------------------------------------------------------
// Morphable model

MorphableModel::MorphableModel(Vertices mean, Eigen::MatrixXd shape_basis,
                               Eigen::MatrixXd exp_basis, std::uint64_t seed,
                               std::vector<Landmark> landmarks)
    : mean_(std::move(mean)),
      shape_basis_(std::move(shape_basis)),
      exp_basis_(std::move(exp_basis)),
      seed_(seed),
      landmarks_(std::move(landmarks)) {
  const int v = static_cast<int>(mean_.rows());
  if (v < 4) throw ContractError("a morphable model needs at least 4 vertices");
  if (shape_basis_.rows() != 3 * v || exp_basis_.rows() != 3 * v) {
    throw ContractError("basis row count must be 3 * vertex count");
  }
  if (orthonormality_error(shape_basis_) > 1e-9) {
    throw ContractError("shape basis columns are not orthonormal");
  }
  if (orthonormality_error(exp_basis_) > 1e-9) {
    throw ContractError("expression basis columns are not orthonormal");
  }
  for (const auto& lm : landmarks_) {
    if (lm.vertex < 0 || lm.vertex >= v) throw ContractError("landmark vertex out of range");
  }
}

MorphableModel MorphableModel::make_toy(int vertices, int d_s, int d_e, std::uint64_t seed) {
  if (vertices < 4) throw ContractError("a morphable model needs at least 4 vertices");
  if (d_s < 0 || d_e < 0) throw ContractError("negative basis dimension");

  std::vector<std::array<double, 3>> pts;
  std::vector<int> mirror;
  std::vector<Landmark> landmarks;
  auto add_pair = [&](double x, double y, double z) {
    const int i = static_cast<int>(pts.size());
    pts.push_back({-x, y, z});
    pts.push_back({x, y, z});
    mirror.push_back(i + 1);
    mirror.push_back(i);
    return i;
  };
  auto add_mid = [&](double y, double z) {
    const int i = static_cast<int>(pts.size());
    pts.push_back({0.0, y, z});
    mirror.push_back(i);
    return i;
  };

  if (vertices >= 6) {
    const int eye = add_pair(0.24, -0.12, 0.45);
    landmarks.push_back({eye, 1});
    landmarks.push_back({eye + 1, 1});
    landmarks.push_back({add_mid(0.10, 0.62), 2});
    const int mouth = add_pair(0.15, 0.33, 0.42);
    landmarks.push_back({mouth, 3});
    landmarks.push_back({mouth + 1, 3});
    landmarks.push_back({add_mid(0.36, 0.46), 3});
  }
  int remaining = vertices - static_cast<int>(pts.size());
  if (remaining % 2 == 1) {
    add_mid(0.72, 0.12);  // chin
    --remaining;
  }
  const int pairs = remaining / 2;
  constexpr double kRx = 0.56, kRy = 0.72;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int k = 0; k < pairs; ++k) {
    // outermost pairs trace the face outline; the rest fill the interior
    const double r = pairs == 1 ? 1.0 : std::sqrt(1.0 - static_cast<double>(k) / pairs);
    const double theta = std::fmod(0.35 + k * golden, std::numbers::pi - 0.3) + 0.15;
    const double x = kRx * r * std::sin(theta);
    const double y = -kRy * r * std::cos(theta);
    const double z = 0.5 * std::sqrt(std::max(0.0, 1.0 - r * r)) + 0.05;
    add_pair(std::max(x, 0.02), y, z);
  }

  const int v = static_cast<int>(pts.size());
  int mids = 0;
  for (int i = 0; i < v; ++i) mids += mirror[i] == i ? 1 : 0;
  const int symmetric_dim = 3 * (v - mids) / 2 + 2 * mids;
  if (d_s > symmetric_dim || d_e > symmetric_dim) {
    throw ContractError("toy model with " + std::to_string(v) + " vertices supports at most " +
                        std::to_string(symmetric_dim) + " basis vectors");
  }

  Vertices mean(v, 3);
  for (int i = 0; i < v; ++i) mean.row(i) << pts[i][0], pts[i][1], pts[i][2];
  std::mt19937_64 rng(seed);
  Eigen::MatrixXd shape = symmetric_basis(mirror, d_s, rng);
  Eigen::MatrixXd expr = symmetric_basis(mirror, d_e, rng);
  if (landmarks.empty()) {
    for (int i = 0; i < v; ++i) landmarks.push_back({i, 1 + (i / 2) % 3});
  }
  return MorphableModel(std::move(mean), std::move(shape), std::move(expr), seed,
                        std::move(landmarks));
}

void MorphableModel::save(const std::filesystem::path& path) const {
  nlohmann::json header = {{"V", vertex_count()},
                           {"d_s", shape_dim()},
                           {"d_e", exp_dim()},
                           {"seed", seed_}};
  nlohmann::json lms = nlohmann::json::array();
  for (const auto& lm : landmarks_) lms.push_back({lm.vertex, lm.slot});
  header["landmarks"] = lms;

  io::ArrayArchive ar;
  ar.kind = "morphable_model";
  ar.header = header.dump();
  ar.arrays["mean"] = {{vertex_count(), 3},
                       std::vector<double>(mean_.data(), mean_.data() + mean_.size())};
  ar.arrays["shape_basis"] = {{3 * vertex_count(), shape_dim()}, to_row_major(shape_basis_)};
  ar.arrays["exp_basis"] = {{3 * vertex_count(), exp_dim()}, to_row_major(exp_basis_)};
  ar.save(path);
  io::write_text(path.string() + ".json", header.dump(2) + "\n");
}

MorphableModel MorphableModel::load(const std::filesystem::path& path) {
  const io::ArrayArchive ar = io::ArrayArchive::load(path, "morphable_model");
  const auto header = nlohmann::json::parse(ar.header);
  const auto& mean = ar.at("mean");
  if (mean.shape.size() != 2 || mean.shape[1] != 3) throw CheckpointError("bad mean array");
  Vertices m = Eigen::Map<const Vertices>(mean.values.data(), mean.shape[0], 3);
  std::vector<Landmark> lms;
  for (const auto& e : header.at("landmarks")) lms.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  MorphableModel model(std::move(m), from_row_major(ar.at("shape_basis")),
                       from_row_major(ar.at("exp_basis")), header.at("seed").get<std::uint64_t>(),
                       std::move(lms));
  if (header.at("V").get<int>() != model.vertex_count() ||
      header.at("d_s").get<int>() != model.shape_dim() ||
      header.at("d_e").get<int>() != model.exp_dim()) {
    throw CheckpointError("morphable model header disagrees with its arrays");
  }
  return model;
}

// ---------------------------------------------------------------------------
// Operations

Vertices reconstruct_shape(const MorphableModel& model, const ShapeParams& p) {
  check_dims(p, model.shape_dim(), model.exp_dim(), "reconstruct_shape");
  const int v = model.vertex_count();
  Eigen::VectorXd offsets = Eigen::VectorXd::Zero(3 * v);
  if (model.shape_dim() > 0) {
    offsets += model.shape_basis() *
               Eigen::Map<const Eigen::VectorXd>(p.alpha_shape.data(), model.shape_dim());
  }
  if (model.exp_dim() > 0) {
    offsets += model.exp_basis() *
               Eigen::Map<const Eigen::VectorXd>(p.alpha_exp.data(), model.exp_dim());
  }
  const Eigen::Matrix<double, 3, 3, Eigen::RowMajor> r =
      Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(p.rotation.data());
  const Eigen::RowVector3d t(p.translation[0], p.translation[1], p.translation[2]);
  Vertices out(v, 3);
  for (int i = 0; i < v; ++i) {
    const Eigen::RowVector3d s = model.mean().row(i) + offsets.segment<3>(3 * i).transpose();
    out.row(i) = s * r.transpose() + t;
  }
  return out;
}

double wpdc_loss(const ShapeParams& predicted, const ShapeParams& target,
                 const ImportanceMatrix& w) {
  const auto pred = predicted.flatten();
  const auto tgt = target.flatten();
  const auto weights = w.flatten();
  if (pred.size() != tgt.size() || pred.size() != weights.size()) {
    throw ContractError("wpdc_loss: operand dimensions differ");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (weights[i] < 0.0) throw ContractError("wpdc_loss: negative importance weight");
    const double r = pred[i] - tgt[i];
    acc += weights[i] * r * r;
  }
  return acc;
}

std::vector<double> wpdc_gradient(const ShapeParams& predicted, const ShapeParams& target,
                                  const ImportanceMatrix& w) {
  const auto pred = predicted.flatten();
  const auto tgt = target.flatten();
  const auto weights = w.flatten();
  if (pred.size() != tgt.size() || pred.size() != weights.size()) {
    throw ContractError("wpdc_gradient: operand dimensions differ");
  }
  std::vector<double> g(pred.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (weights[i] < 0.0) throw ContractError("wpdc_gradient: negative importance weight");
    g[i] = 2.0 * weights[i] * (pred[i] - tgt[i]);
  }
  return g;
}

ImportanceMatrix build_importance_matrix(const ShapeParams& target,
                                         std::span<const ShapeParams> pool) {
  if (pool.empty()) throw ContractError("build_importance_matrix: empty pool");
  const int d_s = target.shape_dim(), d_e = target.exp_dim();
  const std::size_t n = target.size();
  std::vector<double> mean(n, 0.0), sq(n, 0.0);
  for (const auto& p : pool) {
    check_dims(p, d_s, d_e, "build_importance_matrix");
    const auto f = p.flatten();
    for (std::size_t i = 0; i < n; ++i) mean[i] += f[i];
  }
  for (auto& m : mean) m /= static_cast<double>(pool.size());
  for (const auto& p : pool) {
    const auto f = p.flatten();
    for (std::size_t i = 0; i < n; ++i) sq[i] += (f[i] - mean[i]) * (f[i] - mean[i]);
  }
  const auto t = target.flatten();
  std::vector<double> w(n);
  double largest = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double stdev = std::sqrt(sq[i] / static_cast<double>(pool.size()));
    w[i] = std::min(1.0, std::abs(t[i] - mean[i]) / (stdev + kImportanceEpsilon));
    largest = std::max(largest, w[i]);
  }
  for (auto& x : w) x = largest > 0.0 ? x / largest : 1.0;
  return ImportanceMatrix::unflatten(w, d_s, d_e);
}

FaceMask rasterize_hull(std::span<const std::array<double, 2>> points, int height, int width) {
  if (height <= 0 || width <= 0) throw ContractError("render_mask: empty image size");
  FaceMask out;
  out.height = height;
  out.width = width;
  out.mask.assign(static_cast<std::size_t>(height) * width, 0);
  const auto hull = convex_hull({points.begin(), points.end()});
  if (hull.size() >= 3) {
    double xmin = hull[0][0], xmax = xmin, ymin = hull[0][1], ymax = ymin;
    for (const auto& p : hull) {
      xmin = std::min(xmin, p[0]);
      xmax = std::max(xmax, p[0]);
      ymin = std::min(ymin, p[1]);
      ymax = std::max(ymax, p[1]);
    }
    const int x0 = std::max(0, static_cast<int>(std::floor(xmin - 0.5)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(xmax)));
    const int y0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(ymax)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const std::array<double, 2> c{x + 0.5, y + 0.5};
        bool inside = true;
        for (std::size_t k = 0; k < hull.size() && inside; ++k) {
          inside = cross(hull[k], hull[(k + 1) % hull.size()], c) >= -1e-9;
        }
        if (inside) out.mask[static_cast<std::size_t>(y) * width + x] = 1;
      }
    }
  }
  out.out_of_frame = out.area() == 0;
  return out;
}

FaceMask render_mask(const MorphableModel& model, const ShapeParams& p, int height, int width) {
  const Vertices v = reconstruct_shape(model, p);
  std::vector<std::array<double, 2>> pts(static_cast<std::size_t>(v.rows()));
  for (int i = 0; i < v.rows(); ++i) {
    pts[i] = {(v(i, 0) + 1.0) * 0.5 * width, (v(i, 1) + 1.0) * 0.5 * height};
  }
  return rasterize_hull(pts, height, width);
}

ShapeParams flip_pose(const ShapeParams& p) {
  static constexpr std::array<double, 3> s{-1.0, 1.0, 1.0};
  ShapeParams out = p;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.rotation[3 * i + j] = s[i] * s[j] * p.rotation[3 * i + j];
  for (int i = 0; i < 3; ++i) out.translation[i] = s[i] * p.translation[i];
  return out;
}

std::array<double, 9> rotation_from_euler(double yaw, double pitch, double roll) {
  using M = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cr = std::cos(roll), sr = std::sin(roll);
  M ry, rx, rz;
  ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
  rx << 1, 0, 0, 0, cp, -sp, 0, sp, cp;
  rz << cr, -sr, 0, sr, cr, 0, 0, 0, 1;
  const M r = ry * rx * rz;
  std::array<double, 9> out;
  Eigen::Map<M>(out.data()) = r;
  return out;
}

double yaw_of(const std::array<double, 9>& rotation) {
  return std::atan2(rotation[2], rotation[8]);
}

double yaw_of(std::span<const double> flat_params) {
  if (flat_params.size() < 9) throw ContractError("yaw_of: parameter vector too short");
  return std::atan2(flat_params[2], flat_params[8]);
}

double rotation_orthonormality_error(const std::array<double, 9>& rotation) {
  using M = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
  const M r = Eigen::Map<const M>(rotation.data());
  const double ortho = (r.transpose() * r - M::Identity()).cwiseAbs().maxCoeff();
  return std::max(ortho, std::abs(r.determinant() - 1.0));
}

}  // namespace dotfan::face
