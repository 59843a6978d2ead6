#pragma once

// Small reverse-mode automatic differentiation engine.
//
// Every backward rule is itself written in terms of differentiable ops, so
// gradients can be differentiated again (needed by the critic's gradient
// penalty). Tensors are dense, row-major, double precision.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dotfan::ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Var;

using BackwardFn = std::function<std::vector<Var>(
    const Var& grad_out, const Var& self, const std::vector<bool>& need)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;
  const char* op = "leaf";
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<double> values);
  static Var parameter(Shape shape, std::vector<double> values);
  static Var zeros(Shape shape);
  static Var full(Shape shape, double value);
  static Var scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Leaf mutation (optimizer steps); never call on an interior node.
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  Var detach() const;
  Node* node() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

// Thread-local switch; when off, ops produce constants and record nothing.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Gradients of `output` with respect to `inputs`. A missing dependency
// yields an undefined Var in that slot. With create_graph the returned
// gradients are themselves differentiable. `seed` defaults to ones.
std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs,
                      bool create_graph = false, const Var& seed = Var{});

// Internal constructor used by op implementations.
Var make_result(const char* op, Shape shape, std::vector<double> value,
                std::vector<Var> inputs, BackwardFn backward);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var reciprocal(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var relu(const Var& a);
Var clamp_min(const Var& a, double lo);
// Elementwise select: mask (constant, 0/1) picks `a`, else `b`.
Var where(const std::vector<double>& mask, const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator-(const Var& a) { return neg(a); }

// ---- reductions / broadcasts ----
Var sum(const Var& a);                             // -> [1]
Var mean(const Var& a);                            // -> [1]
Var broadcast_scalar(const Var& s, Shape shape);   // [1] -> shape
Var row_sum(const Var& a);                         // [N,...] -> [N]
Var row_broadcast(const Var& v, Shape shape);      // [N] -> [N,...]
Var sum_channels(const Var& a);                    // [N,C,...] -> [C]
Var expand_channels(const Var& b, Shape shape);    // [C] -> [N,C,...]
Var spatial_sum(const Var& a);                     // [N,C,H,W] -> [N,C]
Var broadcast_spatial(const Var& a, int h, int w); // [N,C] -> [N,C,H,W]

// ---- shape ----
Var reshape(const Var& a, Shape shape);
Var concat1(const std::vector<Var>& parts);        // along dim 1
Var slice1(const Var& a, int start, int length);   // along dim 1
Var pad1(const Var& a, int start, int total);      // adjoint of slice1
Var flip_horizontal(const Var& a);                 // [N,C,H,W], mirrors W
Var upsample_nearest2x(const Var& a);              // [N,C,H,W] -> [N,C,2H,2W]
Var pool_sum2x(const Var& a);                      // adjoint: sums 2x2 blocks

// ---- linear algebra ----
// op(a) * op(b) for 2-D operands, op = transpose when flag set.
Var matmul(const Var& a, const Var& b, bool transpose_a = false,
           bool transpose_b = false);

struct ConvGeom {
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int groups = 1;
};

// x [N,C,H,W], w [O,C/groups,k,k] -> [N,O,Ho,Wo]
Var conv2d(const Var& x, const Var& w, const ConvGeom& geom);
// Adjoint of conv2d in x: g [N,O,Ho,Wo], w [O,C/groups,k,k] -> in_shape.
Var conv_transpose2d(const Var& g, const Var& w, const ConvGeom& geom,
                     const Shape& in_shape);
// Adjoint of conv2d in w: x [N,C,H,W], g [N,O,Ho,Wo] -> w_shape.
Var conv2d_weight_grad(const Var& x, const Var& g, const ConvGeom& geom,
                       const Shape& w_shape);

int conv_out_size(int in, const ConvGeom& geom);
// Output size of conv_transpose2d used as an upsampling layer.
int conv_transpose_out_size(int in, const ConvGeom& geom);

// ---- composites ----
Var log_softmax_rows(const Var& logits);           // [N,K]
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

}  // namespace dotfan::ag
