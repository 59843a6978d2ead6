#include "dotfan/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "conv_kernels.hpp"

namespace dotfan::ag {

namespace {

thread_local bool g_grad_enabled = true;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename F>
std::vector<double> map_values(const Var& a, F f) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return out;
}

// Sizes when a tensor is viewed as [N, C, S].
struct View3 {
  int n, c, s;
};

View3 view3(const Shape& shape) {
  if (shape.size() < 2) throw std::invalid_argument("expected a tensor of rank >= 2, got " + shape_str(shape));
  int s = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) s *= shape[i];
  return {shape[0], shape[1], s};
}

class EnableGradGuard {
 public:
  EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
  ~EnableGradGuard() { g_grad_enabled = previous_; }

 private:
  bool previous_;
};

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Var

Var Var::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw std::invalid_argument("Var::constant: " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Var(std::move(node));
}

Var Var::parameter(Shape shape, std::vector<double> values) {
  Var v = constant(std::move(shape), std::move(values));
  v.set_requires_grad(true);
  return v;
}

Var Var::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Var Var::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, value));
}

Var Var::scalar(double value) { return constant({1}, {value}); }

double Var::item() const {
  if (size() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Var Var::detach() const { return constant(shape(), node_->value); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(const char* op, Shape shape, std::vector<double> value,
                std::vector<Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v.defined() && v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

// ---------------------------------------------------------------------------
// Reverse sweep

std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs, bool create_graph,
                      const Var& seed) {
  std::unordered_set<Node*> wanted;
  for (const auto& in : inputs) {
    if (in.defined()) wanted.insert(in.node());
  }

  // Post-order over the recorded graph, tracking which nodes lead to a wanted input.
  std::vector<Var> order;
  std::unordered_map<Node*, bool> relevant;
  if (output.requires_grad()) {
    struct Frame {
      Var var;
      std::size_t next;
    };
    std::vector<Frame> stack{{output, 0}};
    relevant[output.node()] = false;
    while (!stack.empty()) {
      Frame& top = stack.back();
      Node* n = top.var.node();
      if (top.next < n->inputs.size()) {
        const Var& child = n->inputs[top.next++];
        if (child.defined() && child.requires_grad() && !relevant.count(child.node())) {
          relevant[child.node()] = false;
          stack.push_back({child, 0});
        }
        continue;
      }
      bool rel = wanted.count(n) > 0;
      for (const auto& child : n->inputs) {
        if (child.defined() && child.requires_grad() && relevant[child.node()]) rel = true;
      }
      relevant[n] = rel;
      order.push_back(top.var);
      stack.pop_back();
    }
  }

  std::vector<Var> result(inputs.size());
  if (!output.requires_grad() || !relevant[output.node()]) {
    // Output itself may be a wanted input.
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].defined() && inputs[i].node() == output.node()) {
        result[i] = seed.defined() ? seed : Var::full(output.shape(), 1.0);
      }
    }
    return result;
  }

  std::unique_ptr<NoGradGuard> no_grad;
  std::unique_ptr<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad = std::make_unique<EnableGradGuard>();
  } else {
    no_grad = std::make_unique<NoGradGuard>();
  }

  std::unordered_map<Node*, Var> grads;
  if (seed.defined()) {
    if (seed.shape() != output.shape()) throw std::invalid_argument("grad: seed shape mismatch");
    grads[output.node()] = seed;
  } else {
    grads[output.node()] = Var::full(output.shape(), 1.0);
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->node();
    auto found = grads.find(n);
    if (found == grads.end() || !relevant[n] || !n->backward) continue;
    std::vector<bool> need(n->inputs.size(), false);
    bool any = false;
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const Var& child = n->inputs[i];
      need[i] = child.defined() && child.requires_grad() && relevant[child.node()];
      any = any || need[i];
    }
    if (!any) continue;
    const Var g = found->second;
    if (!wanted.count(n)) grads.erase(found);
    std::vector<Var> parts = n->backward(g, *it, need);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!need[i] || !parts[i].defined()) continue;
      Node* child = n->inputs[i].node();
      auto acc = grads.find(child);
      if (acc == grads.end()) {
        grads.emplace(child, parts[i]);
      } else {
        acc->second = add(acc->second, parts[i]);
      }
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].defined()) continue;
    auto found = grads.find(inputs[i].node());
    if (found != grads.end()) result[i] = found->second;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{g, g};
                     });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result("sub", a.shape(), std::move(out), {a, b},
                     [](const Var& g, const Var&, const std::vector<bool>& need) {
                       return std::vector<Var>{g, need[1] ? neg(g) : Var{}};
                     });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [a, b](const Var& g, const Var&, const std::vector<bool>& need) {
                       return std::vector<Var>{need[0] ? mul(g, b) : Var{},
                                               need[1] ? mul(g, a) : Var{}};
                     });
}

Var div(const Var& a, const Var& b) { return mul(a, reciprocal(b)); }

Var scale(const Var& a, double c) {
  return make_result("scale", a.shape(), map_values(a, [c](double v) { return c * v; }), {a},
                     [c](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{scale(g, c)};
                     });
}

Var add_scalar(const Var& a, double c) {
  return make_result("add_scalar", a.shape(), map_values(a, [c](double v) { return v + c; }),
                     {a}, [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{g};
                     });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var square(const Var& a) {
  return make_result("square", a.shape(), map_values(a, [](double v) { return v * v; }), {a},
                     [a](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, scale(a, 2.0))};
                     });
}

Var sqrt(const Var& a) {
  return make_result("sqrt", a.shape(), map_values(a, [](double v) { return std::sqrt(v); }),
                     {a}, [](const Var& g, const Var& self, const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, scale(reciprocal(self), 0.5))};
                     });
}

Var reciprocal(const Var& a) {
  return make_result("reciprocal", a.shape(), map_values(a, [](double v) { return 1.0 / v; }),
                     {a}, [](const Var& g, const Var& self, const std::vector<bool>&) {
                       return std::vector<Var>{neg(mul(g, square(self)))};
                     });
}

Var exp(const Var& a) {
  return make_result("exp", a.shape(), map_values(a, [](double v) { return std::exp(v); }), {a},
                     [](const Var& g, const Var& self, const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, self)};
                     });
}

Var log(const Var& a) {
  return make_result("log", a.shape(), map_values(a, [](double v) { return std::log(v); }), {a},
                     [a](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, reciprocal(a))};
                     });
}

Var tanh(const Var& a) {
  return make_result("tanh", a.shape(), map_values(a, [](double v) { return std::tanh(v); }),
                     {a}, [](const Var& g, const Var& self, const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, add_scalar(neg(square(self)), 1.0))};
                     });
}

Var leaky_relu(const Var& a, double slope) {
  std::vector<double> mask = map_values(a, [slope](double v) { return v > 0.0 ? 1.0 : slope; });
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  Shape shape = a.shape();
  return make_result("leaky_relu", a.shape(), std::move(out), {a},
                     [mask = std::move(mask), shape](const Var& g, const Var&,
                                                     const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, Var::constant(shape, mask))};
                     });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

Var clamp_min(const Var& a, double lo) {
  std::vector<double> mask = map_values(a, [lo](double v) { return v > lo ? 1.0 : 0.0; });
  std::vector<double> out = map_values(a, [lo](double v) { return std::max(v, lo); });
  Shape shape = a.shape();
  return make_result("clamp_min", a.shape(), std::move(out), {a},
                     [mask = std::move(mask), shape](const Var& g, const Var&,
                                                     const std::vector<bool>&) {
                       return std::vector<Var>{mul(g, Var::constant(shape, mask))};
                     });
}

Var where(const std::vector<double>& mask, const Var& a, const Var& b) {
  require_same_shape("where", a, b);
  if (mask.size() != a.size()) throw std::invalid_argument("where: mask size mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] != 0.0 ? a.data()[i] : b.data()[i];
  std::vector<double> inv(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) inv[i] = mask[i] != 0.0 ? 0.0 : 1.0;
  std::vector<double> sel(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) sel[i] = 1.0 - inv[i];
  Shape shape = a.shape();
  return make_result("where", a.shape(), std::move(out), {a, b},
                     [sel = std::move(sel), inv = std::move(inv), shape](
                         const Var& g, const Var&, const std::vector<bool>& need) {
                       return std::vector<Var>{
                           need[0] ? mul(g, Var::constant(shape, sel)) : Var{},
                           need[1] ? mul(g, Var::constant(shape, inv)) : Var{}};
                     });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

Var sum(const Var& a) {
  const auto d = a.data();
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  Shape shape = a.shape();
  return make_result("sum", {1}, {s}, {a},
                     [shape](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{broadcast_scalar(g, shape)};
                     });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var broadcast_scalar(const Var& s, Shape shape) {
  if (s.size() != 1) throw std::invalid_argument("broadcast_scalar: expected a scalar");
  const std::size_t n = numel(shape);
  return make_result("broadcast_scalar", std::move(shape), std::vector<double>(n, s.data()[0]),
                     {s}, [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{sum(g)};
                     });
}

Var row_sum(const Var& a) {
  const int n = a.dim(0);
  const std::size_t r = a.size() / static_cast<std::size_t>(n);
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* p = a.data().data() + i * r;
    out[i] = std::accumulate(p, p + r, 0.0);
  }
  Shape shape = a.shape();
  return make_result("row_sum", {n}, std::move(out), {a},
                     [shape](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{row_broadcast(g, shape)};
                     });
}

Var row_broadcast(const Var& v, Shape shape) {
  if (v.shape().size() != 1 || shape.empty() || shape[0] != v.dim(0)) {
    throw std::invalid_argument("row_broadcast: " + shape_str(v.shape()) + " -> " + shape_str(shape));
  }
  const std::size_t total = numel(shape);
  const std::size_t r = total / static_cast<std::size_t>(v.dim(0));
  std::vector<double> out(total);
  for (int i = 0; i < v.dim(0); ++i) std::fill_n(out.begin() + i * r, r, v.data()[i]);
  return make_result("row_broadcast", std::move(shape), std::move(out), {v},
                     [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{row_sum(g)};
                     });
}

Var sum_channels(const Var& a) {
  const View3 v = view3(a.shape());
  std::vector<double> out(v.c, 0.0);
  const double* p = a.data().data();
  for (int n = 0; n < v.n; ++n)
    for (int c = 0; c < v.c; ++c)
      for (int s = 0; s < v.s; ++s) out[c] += p[(n * v.c + c) * v.s + s];
  Shape shape = a.shape();
  return make_result("sum_channels", {v.c}, std::move(out), {a},
                     [shape](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{expand_channels(g, shape)};
                     });
}

Var expand_channels(const Var& b, Shape shape) {
  const View3 v = view3(shape);
  if (b.shape().size() != 1 || b.dim(0) != v.c) {
    throw std::invalid_argument("expand_channels: " + shape_str(b.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(numel(shape));
  for (int n = 0; n < v.n; ++n)
    for (int c = 0; c < v.c; ++c)
      std::fill_n(out.begin() + (n * v.c + c) * v.s, v.s, b.data()[c]);
  return make_result("expand_channels", std::move(shape), std::move(out), {b},
                     [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{sum_channels(g)};
                     });
}

Var spatial_sum(const Var& a) {
  if (a.shape().size() != 4) throw std::invalid_argument("spatial_sum: expected NCHW");
  const View3 v = view3(a.shape());
  std::vector<double> out(static_cast<std::size_t>(v.n) * v.c);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* p = a.data().data() + i * v.s;
    out[i] = std::accumulate(p, p + v.s, 0.0);
  }
  const int h = a.dim(2), w = a.dim(3);
  return make_result("spatial_sum", {v.n, v.c}, std::move(out), {a},
                     [h, w](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{broadcast_spatial(g, h, w)};
                     });
}

Var broadcast_spatial(const Var& a, int h, int w) {
  if (a.shape().size() != 2) throw std::invalid_argument("broadcast_spatial: expected [N,C]");
  const std::size_t s = static_cast<std::size_t>(h) * w;
  std::vector<double> out(a.size() * s);
  for (std::size_t i = 0; i < a.size(); ++i) std::fill_n(out.begin() + i * s, s, a.data()[i]);
  return make_result("broadcast_spatial", {a.dim(0), a.dim(1), h, w}, std::move(out), {a},
                     [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{spatial_sum(g)};
                     });
}

// ---------------------------------------------------------------------------
// Shape

Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Shape original = a.shape();
  return make_result("reshape", std::move(shape), a.values(), {a},
                     [original](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{reshape(g, original)};
                     });
}

Var concat1(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat1: no inputs");
  const View3 first = view3(parts[0].shape());
  int channels = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    const View3 v = view3(p.shape());
    if (v.n != first.n || v.s != first.s) {
      throw std::invalid_argument("concat1: incompatible " + shape_str(p.shape()) + " and " +
                                  shape_str(parts[0].shape()));
    }
    offsets.push_back(channels);
    channels += v.c;
  }
  Shape shape = parts[0].shape();
  shape[1] = channels;
  std::vector<double> out(numel(shape));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const View3 v = view3(parts[k].shape());
    for (int n = 0; n < v.n; ++n) {
      std::copy_n(parts[k].data().data() + static_cast<std::size_t>(n) * v.c * v.s,
                  static_cast<std::size_t>(v.c) * v.s,
                  out.begin() + (static_cast<std::size_t>(n) * channels + offsets[k]) * v.s);
    }
  }
  std::vector<int> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  return make_result("concat1", std::move(shape), std::move(out), parts,
                     [offsets, widths](const Var& g, const Var&, const std::vector<bool>& need) {
                       std::vector<Var> r(offsets.size());
                       for (std::size_t k = 0; k < offsets.size(); ++k) {
                         if (need[k]) r[k] = slice1(g, offsets[k], widths[k]);
                       }
                       return r;
                     });
}

Var slice1(const Var& a, int start, int length) {
  const View3 v = view3(a.shape());
  if (start < 0 || length < 0 || start + length > v.c) {
    throw std::invalid_argument("slice1: range out of bounds for " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[1] = length;
  std::vector<double> out(numel(shape));
  for (int n = 0; n < v.n; ++n) {
    std::copy_n(a.data().data() + (static_cast<std::size_t>(n) * v.c + start) * v.s,
                static_cast<std::size_t>(length) * v.s,
                out.begin() + static_cast<std::size_t>(n) * length * v.s);
  }
  const int total = v.c;
  return make_result("slice1", std::move(shape), std::move(out), {a},
                     [start, total](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{pad1(g, start, total)};
                     });
}

Var pad1(const Var& a, int start, int total) {
  const View3 v = view3(a.shape());
  if (start < 0 || start + v.c > total) throw std::invalid_argument("pad1: range out of bounds");
  Shape shape = a.shape();
  shape[1] = total;
  std::vector<double> out(numel(shape), 0.0);
  for (int n = 0; n < v.n; ++n) {
    std::copy_n(a.data().data() + static_cast<std::size_t>(n) * v.c * v.s,
                static_cast<std::size_t>(v.c) * v.s,
                out.begin() + (static_cast<std::size_t>(n) * total + start) * v.s);
  }
  const int length = v.c;
  return make_result("pad1", std::move(shape), std::move(out), {a},
                     [start, length](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{slice1(g, start, length)};
                     });
}

Var flip_horizontal(const Var& a) {
  if (a.shape().size() != 4) throw std::invalid_argument("flip_horizontal: expected NCHW");
  const int w = a.dim(3);
  const std::size_t rows = a.size() / static_cast<std::size_t>(w);
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (int x = 0; x < w; ++x) out[r * w + x] = a.data()[r * w + (w - 1 - x)];
  return make_result("flip_horizontal", a.shape(), std::move(out), {a},
                     [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{flip_horizontal(g)};
                     });
}

Var upsample_nearest2x(const Var& a) {
  if (a.shape().size() != 4) throw std::invalid_argument("upsample_nearest2x: expected NCHW");
  const int h = a.dim(2), w = a.dim(3);
  const std::size_t planes = a.size() / (static_cast<std::size_t>(h) * w);
  std::vector<double> out(a.size() * 4);
  for (std::size_t p = 0; p < planes; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x)
        out[(p * 2 * h + y) * 2 * w + x] = a.data()[(p * h + y / 2) * w + x / 2];
  return make_result("upsample_nearest2x", {a.dim(0), a.dim(1), 2 * h, 2 * w}, std::move(out), {a},
                     [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{pool_sum2x(g)};
                     });
}

Var pool_sum2x(const Var& a) {
  if (a.shape().size() != 4 || a.dim(2) % 2 != 0 || a.dim(3) % 2 != 0) {
    throw std::invalid_argument("pool_sum2x: expected NCHW with even H and W");
  }
  const int h = a.dim(2) / 2, w = a.dim(3) / 2;
  const std::size_t planes = a.size() / (static_cast<std::size_t>(h) * w * 4);
  std::vector<double> out(a.size() / 4, 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x)
        out[(p * h + y / 2) * w + x / 2] += a.data()[(p * 2 * h + y) * 2 * w + x];
  return make_result("pool_sum2x", {a.dim(0), a.dim(1), h, w}, std::move(out), {a},
                     [](const Var& g, const Var&, const std::vector<bool>&) {
                       return std::vector<Var>{upsample_nearest2x(g)};
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw std::invalid_argument("matmul: expected 2-D operands");
  }
  Eigen::Map<const MatRM> am(a.data().data(), a.dim(0), a.dim(1));
  Eigen::Map<const MatRM> bm(b.data().data(), b.dim(0), b.dim(1));
  const int m = ta ? a.dim(1) : a.dim(0);
  const int k = ta ? a.dim(0) : a.dim(1);
  const int k2 = tb ? b.dim(1) : b.dim(0);
  const int n = tb ? b.dim(0) : b.dim(1);
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  Eigen::Map<MatRM> om(out.data(), m, n);
  if (!ta && !tb) om.noalias() = am * bm;
  else if (ta && !tb) om.noalias() = am.transpose() * bm;
  else if (!ta && tb) om.noalias() = am * bm.transpose();
  else om.noalias() = am.transpose() * bm.transpose();
  return make_result("matmul", {m, n}, std::move(out), {a, b},
                     [a, b, ta, tb](const Var& g, const Var&, const std::vector<bool>& need) {
                       Var ga, gb;
                       if (need[0]) ga = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                       if (need[1]) gb = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                       return std::vector<Var>{ga, gb};
                     });
}

int conv_out_size(int in, const ConvGeom& geom) {
  return (in + 2 * geom.pad - geom.kernel) / geom.stride + 1;
}

int conv_transpose_out_size(int in, const ConvGeom& geom) {
  return (in - 1) * geom.stride - 2 * geom.pad + geom.kernel;
}

namespace {

kernels::ConvDims conv_dims(const Shape& x, const Shape& w, const ConvGeom& geom) {
  if (x.size() != 4 || w.size() != 4) throw std::invalid_argument("conv: expected 4-D tensors");
  if (w[2] != geom.kernel || w[3] != geom.kernel) throw std::invalid_argument("conv: kernel size mismatch");
  if (x[1] % geom.groups != 0 || w[0] % geom.groups != 0 || w[1] * geom.groups != x[1]) {
    throw std::invalid_argument("conv: channel/group mismatch x=" + shape_str(x) + " w=" + shape_str(w));
  }
  kernels::ConvDims d;
  d.n = x[0];
  d.c = x[1];
  d.h = x[2];
  d.w = x[3];
  d.o = w[0];
  d.k = geom.kernel;
  d.stride = geom.stride;
  d.pad = geom.pad;
  d.groups = geom.groups;
  d.ho = conv_out_size(d.h, geom);
  d.wo = conv_out_size(d.w, geom);
  if (d.ho <= 0 || d.wo <= 0) throw std::invalid_argument("conv: empty output for " + shape_str(x));
  return d;
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const ConvGeom& geom) {
  const kernels::ConvDims d = conv_dims(x.shape(), w.shape(), geom);
  std::vector<double> out(static_cast<std::size_t>(d.n) * d.o * d.ho * d.wo);
  kernels::conv_forward(d, x.data(), w.data(), out);
  Shape xs = x.shape(), ws = w.shape();
  return make_result("conv2d", {d.n, d.o, d.ho, d.wo}, std::move(out), {x, w},
                     [x, w, geom, xs, ws](const Var& g, const Var&, const std::vector<bool>& need) {
                       return std::vector<Var>{
                           need[0] ? conv_transpose2d(g, w, geom, xs) : Var{},
                           need[1] ? conv2d_weight_grad(x, g, geom, ws) : Var{}};
                     });
}

Var conv_transpose2d(const Var& g, const Var& w, const ConvGeom& geom, const Shape& in_shape) {
  const kernels::ConvDims d = conv_dims(in_shape, w.shape(), geom);
  if (g.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw std::invalid_argument("conv_transpose2d: gradient shape " + shape_str(g.shape()) +
                                " does not match " + shape_str(in_shape));
  }
  std::vector<double> out(numel(in_shape), 0.0);
  kernels::conv_backward_input(d, g.data(), w.data(), out);
  return make_result("conv_transpose2d", in_shape, std::move(out), {g, w},
                     [g, w, geom](const Var& h, const Var&, const std::vector<bool>& need) {
                       return std::vector<Var>{
                           need[0] ? conv2d(h, w, geom) : Var{},
                           need[1] ? conv2d_weight_grad(h, g, geom, w.shape()) : Var{}};
                     });
}

Var conv2d_weight_grad(const Var& x, const Var& g, const ConvGeom& geom, const Shape& w_shape) {
  const kernels::ConvDims d = conv_dims(x.shape(), w_shape, geom);
  if (g.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw std::invalid_argument("conv2d_weight_grad: gradient shape mismatch");
  }
  std::vector<double> out(numel(w_shape), 0.0);
  kernels::conv_backward_weight(d, x.data(), g.data(), out);
  Shape xs = x.shape();
  return make_result("conv2d_weight_grad", w_shape, std::move(out), {x, g},
                     [x, g, geom, xs](const Var& h, const Var&, const std::vector<bool>& need) {
                       return std::vector<Var>{
                           need[0] ? conv_transpose2d(g, h, geom, xs) : Var{},
                           need[1] ? conv2d(x, h, geom) : Var{}};
                     });
}

// ---------------------------------------------------------------------------
// Composites

Var log_softmax_rows(const Var& logits) {
  if (logits.shape().size() != 2) throw std::invalid_argument("log_softmax_rows: expected [N,K]");
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<double> maxes(n);
  for (int i = 0; i < n; ++i) {
    const double* p = logits.data().data() + static_cast<std::size_t>(i) * k;
    maxes[i] = *std::max_element(p, p + k);
  }
  // The row max is a constant shift; log-sum-exp is invariant to it.
  Var shifted = sub(logits, row_broadcast(Var::constant({n}, maxes), logits.shape()));
  Var lse = log(row_sum(exp(shifted)));
  return sub(shifted, row_broadcast(lse, logits.shape()));
}

Var l2_normalize_rows(const Var& a, double eps) {
  Var norms = sqrt(add_scalar(row_sum(square(a)), eps));
  return mul(a, row_broadcast(reciprocal(norms), a.shape()));
}

}  // namespace dotfan::ag
