#include "protoalign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "protoalign/threadpool.hpp"

namespace protoalign {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      fail(ErrKind::Numeric, std::string(what) + ": non-finite value encountered");
    }
  }
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrKind::Shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
  }
}

void require_positive_extents(const Shape& s, const char* op) {
  for (auto e : s) {
    if (e <= 0) fail(ErrKind::Shape, std::string(op) + ": non-positive extent in " + shape_str(s));
  }
}

NodePtr make_node(const char* op, Shape shape, std::vector<double> value,
                  std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

inline ThreadPool& pool() { return ThreadPool::global(); }

}  // namespace

NodePtr make_op_node(const char* op, Shape shape, std::vector<double> value,
                     std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
  return make_node(op, std::move(shape), std::move(value), std::move(parents),
                   std::move(backprop));
}

// ---- construction ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  require_positive_extents(shape, "zeros");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(size_t(protoalign::numel(n->shape)), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.raw().begin(), t.raw().end(), v);
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full({1}, v, requires_grad); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  require_positive_extents(shape, "from_data");
  if (int64_t(data.size()) != protoalign::numel(shape)) {
    fail(ErrKind::Shape, "from_data: " + std::to_string(data.size()) +
                             " values do not fill shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.raw()) v = rng.normal() * stddev;
  return t;
}

double Tensor::item() const {
  require(numel() == 1, ErrKind::Shape, "item: tensor is not scalar");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  const Shape& s = node_->shape;
  require(idx.size() == s.size(), ErrKind::Shape, "at: rank mismatch");
  int64_t lin = 0;
  size_t d = 0;
  for (int64_t i : idx) {
    lin = lin * s[d] + i;
    ++d;
  }
  return node_->value[size_t(lin)];
}

// ---- backward ----

void backward(const Tensor& root) {
  require(root.numel() == 1, ErrKind::State, "backward: root must be scalar");
  require(root.requires_grad(), ErrKind::State, "backward: root does not require grad");

  // reverse post-order over parent edges = topological order, children first
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node().get(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  root.node()->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

void Tensor::backward() const { protoalign::backward(*this); }

// ---- elementwise ----

namespace {

template <class Fwd, class Bwd>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.values().size());
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  return Tensor(make_node(op, a.shape(), std::move(out), {a.node(), b.node()},
                          [bwd](Node& self) {
                            Node& na = *self.parents[0];
                            Node& nb = *self.parents[1];
                            if (na.requires_grad) na.ensure_grad();
                            if (nb.requires_grad) nb.ensure_grad();
                            const size_t n = self.value.size();
                            for (size_t i = 0; i < n; ++i) {
                              double ga = 0, gb = 0;
                              bwd(self.grad[i], na.value[i], nb.value[i], ga, gb);
                              if (na.requires_grad) na.grad[i] += ga;
                              if (nb.requires_grad) nb.grad[i] += gb;
                            }
                          }));
}

template <class Fwd, class Bwd>
Tensor unary_op(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
  std::vector<double> out(a.values().size());
  const double* pa = a.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i]);
  return Tensor(make_node(op, a.shape(), std::move(out), {a.node()}, [bwd](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    const size_t n = self.value.size();
    for (size_t i = 0; i < n; ++i) na.grad[i] += bwd(self.grad[i], na.value[i], self.value[i]);
  }));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double& ga, double& gb) {
        ga = g;
        gb = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double& ga, double& gb) {
        ga = g;
        gb = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double& ga, double& gb) {
        ga = g * y;
        gb = g * x;
      });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  Tensor out = binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double& ga, double& gb) {
        ga = g / y;
        gb = -g * x / (y * y);
      });
  check_finite(out.values(), "div");
  return out;
}

Tensor vmax(const Tensor& a, const Tensor& b) {
  return binary_op(
      "max", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double g, double x, double y, double& ga, double& gb) {
        if (x >= y)
          ga = g;
        else
          gb = g;
      });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double g, double, double) { return g; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(
      "mul_scalar", a, [c](double x) { return x * c; },
      [c](double g, double, double) { return g * c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor vabs(const Tensor& a) {
  return unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double g, double x, double) { return x > 0 ? g : (x < 0 ? -g : 0.0); });
}

Tensor max_scalar(const Tensor& a, double c) {
  return unary_op(
      "max_scalar", a, [c](double x) { return x >= c ? x : c; },
      [c](double g, double x, double) { return x >= c ? g : 0.0; });
}

Tensor min_scalar(const Tensor& a, double c) {
  return unary_op(
      "min_scalar", a, [c](double x) { return x <= c ? x : c; },
      [c](double g, double x, double) { return x <= c ? g : 0.0; });
}

Tensor vexp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Tensor vlog(const Tensor& a) {
  check_finite(a.values(), "log input");
  Tensor out = unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
  check_finite(out.values(), "log");
  return out;
}

Tensor vsqrt(const Tensor& a) {
  Tensor out = unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double g, double, double y) { return y > 0 ? g * 0.5 / y : 0.0; });
  check_finite(out.values(), "sqrt");
  return out;
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](double g, double x, double) { return 2.0 * g * x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0 ? g : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op(
      "leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double g, double x, double) { return x > 0 ? g : slope * g; });
}

// ---- softmax ----

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0) axis += a.rank();
  require(axis >= 0 && axis < a.rank(), ErrKind::Shape, "softmax: bad axis");
  check_finite(a.values(), "softmax input");

  const Shape& s = a.shape();
  int64_t lane = s[size_t(axis)];
  int64_t inner = 1;
  for (int d = axis + 1; d < a.rank(); ++d) inner *= s[size_t(d)];
  int64_t outer = a.numel() / (lane * inner);

  std::vector<double> out(a.values().size());
  const double* pa = a.values().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * lane * inner + in;
      double mx = pa[base];
      for (int64_t l = 1; l < lane; ++l) mx = std::max(mx, pa[base + l * inner]);
      double sum = 0;
      for (int64_t l = 0; l < lane; ++l) {
        double e = std::exp(pa[base + l * inner] - mx);
        out[size_t(base + l * inner)] = e;
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int64_t l = 0; l < lane; ++l) out[size_t(base + l * inner)] *= inv;
    }
  }

  return Tensor(make_node("softmax", a.shape(), std::move(out), {a.node()},
                          [lane, inner, outer](Node& self) {
                            Node& na = *self.parents[0];
                            na.ensure_grad();
                            for (int64_t o = 0; o < outer; ++o) {
                              for (int64_t in = 0; in < inner; ++in) {
                                const int64_t base = o * lane * inner + in;
                                double dot = 0;
                                for (int64_t l = 0; l < lane; ++l) {
                                  const size_t i = size_t(base + l * inner);
                                  dot += self.grad[i] * self.value[i];
                                }
                                for (int64_t l = 0; l < lane; ++l) {
                                  const size_t i = size_t(base + l * inner);
                                  na.grad[i] += self.value[i] * (self.grad[i] - dot);
                                }
                              }
                            }
                          }));
}

// ---- reductions ----

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<int64_t> in_dims;
  std::vector<bool> reduced;
  int64_t count = 1;  // elements folded into each output
};

ReducePlan plan_reduce(const Shape& s, const std::vector<int>& axes, bool keepdims) {
  ReducePlan p;
  p.in_dims.assign(s.begin(), s.end());
  p.reduced.assign(s.size(), false);
  for (int ax : axes) {
    int a = ax < 0 ? ax + int(s.size()) : ax;
    require(a >= 0 && a < int(s.size()), ErrKind::Shape, "reduce: bad axis");
    require(!p.reduced[size_t(a)], ErrKind::Shape, "reduce: duplicate axis");
    p.reduced[size_t(a)] = true;
    p.count *= s[size_t(a)];
  }
  for (size_t d = 0; d < s.size(); ++d) {
    if (!p.reduced[d])
      p.out_shape.push_back(s[d]);
    else if (keepdims)
      p.out_shape.push_back(1);
  }
  if (p.out_shape.empty()) p.out_shape.push_back(1);
  return p;
}

// maps each input linear index to its output linear index
std::vector<int64_t> reduce_index_map(const ReducePlan& p) {
  const size_t rank = p.in_dims.size();
  std::vector<int64_t> out_stride(rank, 0);
  int64_t stride = 1;
  for (size_t d = rank; d-- > 0;) {
    if (!p.reduced[d]) {
      out_stride[d] = stride;
      stride *= p.in_dims[d];
    }
  }
  int64_t total = 1;
  for (auto e : p.in_dims) total *= e;
  std::vector<int64_t> map(static_cast<size_t>(total));
  std::vector<int64_t> idx(rank, 0);
  for (int64_t i = 0; i < total; ++i) {
    int64_t o = 0;
    for (size_t d = 0; d < rank; ++d) o += idx[d] * out_stride[d];
    map[size_t(i)] = o;
    for (size_t d = rank; d-- > 0;) {
      if (++idx[d] < p.in_dims[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

Tensor reduce_impl(const Tensor& a, const std::vector<int>& axes, bool keepdims, bool mean) {
  ReducePlan p = plan_reduce(a.shape(), axes, keepdims);
  auto map = reduce_index_map(p);
  const double scale = mean ? 1.0 / double(p.count) : 1.0;
  std::vector<double> out(size_t(numel(p.out_shape)), 0.0);
  const double* pa = a.values().data();
  for (size_t i = 0; i < map.size(); ++i) out[size_t(map[i])] += pa[i];
  if (mean) {
    for (auto& v : out) v *= scale;
  }
  auto shared_map = std::make_shared<std::vector<int64_t>>(std::move(map));
  return Tensor(make_node(mean ? "mean" : "sum", p.out_shape, std::move(out), {a.node()},
                          [shared_map, scale](Node& self) {
                            Node& na = *self.parents[0];
                            na.ensure_grad();
                            const auto& m = *shared_map;
                            for (size_t i = 0; i < m.size(); ++i) {
                              na.grad[i] += self.grad[size_t(m[i])] * scale;
                            }
                          }));
}

}  // namespace

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl(a, axes, keepdims, false);
}

Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl(a, axes, keepdims, true);
}

Tensor sum_all(const Tensor& a) {
  std::vector<int> axes(size_t(a.rank()));
  for (int d = 0; d < a.rank(); ++d) axes[size_t(d)] = d;
  return reduce_sum(a, axes, false);
}

Tensor mean_all(const Tensor& a) {
  std::vector<int> axes(size_t(a.rank()));
  for (int d = 0; d < a.rank(); ++d) axes[size_t(d)] = d;
  return reduce_mean(a, axes, false);
}

// ---- shape ops ----

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.numel(), ErrKind::Shape,
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return Tensor(make_node("reshape", std::move(shape), std::move(out), {a.node()},
                          [](Node& self) {
                            Node& na = *self.parents[0];
                            na.ensure_grad();
                            for (size_t i = 0; i < self.grad.size(); ++i)
                              na.grad[i] += self.grad[i];
                          }));
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  if (axis < 0) axis += a.rank();
  require(axis >= 0 && axis < a.rank(), ErrKind::Shape, "slice: bad axis");
  const Shape& s = a.shape();
  require(start >= 0 && len > 0 && start + len <= s[size_t(axis)], ErrKind::Shape,
          "slice: range out of bounds for " + shape_str(s));
  int64_t inner = 1;
  for (int d = axis + 1; d < a.rank(); ++d) inner *= s[size_t(d)];
  int64_t outer = a.numel() / (inner * s[size_t(axis)]);
  Shape out_shape = s;
  out_shape[size_t(axis)] = len;

  std::vector<double> out(size_t(outer * len * inner));
  const double* pa = a.values().data();
  const int64_t lane = s[size_t(axis)];
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * len * inner, pa + (o * lane + start) * inner,
                size_t(len * inner) * sizeof(double));
  }
  return Tensor(make_node("slice", std::move(out_shape), std::move(out), {a.node()},
                          [outer, inner, lane, start, len](Node& self) {
                            Node& na = *self.parents[0];
                            na.ensure_grad();
                            for (int64_t o = 0; o < outer; ++o) {
                              const double* g = self.grad.data() + o * len * inner;
                              double* dst = na.grad.data() + (o * lane + start) * inner;
                              for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                            }
                          }));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), ErrKind::Shape, "concat: no inputs");
  int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, ErrKind::Shape, "concat: bad axis");
  Shape out_shape = parts[0].shape();
  int64_t lane_total = 0;
  for (const auto& p : parts) {
    require(p.rank() == rank, ErrKind::Shape, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis) {
        require(p.shape()[size_t(d)] == out_shape[size_t(d)], ErrKind::Shape,
                "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(out_shape));
      }
    }
    lane_total += p.extent(axis);
  }
  out_shape[size_t(axis)] = lane_total;

  int64_t inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[size_t(d)];
  int64_t outer = numel(out_shape) / (lane_total * inner);

  std::vector<double> out(size_t(numel(out_shape)));
  std::vector<NodePtr> nodes;
  std::vector<int64_t> lanes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    lanes.push_back(p.extent(axis));
  }
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].values().data();
    int64_t lane = lanes[k];
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * lane_total + off) * inner, src + o * lane * inner,
                  size_t(lane * inner) * sizeof(double));
    }
    off += lane;
  }

  return Tensor(make_node("concat", std::move(out_shape), std::move(out), std::move(nodes),
                          [outer, inner, lanes, lane_total](Node& self) {
                            int64_t off = 0;
                            for (size_t k = 0; k < self.parents.size(); ++k) {
                              Node& p = *self.parents[k];
                              int64_t lane = lanes[k];
                              if (p.requires_grad) {
                                p.ensure_grad();
                                for (int64_t o = 0; o < outer; ++o) {
                                  const double* g =
                                      self.grad.data() + (o * lane_total + off) * inner;
                                  double* dst = p.grad.data() + o * lane * inner;
                                  for (int64_t i = 0; i < lane * inner; ++i) dst[i] += g[i];
                                }
                              }
                              off += lane;
                            }
                          }));
}

Tensor transpose2d(const Tensor& a) {
  require(a.rank() == 2, ErrKind::Shape, "transpose2d: need rank 2, got " + shape_str(a.shape()));
  const int64_t m = a.extent(0), n = a.extent(1);
  std::vector<double> out(size_t(m * n));
  const double* pa = a.values().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[size_t(j * m + i)] = pa[i * n + j];
  return Tensor(make_node("transpose2d", {n, m}, std::move(out), {a.node()}, [m, n](Node& self) {
    Node& na = *self.parents[0];
    na.ensure_grad();
    for (int64_t j = 0; j < n; ++j)
      for (int64_t i = 0; i < m; ++i) na.grad[size_t(i * n + j)] += self.grad[size_t(j * m + i)];
  }));
}

// ---- matmul ----

namespace {

struct MatmulDims {
  int64_t b, m, k, n;
  bool batch_a, batch_b;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  MatmulDims d{};
  d.batch_a = a.rank() == 3;
  d.batch_b = b.rank() == 3;
  require(a.rank() == 2 || a.rank() == 3, ErrKind::Shape,
          "matmul: lhs rank must be 2 or 3, got " + shape_str(a.shape()));
  require(b.rank() == 2 || b.rank() == 3, ErrKind::Shape,
          "matmul: rhs rank must be 2 or 3, got " + shape_str(b.shape()));
  require(!(a.rank() == 2 && b.rank() == 3), ErrKind::Shape,
          "matmul: 2-D lhs with batched rhs is unsupported");
  d.m = a.extent(d.batch_a ? 1 : 0);
  d.k = a.extent(d.batch_a ? 2 : 1);
  int64_t kb = b.extent(d.batch_b ? 1 : 0);
  d.n = b.extent(d.batch_b ? 2 : 1);
  require(d.k == kb, ErrKind::Shape, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                         " x " + shape_str(b.shape()));
  d.b = d.batch_a ? a.extent(0) : 1;
  if (d.batch_a && d.batch_b) {
    require(a.extent(0) == b.extent(0), ErrKind::Shape, "matmul: batch extents disagree");
  }
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatmulDims d = matmul_dims(a, b);
  Shape out_shape = d.batch_a ? Shape{d.b, d.m, d.n} : Shape{d.m, d.n};
  std::vector<double> out(size_t(d.b * d.m * d.n), 0.0);

  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = out.data();
  const int64_t bstride_b = d.batch_b ? d.k * d.n : 0;

  pool().parallel_for(d.b * d.m, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const int64_t bi = r / d.m;
      const double* arow = pa + r * d.k;
      const double* bbase = pb + bi * bstride_b;
      double* crow = pc + r * d.n;
      for (int64_t kk = 0; kk < d.k; ++kk) {
        const double v = arow[kk];
        const double* brow = bbase + kk * d.n;
        for (int64_t j = 0; j < d.n; ++j) crow[j] += v * brow[j];
      }
    }
  });

  auto dims = d;
  return Tensor(make_node("matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
                          [dims](Node& self) {
                            Node& na = *self.parents[0];
                            Node& nb = *self.parents[1];
                            const double* pa = na.value.data();
                            const double* pb = nb.value.data();
                            const double* g = self.grad.data();
                            const int64_t bstride_b = dims.batch_b ? dims.k * dims.n : 0;

                            if (na.requires_grad) {
                              na.ensure_grad();
                              double* ga = na.grad.data();
                              pool().parallel_for(dims.b * dims.m, [&](int64_t lo, int64_t hi) {
                                for (int64_t r = lo; r < hi; ++r) {
                                  const int64_t bi = r / dims.m;
                                  const double* grow = g + r * dims.n;
                                  const double* bbase = pb + bi * bstride_b;
                                  double* garow = ga + r * dims.k;
                                  for (int64_t kk = 0; kk < dims.k; ++kk) {
                                    const double* brow = bbase + kk * dims.n;
                                    double s = 0;
                                    for (int64_t j = 0; j < dims.n; ++j) s += grow[j] * brow[j];
                                    garow[kk] += s;
                                  }
                                }
                              });
                            }
                            if (nb.requires_grad) {
                              nb.ensure_grad();
                              double* gb = nb.grad.data();
                              if (dims.batch_b) {
                                pool().parallel_for(dims.b * dims.k, [&](int64_t lo, int64_t hi) {
                                  for (int64_t r = lo; r < hi; ++r) {
                                    const int64_t bi = r / dims.k;
                                    const int64_t kk = r % dims.k;
                                    double* gbrow = gb + r * dims.n;
                                    for (int64_t i = 0; i < dims.m; ++i) {
                                      const double v = pa[(bi * dims.m + i) * dims.k + kk];
                                      const double* grow = g + (bi * dims.m + i) * dims.n;
                                      for (int64_t j = 0; j < dims.n; ++j)
                                        gbrow[j] += v * grow[j];
                                    }
                                  }
                                });
                              } else {
                                // shared rhs: fixed batch-then-row accumulation order per k
                                pool().parallel_for(dims.k, [&](int64_t lo, int64_t hi) {
                                  for (int64_t kk = lo; kk < hi; ++kk) {
                                    double* gbrow = gb + kk * dims.n;
                                    for (int64_t r = 0; r < dims.b * dims.m; ++r) {
                                      const double v = pa[r * dims.k + kk];
                                      const double* grow = g + r * dims.n;
                                      for (int64_t j = 0; j < dims.n; ++j)
                                        gbrow[j] += v * grow[j];
                                    }
                                  }
                                });
                              }
                            }
                          }));
}

// ---- conv2d ----

namespace {

struct ConvDims {
  int64_t n, h, w, ci, kh, kw, co, oh, ow;
  int stride, dilation;
  int64_t pad_h, pad_w;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int dilation) {
  require(x.rank() == 4, ErrKind::Shape, "conv2d: input must be [n,h,w,c], got " +
                                             shape_str(x.shape()));
  require(w.rank() == 4, ErrKind::Shape, "conv2d: weight must be [kh,kw,ci,co], got " +
                                             shape_str(w.shape()));
  require(stride >= 1 && dilation >= 1, ErrKind::Shape, "conv2d: bad stride/dilation");
  ConvDims d{};
  d.n = x.extent(0);
  d.h = x.extent(1);
  d.w = x.extent(2);
  d.ci = x.extent(3);
  d.kh = w.extent(0);
  d.kw = w.extent(1);
  require(w.extent(2) == d.ci, ErrKind::Shape,
          "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  d.co = w.extent(3);
  d.stride = stride;
  d.dilation = dilation;
  d.oh = (d.h + stride - 1) / stride;
  d.ow = (d.w + stride - 1) / stride;
  const int64_t eff_kh = (d.kh - 1) * dilation + 1;
  const int64_t eff_kw = (d.kw - 1) * dilation + 1;
  d.pad_h = std::max<int64_t>(0, (d.oh - 1) * stride + eff_kh - d.h) / 2;
  d.pad_w = std::max<int64_t>(0, (d.ow - 1) * stride + eff_kw - d.w) / 2;
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int dilation) {
  ConvDims d = conv_dims(x, w, stride, dilation);
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.rank() == 1 && bias.extent(0) == d.co, ErrKind::Shape,
            "conv2d: bias must be [co], got " + shape_str(bias.shape()));
  }

  std::vector<double> out(size_t(d.n * d.oh * d.ow * d.co), 0.0);
  const double* px = x.values().data();
  const double* pw = w.values().data();
  const double* pbias = has_bias ? bias.values().data() : nullptr;
  double* po = out.data();

  pool().parallel_for(d.n, [&](int64_t lo, int64_t hi) {
    for (int64_t n = lo; n < hi; ++n) {
      for (int64_t oh = 0; oh < d.oh; ++oh) {
        for (int64_t ow = 0; ow < d.ow; ++ow) {
          double* acc = po + ((n * d.oh + oh) * d.ow + ow) * d.co;
          if (pbias) {
            for (int64_t c = 0; c < d.co; ++c) acc[c] = pbias[c];
          }
          for (int64_t kh = 0; kh < d.kh; ++kh) {
            const int64_t ih = oh * d.stride + kh * d.dilation - d.pad_h;
            if (ih < 0 || ih >= d.h) continue;
            for (int64_t kw = 0; kw < d.kw; ++kw) {
              const int64_t iw = ow * d.stride + kw * d.dilation - d.pad_w;
              if (iw < 0 || iw >= d.w) continue;
              const double* xp = px + ((n * d.h + ih) * d.w + iw) * d.ci;
              const double* wp = pw + (kh * d.kw + kw) * d.ci * d.co;
              for (int64_t ci = 0; ci < d.ci; ++ci) {
                const double v = xp[ci];
                const double* wr = wp + ci * d.co;
                for (int64_t c = 0; c < d.co; ++c) acc[c] += v * wr[c];
              }
            }
          }
        }
      }
    }
  });

  std::vector<NodePtr> parents = {x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  auto dims = d;
  return Tensor(make_node(
      "conv2d", {d.n, d.oh, d.ow, d.co}, std::move(out), std::move(parents),
      [dims, has_bias](Node& self) {
        Node& nx = *self.parents[0];
        Node& nw = *self.parents[1];
        const double* px = nx.value.data();
        const double* pw = nw.value.data();
        const double* g = self.grad.data();
        const ConvDims& d = dims;

        if (nx.requires_grad) {
          nx.ensure_grad();
          double* gx = nx.grad.data();
          pool().parallel_for(d.n, [&](int64_t lo, int64_t hi) {
            for (int64_t n = lo; n < hi; ++n) {
              for (int64_t oh = 0; oh < d.oh; ++oh) {
                for (int64_t ow = 0; ow < d.ow; ++ow) {
                  const double* gp = g + ((n * d.oh + oh) * d.ow + ow) * d.co;
                  for (int64_t kh = 0; kh < d.kh; ++kh) {
                    const int64_t ih = oh * d.stride + kh * d.dilation - d.pad_h;
                    if (ih < 0 || ih >= d.h) continue;
                    for (int64_t kw = 0; kw < d.kw; ++kw) {
                      const int64_t iw = ow * d.stride + kw * d.dilation - d.pad_w;
                      if (iw < 0 || iw >= d.w) continue;
                      double* gxp = gx + ((n * d.h + ih) * d.w + iw) * d.ci;
                      const double* wp = pw + (kh * d.kw + kw) * d.ci * d.co;
                      for (int64_t ci = 0; ci < d.ci; ++ci) {
                        const double* wr = wp + ci * d.co;
                        double s = 0;
                        for (int64_t c = 0; c < d.co; ++c) s += gp[c] * wr[c];
                        gxp[ci] += s;
                      }
                    }
                  }
                }
              }
            }
          });
        }

        if (nw.requires_grad) {
          nw.ensure_grad();
          double* gw = nw.grad.data();
          // partition by kernel tap; Σ over n,oh,ow stays in fixed order
          pool().parallel_for(d.kh * d.kw, [&](int64_t lo, int64_t hi) {
            for (int64_t u = lo; u < hi; ++u) {
              const int64_t kh = u / d.kw;
              const int64_t kw = u % d.kw;
              double* gws = gw + u * d.ci * d.co;
              for (int64_t n = 0; n < d.n; ++n) {
                for (int64_t oh = 0; oh < d.oh; ++oh) {
                  const int64_t ih = oh * d.stride + kh * d.dilation - d.pad_h;
                  if (ih < 0 || ih >= d.h) continue;
                  for (int64_t ow = 0; ow < d.ow; ++ow) {
                    const int64_t iw = ow * d.stride + kw * d.dilation - d.pad_w;
                    if (iw < 0 || iw >= d.w) continue;
                    const double* xp = px + ((n * d.h + ih) * d.w + iw) * d.ci;
                    const double* gp = g + ((n * d.oh + oh) * d.ow + ow) * d.co;
                    for (int64_t ci = 0; ci < d.ci; ++ci) {
                      const double v = xp[ci];
                      double* row = gws + ci * d.co;
                      for (int64_t c = 0; c < d.co; ++c) row[c] += v * gp[c];
                    }
                  }
                }
              }
            }
          });
        }

        if (has_bias && self.parents[2]->requires_grad) {
          Node& nb = *self.parents[2];
          nb.ensure_grad();
          const int64_t spatial = d.n * d.oh * d.ow;
          for (int64_t p = 0; p < spatial; ++p) {
            const double* gp = g + p * d.co;
            for (int64_t c = 0; c < d.co; ++c) nb.grad[size_t(c)] += gp[c];
          }
        }
      }));
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int dilation) {
  return conv2d(x, w, Tensor(), stride, dilation);
}

// ---- resampling ----

Tensor upsample_nearest(const Tensor& x, int factor) {
  require(x.rank() == 4, ErrKind::Shape, "upsample_nearest: need [n,h,w,c]");
  require(factor >= 1, ErrKind::Shape, "upsample_nearest: bad factor");
  const int64_t n = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
  const int64_t oh = h * factor, ow = w * factor;
  std::vector<double> out(size_t(n * oh * ow * c));
  const double* px = x.values().data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t y = 0; y < oh; ++y) {
      const int64_t sy = y / factor;
      for (int64_t xw = 0; xw < ow; ++xw) {
        const int64_t sx = xw / factor;
        std::memcpy(out.data() + ((i * oh + y) * ow + xw) * c,
                    px + ((i * h + sy) * w + sx) * c, size_t(c) * sizeof(double));
      }
    }
  }
  return Tensor(make_node("upsample_nearest", {n, oh, ow, c}, std::move(out), {x.node()},
                          [n, h, w, c, oh, ow, factor](Node& self) {
                            Node& nx = *self.parents[0];
                            nx.ensure_grad();
                            for (int64_t i = 0; i < n; ++i) {
                              for (int64_t y = 0; y < oh; ++y) {
                                const int64_t sy = y / factor;
                                for (int64_t xw = 0; xw < ow; ++xw) {
                                  const int64_t sx = xw / factor;
                                  const double* g = self.grad.data() + ((i * oh + y) * ow + xw) * c;
                                  double* dst = nx.grad.data() + ((i * h + sy) * w + sx) * c;
                                  for (int64_t ch = 0; ch < c; ++ch) dst[ch] += g[ch];
                                }
                              }
                            }
                          }));
}

namespace {

struct LerpTap {
  int64_t i0, i1;
  double w0, w1;
};

std::vector<LerpTap> lerp_taps(int64_t out_len, int64_t in_len, int factor) {
  std::vector<LerpTap> taps(static_cast<size_t>(out_len));
  for (int64_t o = 0; o < out_len; ++o) {
    double s = (double(o) + 0.5) / double(factor) - 0.5;
    int64_t i0 = int64_t(std::floor(s));
    double w1 = s - double(i0);
    int64_t i1 = i0 + 1;
    if (i0 < 0) {
      i0 = 0;
      i1 = 0;
      w1 = 0;
    } else if (i1 >= in_len) {
      i0 = in_len - 1;
      i1 = in_len - 1;
      w1 = 0;
    }
    taps[size_t(o)] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int factor) {
  require(x.rank() == 4, ErrKind::Shape, "upsample_bilinear: need [n,h,w,c]");
  require(factor >= 1, ErrKind::Shape, "upsample_bilinear: bad factor");
  const int64_t n = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
  const int64_t oh = h * factor, ow = w * factor;
  auto ytaps = std::make_shared<std::vector<LerpTap>>(lerp_taps(oh, h, factor));
  auto xtaps = std::make_shared<std::vector<LerpTap>>(lerp_taps(ow, w, factor));

  std::vector<double> out(size_t(n * oh * ow * c));
  const double* px = x.values().data();
  pool().parallel_for(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      for (int64_t y = 0; y < oh; ++y) {
        const LerpTap& ty = (*ytaps)[size_t(y)];
        for (int64_t xw = 0; xw < ow; ++xw) {
          const LerpTap& tx = (*xtaps)[size_t(xw)];
          const double* p00 = px + ((i * h + ty.i0) * w + tx.i0) * c;
          const double* p01 = px + ((i * h + ty.i0) * w + tx.i1) * c;
          const double* p10 = px + ((i * h + ty.i1) * w + tx.i0) * c;
          const double* p11 = px + ((i * h + ty.i1) * w + tx.i1) * c;
          double* dst = out.data() + ((i * oh + y) * ow + xw) * c;
          for (int64_t ch = 0; ch < c; ++ch) {
            dst[ch] = ty.w0 * (tx.w0 * p00[ch] + tx.w1 * p01[ch]) +
                      ty.w1 * (tx.w0 * p10[ch] + tx.w1 * p11[ch]);
          }
        }
      }
    }
  });

  return Tensor(make_node("upsample_bilinear", {n, oh, ow, c}, std::move(out), {x.node()},
                          [n, h, w, c, oh, ow, ytaps, xtaps](Node& self) {
                            Node& nx = *self.parents[0];
                            nx.ensure_grad();
                            pool().parallel_for(n, [&](int64_t lo, int64_t hi) {
                              for (int64_t i = lo; i < hi; ++i) {
                                for (int64_t y = 0; y < oh; ++y) {
                                  const LerpTap& ty = (*ytaps)[size_t(y)];
                                  for (int64_t xw = 0; xw < ow; ++xw) {
                                    const LerpTap& tx = (*xtaps)[size_t(xw)];
                                    const double* g =
                                        self.grad.data() + ((i * oh + y) * ow + xw) * c;
                                    double* g00 = nx.grad.data() + ((i * h + ty.i0) * w + tx.i0) * c;
                                    double* g01 = nx.grad.data() + ((i * h + ty.i0) * w + tx.i1) * c;
                                    double* g10 = nx.grad.data() + ((i * h + ty.i1) * w + tx.i0) * c;
                                    double* g11 = nx.grad.data() + ((i * h + ty.i1) * w + tx.i1) * c;
                                    for (int64_t ch = 0; ch < c; ++ch) {
                                      g00[ch] += ty.w0 * tx.w0 * g[ch];
                                      g01[ch] += ty.w0 * tx.w1 * g[ch];
                                      g10[ch] += ty.w1 * tx.w0 * g[ch];
                                      g11[ch] += ty.w1 * tx.w1 * g[ch];
                                    }
                                  }
                                }
                              }
                            });
                          }));
}

Tensor avgpool2d(const Tensor& x, int factor) {
  require(x.rank() == 4, ErrKind::Shape, "avgpool2d: need [n,h,w,c]");
  const int64_t n = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
  require(factor >= 1 && h % factor == 0 && w % factor == 0, ErrKind::Shape,
          "avgpool2d: factor must divide spatial extents of " + shape_str(x.shape()));
  const int64_t oh = h / factor, ow = w / factor;
  const double inv = 1.0 / double(factor * factor);
  std::vector<double> out(size_t(n * oh * ow * c), 0.0);
  const double* px = x.values().data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t y = 0; y < h; ++y) {
      const int64_t sy = y / factor;
      for (int64_t xw = 0; xw < w; ++xw) {
        const int64_t sx = xw / factor;
        const double* src = px + ((i * h + y) * w + xw) * c;
        double* dst = out.data() + ((i * oh + sy) * ow + sx) * c;
        for (int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv;
      }
    }
  }
  return Tensor(make_node("avgpool2d", {n, oh, ow, c}, std::move(out), {x.node()},
                          [n, h, w, c, oh, ow, factor, inv](Node& self) {
                            Node& nx = *self.parents[0];
                            nx.ensure_grad();
                            for (int64_t i = 0; i < n; ++i) {
                              for (int64_t y = 0; y < h; ++y) {
                                const int64_t sy = y / factor;
                                for (int64_t xw = 0; xw < w; ++xw) {
                                  const int64_t sx = xw / factor;
                                  const double* g =
                                      self.grad.data() + ((i * oh + sy) * ow + sx) * c;
                                  double* dst = nx.grad.data() + ((i * h + y) * w + xw) * c;
                                  for (int64_t ch = 0; ch < c; ++ch) dst[ch] += g[ch] * inv;
                                }
                              }
                            }
                          }));
}

// ---- gradient reversal ----

Tensor gradient_reversal(const Tensor& x, double scale) {
  require(scale >= 0, ErrKind::Config, "gradient_reversal: scale must be nonnegative");
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor(make_node("grl", x.shape(), std::move(out), {x.node()}, [scale](Node& self) {
    Node& nx = *self.parents[0];
    nx.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += -scale * self.grad[i];
  }));
}

// ---- batch norm ----

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, const BatchNormMode& mode) {
  require(x.rank() == 4, ErrKind::Shape, "batch_norm: need [n,h,w,c]");
  const int64_t c = x.extent(3);
  require(gamma.rank() == 1 && gamma.extent(0) == c, ErrKind::Shape, "batch_norm: gamma shape");
  require(beta.rank() == 1 && beta.extent(0) == c, ErrKind::Shape, "batch_norm: beta shape");
  require(running_mean.numel() == c && running_var.numel() == c, ErrKind::Shape,
          "batch_norm: running stats shape");
  const int64_t rows = x.numel() / c;

  std::vector<double> mu(size_t(c), 0.0), var(size_t(c), 0.0);
  const double* px = x.values().data();
  if (mode.training) {
    for (int64_t r = 0; r < rows; ++r) {
      const double* xp = px + r * c;
      for (int64_t ch = 0; ch < c; ++ch) mu[size_t(ch)] += xp[ch];
    }
    for (auto& v : mu) v /= double(rows);
    for (int64_t r = 0; r < rows; ++r) {
      const double* xp = px + r * c;
      for (int64_t ch = 0; ch < c; ++ch) {
        const double dv = xp[ch] - mu[size_t(ch)];
        var[size_t(ch)] += dv * dv;
      }
    }
    for (auto& v : var) v /= double(rows);
    if (mode.update_running) {
      auto& rm = running_mean.raw();
      auto& rv = running_var.raw();
      for (int64_t ch = 0; ch < c; ++ch) {
        rm[size_t(ch)] = (1.0 - mode.momentum) * rm[size_t(ch)] + mode.momentum * mu[size_t(ch)];
        rv[size_t(ch)] = (1.0 - mode.momentum) * rv[size_t(ch)] + mode.momentum * var[size_t(ch)];
      }
    }
  } else {
    std::copy(running_mean.values().begin(), running_mean.values().end(), mu.begin());
    std::copy(running_var.values().begin(), running_var.values().end(), var.begin());
  }

  std::vector<double> invstd(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) invstd[size_t(ch)] = 1.0 / std::sqrt(var[size_t(ch)] + mode.eps);

  const double* pg = gamma.values().data();
  const double* pbeta = beta.values().data();
  std::vector<double> out(x.values().size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xp = px + r * c;
    double* op = out.data() + r * c;
    for (int64_t ch = 0; ch < c; ++ch) {
      op[ch] = (xp[ch] - mu[size_t(ch)]) * invstd[size_t(ch)] * pg[ch] + pbeta[ch];
    }
  }

  auto mu_s = std::make_shared<std::vector<double>>(std::move(mu));
  auto invstd_s = std::make_shared<std::vector<double>>(std::move(invstd));
  const bool training = mode.training;
  return Tensor(make_node(
      "batch_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [c, rows, mu_s, invstd_s, training](Node& self) {
        Node& nx = *self.parents[0];
        Node& ng = *self.parents[1];
        Node& nb = *self.parents[2];
        const double* px = nx.value.data();
        const double* pgam = ng.value.data();
        const double* g = self.grad.data();
        const auto& mu = *mu_s;
        const auto& invstd = *invstd_s;

        // per-channel sums of g and g*xhat
        std::vector<double> sg(size_t(c), 0.0), sgx(size_t(c), 0.0);
        for (int64_t r = 0; r < rows; ++r) {
          const double* gp = g + r * c;
          const double* xp = px + r * c;
          for (int64_t ch = 0; ch < c; ++ch) {
            sg[size_t(ch)] += gp[ch];
            sgx[size_t(ch)] += gp[ch] * (xp[ch] - mu[size_t(ch)]) * invstd[size_t(ch)];
          }
        }
        if (ng.requires_grad) {
          ng.ensure_grad();
          for (int64_t ch = 0; ch < c; ++ch) ng.grad[size_t(ch)] += sgx[size_t(ch)];
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          for (int64_t ch = 0; ch < c; ++ch) nb.grad[size_t(ch)] += sg[size_t(ch)];
        }
        if (nx.requires_grad) {
          nx.ensure_grad();
          double* gx = nx.grad.data();
          if (training) {
            const double invm = 1.0 / double(rows);
            for (int64_t r = 0; r < rows; ++r) {
              const double* gp = g + r * c;
              const double* xp = px + r * c;
              double* gxp = gx + r * c;
              for (int64_t ch = 0; ch < c; ++ch) {
                const double xhat = (xp[ch] - mu[size_t(ch)]) * invstd[size_t(ch)];
                gxp[ch] += pgam[ch] * invstd[size_t(ch)] *
                           (gp[ch] - invm * sg[size_t(ch)] - invm * xhat * sgx[size_t(ch)]);
              }
            }
          } else {
            for (int64_t r = 0; r < rows; ++r) {
              const double* gp = g + r * c;
              double* gxp = gx + r * c;
              for (int64_t ch = 0; ch < c; ++ch)
                gxp[ch] += gp[ch] * pgam[ch] * invstd[size_t(ch)];
            }
          }
        }
      }));
}

// ---- dropout ----

Tensor dropout(const Tensor& x, double ratio, Rng& rng, bool enabled) {
  require(ratio >= 0.0 && ratio < 1.0, ErrKind::Config, "dropout: ratio must be in [0,1)");
  if (!enabled || ratio == 0.0) return x;
  const double keep = 1.0 - ratio;
  const double inv_keep = 1.0 / keep;
  auto mask = std::make_shared<std::vector<double>>(x.values().size());
  std::vector<double> out(x.values().size());
  const double* px = x.values().data();
  for (size_t i = 0; i < out.size(); ++i) {
    const double m = rng.uniform() < keep ? inv_keep : 0.0;
    (*mask)[i] = m;
    out[i] = px[i] * m;
  }
  return Tensor(make_node("dropout", x.shape(), std::move(out), {x.node()}, [mask](Node& self) {
    Node& nx = *self.parents[0];
    nx.ensure_grad();
    const auto& m = *mask;
    for (size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += self.grad[i] * m[i];
  }));
}

// ---- graph attention primitives ----

Tensor pairwise_absdiff_dot(const Tensor& h, const Tensor& w) {
  require(h.rank() == 3, ErrKind::Shape, "pairwise_absdiff_dot: h must be [b,n,d]");
  require(w.rank() == 1 && w.extent(0) == h.extent(2), ErrKind::Shape,
          "pairwise_absdiff_dot: w must be [d] matching " + shape_str(h.shape()));
  const int64_t b = h.extent(0), n = h.extent(1), d = h.extent(2);
  std::vector<double> out(size_t(b * n * n));
  const double* ph = h.values().data();
  const double* pw = w.values().data();
  pool().parallel_for(b * n, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const int64_t bi = r / n;
      const int64_t i = r % n;
      const double* hi_ = ph + (bi * n + i) * d;
      double* orow = out.data() + r * n;
      for (int64_t j = 0; j < n; ++j) {
        const double* hj = ph + (bi * n + j) * d;
        double s = 0;
        for (int64_t k = 0; k < d; ++k) s += pw[k] * std::fabs(hi_[k] - hj[k]);
        orow[j] = s;
      }
    }
  });

  return Tensor(make_node(
      "pairwise_absdiff_dot", {b, n, n}, std::move(out), {h.node(), w.node()},
      [b, n, d](Node& self) {
        Node& nh = *self.parents[0];
        Node& nw = *self.parents[1];
        const double* ph = nh.value.data();
        const double* pw = nw.value.data();
        const double* g = self.grad.data();

        if (nw.requires_grad) {
          nw.ensure_grad();
          double* gw = nw.grad.data();
          pool().parallel_for(d, [&](int64_t lo, int64_t hi) {
            for (int64_t k = lo; k < hi; ++k) {
              double acc = 0;
              for (int64_t bi = 0; bi < b; ++bi) {
                for (int64_t i = 0; i < n; ++i) {
                  const double hik = ph[(bi * n + i) * d + k];
                  const double* grow = g + (bi * n + i) * n;
                  for (int64_t j = 0; j < n; ++j) {
                    acc += grow[j] * std::fabs(hik - ph[(bi * n + j) * d + k]);
                  }
                }
              }
              gw[k] += acc;
            }
          });
        }
        if (nh.requires_grad) {
          nh.ensure_grad();
          double* gh = nh.grad.data();
          pool().parallel_for(b * n, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
              const int64_t bi = r / n;
              const int64_t i = r % n;
              const double* hi_ = ph + r * d;
              double* ghrow = gh + r * d;
              for (int64_t j = 0; j < n; ++j) {
                // e_ij and e_ji both involve |h_i - h_j|
                const double gsum = g[(bi * n + i) * n + j] + g[(bi * n + j) * n + i];
                if (gsum == 0.0) continue;
                const double* hj = ph + (bi * n + j) * d;
                for (int64_t k = 0; k < d; ++k) {
                  const double diff = hi_[k] - hj[k];
                  const double sgn = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
                  ghrow[k] += gsum * pw[k] * sgn;
                }
              }
            }
          });
        }
      }));
}

Tensor lift_adjacency(const Tensor& coarse, int ch, int cw, int factor) {
  require(coarse.rank() == 3, ErrKind::Shape, "lift_adjacency: need [b,nc,nc]");
  const int64_t nc = int64_t(ch) * cw;
  require(coarse.extent(1) == nc && coarse.extent(2) == nc, ErrKind::Shape,
          "lift_adjacency: grid " + std::to_string(ch) + "x" + std::to_string(cw) +
              " does not match " + shape_str(coarse.shape()));
  const int64_t b = coarse.extent(0);
  const int64_t fh = int64_t(ch) * factor, fw = int64_t(cw) * factor;
  const int64_t hw = fh * fw;
  const double inv_cell = 1.0 / double(factor * factor);

  // fine pixel -> coarse cell
  std::vector<int64_t> cell(static_cast<size_t>(hw));
  for (int64_t y = 0; y < fh; ++y) {
    for (int64_t x = 0; x < fw; ++x) {
      cell[size_t(y * fw + x)] = (y / factor) * cw + (x / factor);
    }
  }
  auto cell_s = std::make_shared<std::vector<int64_t>>(std::move(cell));

  std::vector<double> out(size_t(b * hw * hw));
  const double* pc = coarse.values().data();
  pool().parallel_for(b * hw, [&](int64_t lo, int64_t hi) {
    const auto& cl = *cell_s;
    for (int64_t r = lo; r < hi; ++r) {
      const int64_t bi = r / hw;
      const int64_t p = r % hw;
      const double* crow = pc + (bi * nc + cl[size_t(p)]) * nc;
      double* orow = out.data() + r * hw;
      for (int64_t q = 0; q < hw; ++q) orow[q] = crow[size_t(cl[size_t(q)])] * inv_cell;
    }
  });

  return Tensor(make_node("lift_adjacency", {b, hw, hw}, std::move(out), {coarse.node()},
                          [b, nc, hw, inv_cell, cell_s](Node& self) {
                            Node& ncn = *self.parents[0];
                            ncn.ensure_grad();
                            const auto& cl = *cell_s;
                            const double* g = self.grad.data();
                            pool().parallel_for(b * nc, [&](int64_t lo, int64_t hi) {
                              for (int64_t r = lo; r < hi; ++r) {
                                const int64_t bi = r / nc;
                                const int64_t a = r % nc;
                                double* grow = ncn.grad.data() + (bi * nc + a) * nc;
                                for (int64_t p = 0; p < hw; ++p) {
                                  if (cl[size_t(p)] != a) continue;
                                  const double* gp = g + (bi * hw + p) * hw;
                                  for (int64_t q = 0; q < hw; ++q) {
                                    grow[size_t(cl[size_t(q)])] += gp[q] * inv_cell;
                                  }
                                }
                              }
                            });
                          }));
}

}  // namespace protoalign
