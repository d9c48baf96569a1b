#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "protoalign/common.hpp"
#include "protoalign/rng.hpp"

namespace protoalign {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One value node of the tape. Graphs are rebuilt from leaves every step;
// tracked values are never mutated in place.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily during backward
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;
  const char* op = "leaf";

  int64_t numel() const { return int64_t(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Value-semantic handle to a node. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t extent(int axis) const { return node_->shape[size_t(axis)]; }
  int rank() const { return int(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  std::span<const double> values() const { return node_->value; }
  // Leaf-only mutation hooks (initialization, optimizer updates, finite
  // difference probes). Interior nodes of a tape are never mutated.
  std::vector<double>& raw() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  double item() const;
  double at(std::initializer_list<int64_t> idx) const;

  // Reverse-mode sweep from this scalar node.
  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// ---- primitive library ----
// All primitives compute exact forward values and accumulate exact
// gradients into every requires_grad input during backward().

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor vabs(const Tensor& a);
Tensor vmax(const Tensor& a, const Tensor& b);  // ties route gradient to a
Tensor max_scalar(const Tensor& a, double c);
Tensor min_scalar(const Tensor& a, double c);
Tensor vexp(const Tensor& a);
Tensor vlog(const Tensor& a);
Tensor vsqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.2);
Tensor softmax(const Tensor& a, int axis);
Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes, bool keepdims = false);
Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes, bool keepdims = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor transpose2d(const Tensor& a);

// matmul supports [m,k]x[k,n], [b,m,k]x[b,k,n] and [b,m,k]x[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// 2-D convolution over NHWC with "same" zero padding.
// x: [n,h,w,ci], w: [kh,kw,ci,co], optional bias [co].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1,
              int dilation = 1);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int dilation = 1);

Tensor upsample_nearest(const Tensor& x, int factor);
Tensor upsample_bilinear(const Tensor& x, int factor);
Tensor avgpool2d(const Tensor& x, int factor);

// Identity forward; backward multiplies the incoming gradient by -scale.
Tensor gradient_reversal(const Tensor& x, double scale);

// Per-channel batch normalization over [n,h,w,c]. In training mode the
// batch statistics are used (and folded into the gradient); otherwise the
// provided running statistics. running_mean/var live outside the tape.
struct BatchNormMode {
  bool training = true;
  bool update_running = true;
  double momentum = 0.1;
  double eps = 1e-5;
};
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, const BatchNormMode& mode);

// Inverted dropout; identity when disabled. Mask order is the flat index
// order of x, drawn from `rng`.
Tensor dropout(const Tensor& x, double ratio, Rng& rng, bool enabled);

// e[b,i,j] = dot(w, |h[b,i,:] - h[b,j,:]|) for h: [b,n,d], w: [d].
Tensor pairwise_absdiff_dot(const Tensor& h, const Tensor& w);

// Expands a coarse row-stochastic adjacency [b,nc,nc] (nc = ch*cw) onto the
// fine grid [b, HW, HW] with H = ch*factor, W = cw*factor: every fine pixel
// inherits its parent cell's row, split evenly over the factor^2 fine
// pixels of each target cell so rows still sum to one.
Tensor lift_adjacency(const Tensor& coarse, int ch, int cw, int factor);

void backward(const Tensor& root);

// Building block for fused module-level ops (e.g. losses with hand-derived
// backward passes). requires_grad of the result follows the parents.
NodePtr make_op_node(const char* op, Shape shape, std::vector<double> value,
                     std::vector<NodePtr> parents, std::function<void(Node&)> backprop);

// Convenience: checks every entry is finite; throws Error(Numeric) naming
// `what` otherwise.
void check_finite(std::span<const double> v, const char* what);

}  // namespace protoalign
