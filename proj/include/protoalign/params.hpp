#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "protoalign/tensor.hpp"

namespace protoalign {

// Named map of persistent leaf tensors. Trainable entries require grad;
// buffers (batch-norm running statistics, frozen random projections) do
// not. Iteration order is the lexicographic name order, which fixes the
// optimizer update order.
class ParameterStore {
 public:
  struct Entry {
    Tensor tensor;
    bool trainable = true;
  };

  Tensor add(const std::string& name, Tensor t, bool trainable = true);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  void zero_grads();

  using Snapshot = std::map<std::string, std::vector<double>>;
  Snapshot snapshot() const;          // values only, bit-exact
  void restore(const Snapshot& s);    // shapes must match

  // Checkpoint directory: one NTSR file per entry plus manifest.json with
  // names, shapes, trainable flags and caller-provided metadata.
  void save(const std::string& dir, const std::string& meta_json) const;
  static ParameterStore load(const std::string& dir, std::string* meta_json_out = nullptr);

 private:
  std::map<std::string, Entry> entries_;
};

// Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8. Moments are
// keyed by parameter name and persist across steps.
class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t step_count() const { return t_; }

  // Applies one update to every trainable parameter selected by `filter`
  // (all when empty), then clears their gradients. A selected parameter
  // without a gradient is an error naming it.
  void step(ParameterStore& params,
            const std::function<bool(const std::string&)>& filter = nullptr);

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

}  // namespace protoalign
