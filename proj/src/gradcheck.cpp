#include "protoalign/gradcheck.hpp"

#include <cmath>

namespace protoalign {

GradCheckReport grad_check(std::vector<Tensor> leaves, const GraphBuilder& builder,
                           const GradCheckOptions& opts) {
  require(!leaves.empty(), ErrKind::State, "grad_check: no leaves");
  require(opts.factors.empty() || opts.factors.size() == leaves.size(), ErrKind::State,
          "grad_check: factor count mismatch");

  for (auto& l : leaves) {
    l.zero_grad();
    check_finite(l.values(), "grad_check leaf");
  }
  Tensor root = builder();
  require(root.numel() == 1, ErrKind::State, "grad_check: graph must be scalar-valued");
  root.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves) {
    if (l.has_grad()) {
      analytic.emplace_back(l.grad().begin(), l.grad().end());
    } else {
      analytic.emplace_back(l.values().size(), 0.0);
    }
  }

  GradCheckReport report;
  const double h = opts.step;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& vals = leaves[li].raw();
    const double factor = opts.factors.empty() ? 1.0 : opts.factors[li];
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = builder().item();
      vals[i] = orig - h;
      const double fm = builder().item();
      vals[i] = orig;
      const double numeric = factor * (fp - fm) / (2.0 * h);
      if (!std::isfinite(numeric)) {
        fail(ErrKind::Numeric, "grad_check: non-finite numeric estimate at leaf " +
                                   std::to_string(li) + "[" + std::to_string(i) + "]");
      }
      const double a = analytic[li][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = std::to_string(li) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

GradCheckReport grad_check(ParameterStore& params, const GraphBuilder& builder,
                           const GradCheckOptions& opts) {
  std::vector<Tensor> leaves;
  for (auto& [name, e] : params.entries()) {
    if (e.trainable) leaves.push_back(e.tensor);
  }
  return grad_check(std::move(leaves), builder, opts);
}

}  // namespace protoalign
