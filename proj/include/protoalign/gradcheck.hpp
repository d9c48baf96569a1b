#pragma once

#include <functional>
#include <string>
#include <vector>

#include "protoalign/params.hpp"
#include "protoalign/tensor.hpp"

namespace protoalign {

// A builder recreates the scalar graph from the same leaf tensors on every
// call; finite differencing perturbs the leaves between calls.
using GraphBuilder = std::function<Tensor()>;

struct GradCheckOptions {
  double step = 1e-5;
  // expected analytic gradient = factor * central difference, per leaf;
  // used to fold a gradient-reversal scale back in (factor = -scale for
  // leaves that feed the reversed branch). Defaults to 1 for all leaves.
  std::vector<double> factors;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "<leaf index>[<coordinate>]"
};

// Central finite differences, step 1e-5, against the analytic gradients
// from one backward() sweep. Relative error uses the guard
// |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check(std::vector<Tensor> leaves, const GraphBuilder& builder,
                           const GradCheckOptions& opts = {});

// Convenience over the trainable entries of a store, in name order.
GradCheckReport grad_check(ParameterStore& params, const GraphBuilder& builder,
                           const GradCheckOptions& opts = {});

// ---- project-wide check suite (used by the `gradcheck` CLI verb) ----

struct SuiteEntry {
  std::string name;
  double max_rel_err;
  double tolerance;
  bool pass;
};

// Exercises every loss on small shapes: the supervised hybrid loss through
// the full segmenter, the conditional adversarial loss (with the reversal
// scale folded analytically), the prototype-alignment loss through
// attention/convolution/prototypes/entropy weights, and the composite
// objective. Entries also cover the exactness sanity check on a linear
// graph.
std::vector<SuiteEntry> gradcheck_suite(double tolerance);

}  // namespace protoalign
