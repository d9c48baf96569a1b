#pragma once

#include <vector>

#include "protoalign/rng.hpp"
#include "protoalign/tensor.hpp"

namespace testutil {

using protoalign::Rng;
using protoalign::Shape;
using protoalign::Tensor;

// values bounded away from zero (and hence from relu/abs/max kinks)
inline Tensor rand_away_from_kinks(const Shape& shape, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (auto& v : t.raw()) {
    double mag = 0.1 + 1.9 * rng.uniform();
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

inline Tensor rand_positive(const Shape& shape, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (auto& v : t.raw()) v = 0.1 + 2.9 * rng.uniform();
  return t;
}

inline Tensor rand_normal(const Shape& shape, Rng& rng, double stddev = 1.0,
                          bool requires_grad = true) {
  return Tensor::randn(shape, rng, stddev, requires_grad);
}

// random per-pixel simplex over the last axis
inline Tensor rand_simplex(const Shape& shape, Rng& rng, bool requires_grad = false) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  auto& v = t.raw();
  const int64_t lane = shape.back();
  for (size_t base = 0; base < v.size(); base += size_t(lane)) {
    double sum = 0;
    for (int64_t c = 0; c < lane; ++c) {
      v[base + size_t(c)] = 0.05 + rng.uniform();
      sum += v[base + size_t(c)];
    }
    for (int64_t c = 0; c < lane; ++c) v[base + size_t(c)] /= sum;
  }
  return t;
}

}  // namespace testutil
