#include "protoalign/cdd.hpp"

#include <cmath>

namespace protoalign {

RandomizedMap make_randomized_map(int d, int nc, int d_o, uint64_t seed) {
  require(d >= 1 && nc >= 1 && d_o >= 1, ErrKind::Config, "randomized map: bad dimensions");
  require(d_o < d * nc, ErrKind::Config,
          "randomized map: d_o (" + std::to_string(d_o) + ") must be smaller than d*nc (" +
              std::to_string(d * nc) + ")");
  Rng rng = Rng::stream(seed, "randomized-map");
  RandomizedMap rm;
  rm.d_o = d_o;
  rm.seed = seed;
  rm.r_f = Tensor::randn({d, d_o}, rng);
  rm.r_m = Tensor::randn({nc, d_o}, rng);
  return rm;
}

void save_randomized_map(const RandomizedMap& rm, ParameterStore& params,
                         const std::string& prefix) {
  params.add(prefix + "/rmap_f", rm.r_f, false);
  params.add(prefix + "/rmap_m", rm.r_m, false);
}

RandomizedMap load_randomized_map(const ParameterStore& params, uint64_t seed,
                                  const std::string& prefix) {
  RandomizedMap rm;
  rm.r_f = params.get(prefix + "/rmap_f");
  rm.r_m = params.get(prefix + "/rmap_m");
  rm.d_o = int(rm.r_f.extent(1));
  rm.seed = seed;
  require(rm.r_m.extent(1) == rm.d_o, ErrKind::Shape, "randomized map: stored shapes disagree");
  return rm;
}

Tensor multilinear_map(const Tensor& f, const Tensor& m, const RandomizedMap& rm) {
  require(f.rank() == 4 && m.rank() == 4, ErrKind::Config,
          "multilinear map: inputs must be [n,h,w,c]");
  require(f.extent(0) == m.extent(0) && f.extent(1) == m.extent(1) && f.extent(2) == m.extent(2),
          ErrKind::Config, "multilinear map: spatial shapes disagree, " + shape_str(f.shape()) +
                               " vs " + shape_str(m.shape()));
  require(rm.r_f.extent(0) == f.extent(3), ErrKind::Config,
          "multilinear map: feature dim " + std::to_string(f.extent(3)) +
              " does not match projection " + shape_str(rm.r_f.shape()));
  require(rm.r_m.extent(0) == m.extent(3), ErrKind::Config,
          "multilinear map: class dim " + std::to_string(m.extent(3)) +
              " does not match projection " + shape_str(rm.r_m.shape()));

  const int64_t n = f.extent(0), h = f.extent(1), w = f.extent(2);
  const int64_t rows = n * h * w;
  const int64_t d_o = rm.d_o;
  Tensor pf = matmul(reshape(f, {rows, f.extent(3)}), rm.r_f);
  Tensor pm = matmul(reshape(m, {rows, m.extent(3)}), rm.r_m);
  Tensor fused = mul_scalar(mul(pf, pm), 1.0 / std::sqrt(double(d_o)));
  return reshape(fused, {n, h, w, d_o});
}

void init_discriminator(const DiscriminatorArch& arch, int d_o, ParameterStore& params, Rng& rng,
                        const std::string& prefix) {
  require(arch.width >= 1 && arch.blocks >= 0, ErrKind::Config, "discriminator: bad arch");
  auto he = [&rng](Shape shape) {
    const double fan_in = double(shape[0] * shape[1] * shape[2]);
    return Tensor::randn(shape, rng, std::sqrt(2.0 / fan_in));
  };
  const int64_t wdt = arch.width;
  params.add(prefix + "/stem/w", he({3, 3, d_o, wdt}));
  params.add(prefix + "/stem/b", Tensor::zeros({wdt}));
  for (int b = 0; b < arch.blocks; ++b) {
    const std::string base = prefix + "/block" + std::to_string(b);
    params.add(base + "/conv1/w", he({3, 3, wdt, wdt}));
    params.add(base + "/conv1/b", Tensor::zeros({wdt}));
    params.add(base + "/conv2/w", he({3, 3, wdt, wdt}));
    params.add(base + "/conv2/b", Tensor::zeros({wdt}));
  }
  params.add(prefix + "/head/w", he({1, 1, wdt, 1}));
  params.add(prefix + "/head/b", Tensor::zeros({1}));
}

Tensor discriminator_forward(const DiscriminatorArch& arch, const ParameterStore& params,
                             const Tensor& fused, const std::string& prefix) {
  require(fused.rank() == 4, ErrKind::Shape, "discriminator: input must be [n,h,w,c]");
  const double slope = 0.2;
  Tensor x = leaky_relu(
      conv2d(fused, params.get(prefix + "/stem/w"), params.get(prefix + "/stem/b"), 2, 1), slope);
  for (int b = 0; b < arch.blocks; ++b) {
    const std::string base = prefix + "/block" + std::to_string(b);
    Tensor h = leaky_relu(
        conv2d(x, params.get(base + "/conv1/w"), params.get(base + "/conv1/b"), 1, 1), slope);
    h = conv2d(h, params.get(base + "/conv2/w"), params.get(base + "/conv2/b"), 1, 1);
    x = leaky_relu(add(x, h), slope);
  }
  Tensor logits = conv2d(x, params.get(prefix + "/head/w"), params.get(prefix + "/head/b"), 1, 1);
  Tensor pooled = reduce_mean(logits, {1, 2, 3});  // [n]
  // sigmoid
  return divide(Tensor::full(pooled.shape(), 1.0), add_scalar(vexp(neg(pooled)), 1.0));
}

namespace {

Tensor clamp_probs(const Tensor& p, int* saturated) {
  const double lo = 1e-7, hi = 1.0 - 1e-7;
  if (saturated) {
    for (double v : p.values()) {
      if (v < lo || v > hi) ++*saturated;
    }
  }
  return min_scalar(max_scalar(p, lo), hi);
}

}  // namespace

Tensor cdd_loss(const Tensor& fused_src, const Tensor& fused_tgt, const DiscriminatorArch& arch,
                const ParameterStore& params, double grl_scale, int* saturated,
                const std::string& prefix) {
  Tensor d_src =
      clamp_probs(discriminator_forward(arch, params, gradient_reversal(fused_src, grl_scale),
                                        prefix),
                  saturated);
  Tensor d_tgt =
      clamp_probs(discriminator_forward(arch, params, gradient_reversal(fused_tgt, grl_scale),
                                        prefix),
                  saturated);
  Tensor src_term = neg(mean_all(vlog(d_src)));
  Tensor tgt_term = neg(mean_all(vlog(sub(Tensor::full(d_tgt.shape(), 1.0), d_tgt))));
  return add(src_term, tgt_term);
}

}  // namespace protoalign
