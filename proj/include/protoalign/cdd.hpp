#pragma once

#include <cstdint>
#include <string>

#include "protoalign/params.hpp"
#include "protoalign/rng.hpp"
#include "protoalign/tensor.hpp"

namespace protoalign {

// Frozen random projections used to fuse features with predictions. Drawn
// once at construction (standard Gaussian, unit variance) and never
// updated; checkpoints persist both matrices plus the seed.
struct RandomizedMap {
  Tensor r_f;  // [d, d_o]
  Tensor r_m;  // [nc, d_o]
  int d_o = 16;
  uint64_t seed = 0;
};

// Validates d_o << d*nc (strictly smaller keeps the fused tensor compact).
RandomizedMap make_randomized_map(int d, int nc, int d_o, uint64_t seed);

void save_randomized_map(const RandomizedMap& rm, ParameterStore& params,
                         const std::string& prefix = "cdd");
RandomizedMap load_randomized_map(const ParameterStore& params, uint64_t seed,
                                  const std::string& prefix = "cdd");

// J = (1/sqrt(d_o)) (F R_F) ⊙ (M R_M), applied per pixel.
// f: [n,h,w,d], m: [n,h,w,nc] -> [n,h,w,d_o].
Tensor multilinear_map(const Tensor& f, const Tensor& m, const RandomizedMap& rm);

// Small residual conv net over the fused tensor; one probability per
// image via spatial mean pooling and a sigmoid.
struct DiscriminatorArch {
  int width = 8;
  int blocks = 1;
};

void init_discriminator(const DiscriminatorArch& arch, int d_o, ParameterStore& params, Rng& rng,
                        const std::string& prefix = "disc");

// [n,h,w,d_o] -> [n] probabilities in (0,1)
Tensor discriminator_forward(const DiscriminatorArch& arch, const ParameterStore& params,
                             const Tensor& fused, const std::string& prefix = "disc");

// Binary cross entropy of the domain discriminator, source labeled 1 and
// target labeled 0. Both fused inputs pass through a gradient reversal of
// the given scale before the discriminator, so minimizing this loss
// trains the discriminator while pushing the upstream features toward
// domain confusion. Outputs are clamped to [1e-7, 1-1e-7] before the log;
// `saturated` (optional) counts clamped probabilities.
Tensor cdd_loss(const Tensor& fused_src, const Tensor& fused_tgt, const DiscriminatorArch& arch,
                const ParameterStore& params, double grl_scale, int* saturated = nullptr,
                const std::string& prefix = "disc");

}  // namespace protoalign
