#pragma once

#include <string>
#include <utility>
#include <vector>

#include "protoalign/params.hpp"
#include "protoalign/rng.hpp"
#include "protoalign/tensor.hpp"

namespace protoalign {

// Learnable pieces of the prototype aligner: one shared attention weight
// vector over feature differences plus the two propagation matrices.
void init_ccpa(int feature_dim, int num_classes, ParameterStore& params, Rng& rng,
               const std::string& prefix = "ccpa");

// Pixel-affinity adjacency from feature differences. Attention scores are
// computed on an avg-pooled grid (factor `downsample`) and the resulting
// row-stochastic matrix is expanded back to the full grid, each fine pixel
// inheriting its parent cell's row split evenly over fine targets.
// f: [n,h,w,d], att_w: [d] -> [n, hw, hw] with hw = h*w.
Tensor graph_attention(const Tensor& f, const Tensor& att_w, int downsample);

// F~ = relu(A F W_F), M~ = relu(A M W_M) with F, M flattened to hw rows.
std::pair<Tensor, Tensor> graph_convolve(const Tensor& adj, const Tensor& f, const Tensor& m,
                                         const Tensor& w_f, const Tensor& w_m);

// Confidence-weighted class prototypes. alpha columns are the per-class
// normalized confidences; a class whose total confidence is below eps is
// flagged absent and its column zeroed (excluded from alignment).
struct PrototypeSet {
  Tensor c;      // [nc, d]
  Tensor alpha;  // [rows, nc]
  std::vector<bool> present;
};
PrototypeSet prototypes(const Tensor& f_tilde, const Tensor& m_tilde);

// beta_k = -(1/pixels) sum m log m over every pixel of the batch, one
// entry per class. 0 log 0 counts as 0.
Tensor entropy_weights(const Tensor& m);

// Margin-hinged interclass term between two domains' prototypes (all
// ordered pairs i != j with both classes present), and the intraclass
// pulling term over classes present in both domains. Both are
// beta-weighted normalized sums with a 1e-12 denominator guard.
Tensor ccpa_intra(const PrototypeSet& ps, const Tensor& beta_s, const PrototypeSet& pt,
                  const Tensor& beta_t);
Tensor ccpa_inter(const PrototypeSet& pa, const Tensor& beta_a, const PrototypeSet& pb,
                  const Tensor& beta_b, double margin);

// L = intra(s,t) + (1/3)(inter(s,s) + inter(s,t) + inter(t,t));
// `no_signal` reports that every pair was excluded (loss identically 0).
Tensor ccpa_loss(const PrototypeSet& ps, const Tensor& beta_s, const PrototypeSet& pt,
                 const Tensor& beta_t, double margin, bool* no_signal = nullptr);

}  // namespace protoalign
