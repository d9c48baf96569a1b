#pragma once

#include <string>
#include <vector>

#include "protoalign/params.hpp"
#include "protoalign/rng.hpp"
#include "protoalign/tensor.hpp"

namespace protoalign {

// Toy dilated residual segmenter. A short strided stem brings the image
// to the working grid; every residual block then runs at that one grid
// with its own dilation, and the per-block outputs are concatenated into
// the feature map. The mask head predicts class logits on the working
// grid which are bilinearly upsampled back to image resolution before the
// softmax.
struct SegmenterArch {
  int blocks = 4;
  int channels = 8;
  std::vector<int> dilations = {1, 1, 2, 4};
  int stride = 4;  // image -> feature grid downsample; 1, 2, 4 or 8
  int num_classes = 5;

  int feature_dim() const { return blocks * channels; }
  void validate() const;
};

struct SegmenterMode {
  bool training = true;
  bool frozen_stats = false;  // normalize with running statistics anyway
  double dropout = 0.1;
  Rng* dropout_rng = nullptr;  // required when training and dropout > 0

  static SegmenterMode eval() { return {false, true, 0.0, nullptr}; }
};

struct SegmenterOut {
  Tensor features;      // [n, h/s, w/s, d]
  Tensor logits;        // [n, h/s, w/s, nc]
  Tensor probs_coarse;  // softmax(logits), working-grid prediction map
  Tensor probs;         // [n, h, w, nc] full-resolution prediction map
};

// Registers all weights/biases/bn parameters under `prefix`. He-style
// fan-in initialization from `rng` in a fixed draw order.
void init_segmenter(const SegmenterArch& arch, ParameterStore& params, Rng& rng,
                    const std::string& prefix = "seg");

SegmenterOut segmenter_forward(const SegmenterArch& arch, const ParameterStore& params,
                               const Tensor& images, const SegmenterMode& mode,
                               const std::string& prefix = "seg");

// Hybrid supervised loss, averaged over the batch: pixelwise cross
// entropy minus eta times the per-class soft Dice overlap. Each Dice
// fraction carries a 1e-6 denominator guard so a class absent from both
// masks contributes ~0 instead of 0/0.
Tensor seg_loss(const Tensor& probs, const Tensor& onehot, double eta);

}  // namespace protoalign
