#include "protoalign/segmenter.hpp"

#include <cmath>

namespace protoalign {

void SegmenterArch::validate() const {
  require(blocks >= 1 && channels >= 1, ErrKind::Config, "arch: blocks/channels must be >= 1");
  require(int(dilations.size()) == blocks, ErrKind::Config,
          "arch: need one dilation per block, got " + std::to_string(dilations.size()) +
              " for " + std::to_string(blocks) + " blocks");
  for (int d : dilations)
    require(d >= 1, ErrKind::Config, "arch: dilations must be >= 1");
  require(stride == 1 || stride == 2 || stride == 4 || stride == 8, ErrKind::Config,
          "arch: stride must be 1, 2, 4 or 8");
  require(num_classes >= 2, ErrKind::Config, "arch: need at least 2 classes");
}

namespace {

int stem_layers(int stride) {
  int n = 0;
  while (stride > 1) {
    stride /= 2;
    ++n;
  }
  return n;
}

Tensor he_conv(Shape shape, Rng& rng) {
  // fan_in = kh*kw*ci
  const double fan_in = double(shape[0] * shape[1] * shape[2]);
  return Tensor::randn(shape, rng, std::sqrt(2.0 / fan_in));
}

// no conv bias: the following batch norm would cancel it anyway
void add_conv_bn(ParameterStore& params, Rng& rng, const std::string& base, int64_t kh,
                 int64_t kw, int64_t ci, int64_t co) {
  params.add(base + "/w", he_conv({kh, kw, ci, co}, rng));
  params.add(base + "/bn_g", Tensor::full({co}, 1.0));
  params.add(base + "/bn_b", Tensor::zeros({co}));
  params.add(base + "/bn_rm", Tensor::zeros({co}), false);
  params.add(base + "/bn_rv", Tensor::full({co}, 1.0), false);
}

struct Ctx {
  const ParameterStore& params;
  const SegmenterMode& mode;
};

Tensor conv_bn(const Ctx& ctx, const std::string& base, const Tensor& x, int stride,
               int dilation) {
  Tensor y = conv2d(x, ctx.params.get(base + "/w"), stride, dilation);
  BatchNormMode bn;
  bn.training = ctx.mode.training && !ctx.mode.frozen_stats;
  bn.update_running = ctx.mode.training && !ctx.mode.frozen_stats;
  return batch_norm(y, ctx.params.get(base + "/bn_g"), ctx.params.get(base + "/bn_b"),
                    ctx.params.get(base + "/bn_rm"), ctx.params.get(base + "/bn_rv"), bn);
}

Tensor maybe_dropout(const Ctx& ctx, const Tensor& x) {
  if (!ctx.mode.training || ctx.mode.dropout <= 0.0) return x;
  require(ctx.mode.dropout_rng != nullptr, ErrKind::State,
          "segmenter: training with dropout requires a dropout rng");
  return dropout(x, ctx.mode.dropout, *ctx.mode.dropout_rng, true);
}

}  // namespace

void init_segmenter(const SegmenterArch& arch, ParameterStore& params, Rng& rng,
                    const std::string& prefix) {
  arch.validate();
  const int64_t ch = arch.channels;
  int64_t ci = 1;
  for (int s = 0; s < stem_layers(arch.stride); ++s) {
    add_conv_bn(params, rng, prefix + "/stem" + std::to_string(s), 3, 3, ci, ch);
    ci = ch;
  }
  if (stem_layers(arch.stride) == 0) {
    add_conv_bn(params, rng, prefix + "/stem0", 3, 3, 1, ch);
  }
  for (int b = 0; b < arch.blocks; ++b) {
    const std::string base = prefix + "/block" + std::to_string(b);
    add_conv_bn(params, rng, base + "/conv1", 3, 3, ch, ch);
    add_conv_bn(params, rng, base + "/conv2", 3, 3, ch, ch);
  }
  params.add(prefix + "/head/w", he_conv({1, 1, arch.feature_dim(), arch.num_classes}, rng));
  params.add(prefix + "/head/b", Tensor::zeros({arch.num_classes}));
}

SegmenterOut segmenter_forward(const SegmenterArch& arch, const ParameterStore& params,
                               const Tensor& images, const SegmenterMode& mode,
                               const std::string& prefix) {
  arch.validate();
  require(images.rank() == 4 && images.extent(3) == 1, ErrKind::Shape,
          "segmenter: images must be [n,h,w,1], got " + shape_str(images.shape()));
  require(images.extent(1) % arch.stride == 0 && images.extent(2) % arch.stride == 0,
          ErrKind::Config, "segmenter: stride must divide the image extents");
  check_finite(images.values(), "segmenter input");

  Ctx ctx{params, mode};
  Tensor x = images;
  const int nstem = stem_layers(arch.stride);
  if (nstem == 0) {
    x = relu(conv_bn(ctx, prefix + "/stem0", x, 1, 1));
  } else {
    for (int s = 0; s < nstem; ++s) {
      x = relu(conv_bn(ctx, prefix + "/stem" + std::to_string(s), x, 2, 1));
    }
  }

  std::vector<Tensor> block_outs;
  block_outs.reserve(size_t(arch.blocks));
  for (int b = 0; b < arch.blocks; ++b) {
    const std::string base = prefix + "/block" + std::to_string(b);
    const int dil = arch.dilations[size_t(b)];
    Tensor h = relu(conv_bn(ctx, base + "/conv1", x, 1, dil));
    h = maybe_dropout(ctx, h);
    h = conv_bn(ctx, base + "/conv2", h, 1, dil);
    x = relu(add(x, h));
    block_outs.push_back(x);
  }

  SegmenterOut out;
  out.features = arch.blocks == 1 ? block_outs[0] : concat(block_outs, 3);
  out.logits =
      conv2d(out.features, params.get(prefix + "/head/w"), params.get(prefix + "/head/b"), 1, 1);
  out.probs_coarse = softmax(out.logits, 3);
  Tensor up = arch.stride == 1 ? out.logits : upsample_bilinear(out.logits, arch.stride);
  out.probs = softmax(up, 3);
  return out;
}

Tensor seg_loss(const Tensor& probs, const Tensor& onehot, double eta) {
  require(eta >= 0.0 && eta <= 1.0, ErrKind::Config,
          "eta: must lie in [0,1], got " + std::to_string(eta));
  require(probs.rank() == 4, ErrKind::Shape, "seg_loss: probs must be [n,h,w,c]");
  require(probs.shape() == onehot.shape(), ErrKind::Shape,
          "seg_loss: shape mismatch " + shape_str(probs.shape()) + " vs " +
              shape_str(onehot.shape()));

  const int64_t n = probs.extent(0), h = probs.extent(1), w = probs.extent(2),
                nc = probs.extent(3);
  const int64_t hw = h * w;
  const double eps = 1e-6;
  const double tiny = 1e-300;  // log guard; simplex entries are positive anyway

  const double* pm = probs.values().data();
  const double* py = onehot.values().data();

  // per-sample CE and per-sample/class Dice sums
  std::vector<double> num(size_t(n * nc), 0.0), den(size_t(n * nc), 0.0);
  double total = 0.0;
  for (int64_t b = 0; b < n; ++b) {
    double ce = 0.0;
    double* nb = num.data() + b * nc;
    double* db = den.data() + b * nc;
    const double* mb = pm + b * hw * nc;
    const double* yb = py + b * hw * nc;
    for (int64_t p = 0; p < hw; ++p) {
      for (int64_t c = 0; c < nc; ++c) {
        const double m = mb[p * nc + c];
        const double y = yb[p * nc + c];
        if (y != 0.0) ce -= y * std::log(m > tiny ? m : tiny);
        nb[c] += 2.0 * y * m;
        db[c] += y + m;
      }
    }
    double dice_sum = 0.0;
    for (int64_t c = 0; c < nc; ++c) dice_sum += nb[c] / (db[c] + eps);
    total += ce / double(hw) - eta * dice_sum;
  }
  total /= double(n);

  auto num_s = std::make_shared<std::vector<double>>(std::move(num));
  auto den_s = std::make_shared<std::vector<double>>(std::move(den));
  return Tensor(make_op_node(
      "seg_loss", {1}, {total}, {probs.node(), onehot.node()},
      [n, hw, nc, eta, eps, tiny, num_s, den_s](Node& self) {
        Node& nm = *self.parents[0];
        if (!nm.requires_grad) return;
        nm.ensure_grad();
        const double g = self.grad[0] / double(n);
        const double* pm = nm.value.data();
        const double* py = self.parents[1]->value.data();
        for (int64_t b = 0; b < n; ++b) {
          const double* nb = num_s->data() + b * nc;
          const double* db = den_s->data() + b * nc;
          const double* mb = pm + b * hw * nc;
          const double* yb = py + b * hw * nc;
          double* gm = nm.grad.data() + b * hw * nc;
          for (int64_t p = 0; p < hw; ++p) {
            for (int64_t c = 0; c < nc; ++c) {
              const double m = mb[p * nc + c];
              const double y = yb[p * nc + c];
              double d = 0.0;
              if (y != 0.0) d -= y / (m > tiny ? m : tiny) / double(hw);
              const double dd = db[c] + eps;
              d -= eta * (2.0 * y * dd - nb[c]) / (dd * dd);
              gm[p * nc + c] += g * d;
            }
          }
        }
      }));
}

}  // namespace protoalign
