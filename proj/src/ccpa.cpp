#include "protoalign/ccpa.hpp"

#include <cmath>

namespace protoalign {

namespace {

constexpr double kAlphaEps = 1e-12;
constexpr double kDenomEps = 1e-12;
constexpr double kDistFloor = 1e-24;  // keeps sqrt differentiable at coincident prototypes

// X[i,k] / s[k], with gradients into both
Tensor colwise_div(const Tensor& x, const Tensor& s) {
  const int64_t rows = x.extent(0), cols = x.extent(1);
  require(s.rank() == 1 && s.extent(0) == cols, ErrKind::Shape, "colwise_div: bad divisor shape");
  std::vector<double> out(x.values().size());
  const double* px = x.values().data();
  const double* psv = s.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t k = 0; k < cols; ++k) out[size_t(r * cols + k)] = px[r * cols + k] / psv[k];
  }
  return Tensor(make_op_node(
      "colwise_div", x.shape(), std::move(out), {x.node(), s.node()}, [rows, cols](Node& self) {
        Node& nx = *self.parents[0];
        Node& ns = *self.parents[1];
        const double* px = nx.value.data();
        const double* psv = ns.value.data();
        if (nx.requires_grad) {
          nx.ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t k = 0; k < cols; ++k) {
              nx.grad[size_t(r * cols + k)] += self.grad[size_t(r * cols + k)] / psv[k];
            }
          }
        }
        if (ns.requires_grad) {
          ns.ensure_grad();
          for (int64_t k = 0; k < cols; ++k) {
            double acc = 0;
            for (int64_t r = 0; r < rows; ++r) {
              acc -= self.grad[size_t(r * cols + k)] * px[r * cols + k] / (psv[k] * psv[k]);
            }
            ns.grad[size_t(k)] += acc;
          }
        }
      }));
}

Tensor euclidean(const Tensor& a, const Tensor& b) {
  return vsqrt(max_scalar(sum_all(square(sub(a, b))), kDistFloor));
}

}  // namespace

void init_ccpa(int feature_dim, int num_classes, ParameterStore& params, Rng& rng,
               const std::string& prefix) {
  require(feature_dim >= 1 && num_classes >= 2, ErrKind::Config, "ccpa: bad dimensions");
  params.add(prefix + "/att_w",
             Tensor::randn({feature_dim}, rng, 1.0 / std::sqrt(double(feature_dim))));
  params.add(prefix + "/gc_wf",
             Tensor::randn({feature_dim, feature_dim}, rng, 1.0 / std::sqrt(double(feature_dim))));
  params.add(prefix + "/gc_wm",
             Tensor::randn({num_classes, num_classes}, rng, 1.0 / std::sqrt(double(num_classes))));
}

Tensor graph_attention(const Tensor& f, const Tensor& att_w, int downsample) {
  require(f.rank() == 4, ErrKind::Shape, "graph_attention: features must be [n,h,w,d]");
  require(downsample >= 1, ErrKind::Config, "graph_attention: bad downsample");
  const int64_t h = f.extent(1), w = f.extent(2);
  require(h % downsample == 0 && w % downsample == 0, ErrKind::Config,
          "graph_attention: downsample must divide the grid " + shape_str(f.shape()));

  Tensor pooled = downsample == 1 ? f : avgpool2d(f, downsample);
  const int64_t ch = pooled.extent(1), cw = pooled.extent(2);
  Tensor nodes = reshape(pooled, {pooled.extent(0), ch * cw, pooled.extent(3)});
  Tensor scores = leaky_relu(pairwise_absdiff_dot(nodes, att_w), 0.2);
  Tensor coarse = softmax(scores, 2);
  if (downsample == 1) return coarse;
  return lift_adjacency(coarse, int(ch), int(cw), downsample);
}

std::pair<Tensor, Tensor> graph_convolve(const Tensor& adj, const Tensor& f, const Tensor& m,
                                         const Tensor& w_f, const Tensor& w_m) {
  require(adj.rank() == 3 && adj.extent(1) == adj.extent(2), ErrKind::Shape,
          "graph_convolve: adjacency must be [n,hw,hw]");
  require(f.rank() == 4 && m.rank() == 4, ErrKind::Shape, "graph_convolve: f/m must be [n,h,w,c]");
  const int64_t n = f.extent(0), hw = f.extent(1) * f.extent(2);
  require(adj.extent(0) == n && adj.extent(1) == hw, ErrKind::Shape,
          "graph_convolve: adjacency " + shape_str(adj.shape()) + " does not match grid " +
              shape_str(f.shape()));
  Tensor f_flat = reshape(f, {n, hw, f.extent(3)});
  Tensor m_flat = reshape(m, {n, hw, m.extent(3)});
  Tensor f_tilde = relu(matmul(matmul(adj, f_flat), w_f));
  Tensor m_tilde = relu(matmul(matmul(adj, m_flat), w_m));
  return {f_tilde, m_tilde};
}

PrototypeSet prototypes(const Tensor& f_tilde, const Tensor& m_tilde) {
  Tensor f_rows = f_tilde.rank() == 3
                      ? reshape(f_tilde, {f_tilde.extent(0) * f_tilde.extent(1), f_tilde.extent(2)})
                      : f_tilde;
  Tensor m_rows = m_tilde.rank() == 3
                      ? reshape(m_tilde, {m_tilde.extent(0) * m_tilde.extent(1), m_tilde.extent(2)})
                      : m_tilde;
  require(f_rows.rank() == 2 && m_rows.rank() == 2, ErrKind::Shape,
          "prototypes: inputs must be [rows,d] and [rows,nc]");
  require(f_rows.extent(0) == m_rows.extent(0), ErrKind::Shape,
          "prototypes: row counts disagree, " + shape_str(f_rows.shape()) + " vs " +
              shape_str(m_rows.shape()));

  const int64_t rows = m_rows.extent(0), nc = m_rows.extent(1);
  Tensor colsum = reduce_sum(m_rows, {0});  // [nc]

  PrototypeSet out;
  out.present.resize(size_t(nc));
  std::vector<double> mask_vals(size_t(rows * nc));
  for (int64_t k = 0; k < nc; ++k) {
    const bool present = colsum.values()[size_t(k)] >= kAlphaEps;
    out.present[size_t(k)] = present;
    for (int64_t r = 0; r < rows; ++r) mask_vals[size_t(r * nc + k)] = present ? 1.0 : 0.0;
  }
  Tensor mask = Tensor::from_data({rows, nc}, std::move(mask_vals));
  out.alpha = mul(colwise_div(m_rows, add_scalar(colsum, kAlphaEps)), mask);
  out.c = matmul(transpose2d(out.alpha), f_rows);
  return out;
}

Tensor entropy_weights(const Tensor& m) {
  require(m.rank() == 4, ErrKind::Shape, "entropy_weights: need [n,h,w,nc]");
  const double pixels = double(m.extent(0) * m.extent(1) * m.extent(2));
  Tensor plogp = mul(m, vlog(max_scalar(m, 1e-12)));
  return mul_scalar(reduce_sum(plogp, {0, 1, 2}), -1.0 / pixels);
}

namespace {

struct PairAccum {
  Tensor num = Tensor::scalar(0.0);
  Tensor den = Tensor::scalar(0.0);
  bool any = false;

  void accumulate(const Tensor& weight, const Tensor& term) {
    num = add(num, mul(weight, term));
    den = add(den, weight);
    any = true;
  }

  Tensor normalized() const { return divide(num, add_scalar(den, kDenomEps)); }
};

}  // namespace

Tensor ccpa_intra(const PrototypeSet& ps, const Tensor& beta_s, const PrototypeSet& pt,
                  const Tensor& beta_t) {
  const int64_t nc = ps.c.extent(0);
  require(pt.c.extent(0) == nc && pt.c.extent(1) == ps.c.extent(1), ErrKind::Shape,
          "ccpa: prototype shapes disagree across domains");
  PairAccum acc;
  for (int64_t k = 0; k < nc; ++k) {
    if (!ps.present[size_t(k)] || !pt.present[size_t(k)]) continue;
    Tensor w = mul(slice(beta_s, 0, k, 1), slice(beta_t, 0, k, 1));
    Tensor dist = euclidean(slice(ps.c, 0, k, 1), slice(pt.c, 0, k, 1));
    acc.accumulate(w, dist);
  }
  return acc.normalized();
}

Tensor ccpa_inter(const PrototypeSet& pa, const Tensor& beta_a, const PrototypeSet& pb,
                  const Tensor& beta_b, double margin) {
  const int64_t nc = pa.c.extent(0);
  PairAccum acc;
  for (int64_t i = 0; i < nc; ++i) {
    if (!pa.present[size_t(i)]) continue;
    for (int64_t j = 0; j < nc; ++j) {
      if (i == j || !pb.present[size_t(j)]) continue;
      Tensor w = mul(slice(beta_a, 0, i, 1), slice(beta_b, 0, j, 1));
      Tensor dist = euclidean(slice(pa.c, 0, i, 1), slice(pb.c, 0, j, 1));
      acc.accumulate(w, relu(add_scalar(neg(dist), margin)));
    }
  }
  return acc.normalized();
}

Tensor ccpa_loss(const PrototypeSet& ps, const Tensor& beta_s, const PrototypeSet& pt,
                 const Tensor& beta_t, double margin, bool* no_signal) {
  require(margin >= 0, ErrKind::Config, "ccpa: margin must be nonnegative");
  bool any_pair = false;
  for (size_t k = 0; k < ps.present.size(); ++k) {
    any_pair = any_pair || (ps.present[k] && pt.present[k]);
  }
  int present_s = 0, present_t = 0;
  for (bool p : ps.present) present_s += p;
  for (bool p : pt.present) present_t += p;
  any_pair = any_pair || present_s > 1 || present_t > 1 || (present_s >= 1 && present_t >= 1);
  if (no_signal) *no_signal = !any_pair;

  Tensor intra = ccpa_intra(ps, beta_s, pt, beta_t);
  Tensor inter = add(add(ccpa_inter(ps, beta_s, ps, beta_s, margin),
                         ccpa_inter(ps, beta_s, pt, beta_t, margin)),
                     ccpa_inter(pt, beta_t, pt, beta_t, margin));
  return add(intra, mul_scalar(inter, 1.0 / 3.0));
}

}  // namespace protoalign
