#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "protoalign/gradcheck.hpp"
#include "protoalign/segmenter.hpp"
#include "test_util.hpp"

using namespace protoalign;

namespace {

SegmenterArch toy_arch() {
  SegmenterArch arch;
  arch.blocks = 2;
  arch.channels = 3;
  arch.dilations = {1, 2};
  arch.stride = 2;
  arch.num_classes = 3;
  return arch;
}

Tensor random_onehot(const Shape& shape, Rng& rng) {
  Tensor y = Tensor::zeros(shape);
  auto& v = y.raw();
  const int64_t nc = shape.back();
  for (size_t base = 0; base < v.size(); base += size_t(nc)) {
    v[base + size_t(rng.uniform_int(nc))] = 1.0;
  }
  return y;
}

// Euclidean projection of each pixel's class vector onto the simplex
void project_simplex(std::vector<double>& m, int64_t nc) {
  std::vector<double> u(static_cast<size_t>(nc));
  for (size_t base = 0; base < m.size(); base += size_t(nc)) {
    for (int64_t c = 0; c < nc; ++c) u[size_t(c)] = m[base + size_t(c)];
    std::sort(u.begin(), u.end(), std::greater<>());
    double cssv = 0, theta = 0;
    int64_t rho = 0;
    for (int64_t j = 0; j < nc; ++j) {
      cssv += u[size_t(j)];
      const double t = (cssv - 1.0) / double(j + 1);
      if (u[size_t(j)] - t > 0) {
        rho = j + 1;
        theta = t;
      }
    }
    (void)rho;
    for (int64_t c = 0; c < nc; ++c) {
      m[base + size_t(c)] = std::max(0.0, m[base + size_t(c)] - theta);
    }
  }
}

}  // namespace

TEST_CASE("prediction map is a per-pixel simplex for any input") {
  Rng rng(5);
  SegmenterArch arch = toy_arch();
  ParameterStore params;
  init_segmenter(arch, params, rng);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor img = Tensor::randn({2, 8, 8, 1}, rng, 2.0);
    auto out = segmenter_forward(arch, params, img, SegmenterMode::eval());
    auto v = out.probs.values();
    CHECK(out.probs.shape() == Shape{2, 8, 8, 3});
    for (size_t base = 0; base < v.size(); base += 3) {
      double sum = v[base] + v[base + 1] + v[base + 2];
      CHECK(std::fabs(sum - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("zero head weights give the uniform prediction") {
  Rng rng(6);
  SegmenterArch arch = toy_arch();
  ParameterStore params;
  init_segmenter(arch, params, rng);
  std::fill(params.get("seg/head/w").raw().begin(), params.get("seg/head/w").raw().end(), 0.0);
  std::fill(params.get("seg/head/b").raw().begin(), params.get("seg/head/b").raw().end(), 0.0);
  Tensor img = Tensor::randn({1, 8, 8, 1}, rng);
  auto out = segmenter_forward(arch, params, img, SegmenterMode::eval());
  for (double v : out.probs.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("fixed seed makes features and predictions bit-identical") {
  SegmenterArch arch = toy_arch();
  auto run = [&] {
    Rng rng(7);
    ParameterStore params;
    init_segmenter(arch, params, rng);
    Rng img_rng(123);
    Tensor img = Tensor::randn({2, 8, 8, 1}, img_rng);
    auto out = segmenter_forward(arch, params, img, SegmenterMode::eval());
    std::vector<double> all(out.features.values().begin(), out.features.values().end());
    all.insert(all.end(), out.probs.values().begin(), out.probs.values().end());
    return all;
  };
  CHECK(run() == run());
}

TEST_CASE("seg_loss on a perfect prediction approaches -nc") {
  // one pixel of each class so every Dice term is ~1 and CE is 0
  Tensor y = Tensor::zeros({1, 2, 2, 4});
  for (int p = 0; p < 4; ++p) y.raw()[size_t(p * 4 + p)] = 1.0;
  Tensor m = Tensor::from_data({1, 2, 2, 4}, std::vector<double>(y.values().begin(),
                                                                 y.values().end()));
  CHECK(seg_loss(m, y, 1.0).item() == doctest::Approx(-4.0).epsilon(1e-5));
}

TEST_CASE("seg_loss with eta 0 on the uniform prediction is ln(nc)") {
  Rng rng(8);
  Tensor m = Tensor::full({1, 3, 3, 4}, 0.25);
  Tensor y = random_onehot({1, 3, 3, 4}, rng);
  CHECK(seg_loss(m, y, 0.0).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("seg_loss hand-evaluated single-pixel case") {
  Tensor m = Tensor::from_data({1, 1, 1, 2}, {0.9, 0.1});
  Tensor y = Tensor::from_data({1, 1, 1, 2}, {1.0, 0.0});
  // CE = -ln 0.9, Dice_1 = 1.8/(1.9+eps), Dice_2 = 0/(0.1+eps)
  CHECK(seg_loss(m, y, 1.0).item() == doctest::Approx(-0.8420074).epsilon(1e-6));
}

TEST_CASE("seg_loss rejects eta outside [0,1]") {
  Tensor m = Tensor::full({1, 1, 1, 2}, 0.5);
  Tensor y = Tensor::from_data({1, 1, 1, 2}, {1.0, 0.0});
  CHECK_THROWS_AS(seg_loss(m, y, 2.0), Error);
  try {
    seg_loss(m, y, -0.1);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::Config);
    CHECK(std::string(e.what()).find("eta") != std::string::npos);
  }
}

TEST_CASE("seg_loss never drops below -eta*nc") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t nc = 2 + rng.uniform_int(4);
    Shape shape{1, 1 + rng.uniform_int(4), 1 + rng.uniform_int(4), nc};
    Tensor m = testutil::rand_simplex(shape, rng);
    Tensor y = random_onehot(shape, rng);
    const double eta = rng.uniform();
    CHECK(seg_loss(m, y, eta).item() >= -eta * double(nc) - 1e-12);
  }
}

TEST_CASE("projected gradient descent over the prediction recovers the label") {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    Shape shape{1, 2, 2, 3};
    Tensor y = random_onehot(shape, rng);
    Tensor m = Tensor::full(shape, 1.0 / 3.0, true);
    const double eta = 1.0;
    const double target = seg_loss(Tensor::from_data(shape, std::vector<double>(
                                                                y.values().begin(),
                                                                y.values().end())),
                                   y, eta)
                              .item();
    double loss = 0;
    for (int it = 0; it < 400; ++it) {
      m.zero_grad();
      Tensor l = seg_loss(m, y, eta);
      loss = l.item();
      l.backward();
      auto g = m.grad();
      for (size_t i = 0; i < m.raw().size(); ++i) m.raw()[i] -= 0.05 * g[i];
      project_simplex(m.raw(), 3);
    }
    CHECK(std::fabs(loss - target) <= 1e-3);
  }
}

TEST_CASE("seg_loss gradient through the full segmenter passes the fd check") {
  Rng rng(11);
  SegmenterArch arch = toy_arch();
  ParameterStore params;
  init_segmenter(arch, params, rng);
  Tensor img = Tensor::randn({2, 8, 8, 1}, rng);
  Tensor y = random_onehot({2, 8, 8, 3}, rng);
  SegmenterMode mode;
  mode.training = true;
  mode.dropout = 0.0;  // disabled under grad check
  auto report = grad_check(params, [&] {
    auto out = segmenter_forward(arch, params, img, mode);
    return seg_loss(out.probs, y, 0.7);
  });
  CHECK_MESSAGE(report.max_rel_err <= 1e-4, "worst at ", report.worst);
}
