#include <doctest.h>

#include <cmath>
#include <vector>

#include "protoalign/gradcheck.hpp"
#include "protoalign/tensor.hpp"
#include "protoalign/threadpool.hpp"
#include "test_util.hpp"

using namespace protoalign;
using testutil::rand_away_from_kinks;
using testutil::rand_normal;
using testutil::rand_positive;

namespace {

void expect_fd(std::vector<Tensor> leaves, const GraphBuilder& builder, double tol = 1e-4,
               std::vector<double> factors = {}) {
  GradCheckOptions opts;
  opts.factors = std::move(factors);
  auto report = grad_check(std::move(leaves), builder, opts);
  CHECK_MESSAGE(report.max_rel_err <= tol, "worst at ", report.worst, " rel err ",
                report.max_rel_err);
}

}  // namespace

TEST_CASE("softmax of a constant lane is uniform") {
  Tensor x = Tensor::from_data({4}, {0, 0, 0, 0});
  Tensor y = softmax(x, 0);
  for (int i = 0; i < 4; ++i) CHECK(y.values()[size_t(i)] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax lanes are nonnegative and sum to one") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = rand_normal({3, 5, 4}, rng, 3.0, false);
    Tensor y = softmax(x, 2);
    auto v = y.values();
    for (size_t base = 0; base < v.size(); base += 4) {
      double sum = 0;
      for (int c = 0; c < 4; ++c) {
        CHECK(v[base + size_t(c)] >= 0.0);
        sum += v[base + size_t(c)];
      }
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("leaky relu default slope") {
  Tensor x = Tensor::from_data({2}, {-1.0, 2.0});
  Tensor y = leaky_relu(x);
  CHECK(y.values()[0] == doctest::Approx(-0.2));
  CHECK(y.values()[1] == doctest::Approx(2.0));
}

TEST_CASE("gradient of sum(x*x)") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor loss = sum_all(mul(x, x));
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-10));
  CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-10));
  // matches the finite-difference oracle as well
  expect_fd({x}, [&] { return sum_all(mul(x, x)); }, 1e-7);
}

TEST_CASE("gradient reversal") {
  SUBCASE("forward is bit-identical") {
    Tensor x = Tensor::from_data({2}, {1.5, -2.0}, true);
    Tensor y = gradient_reversal(x, 1.0);
    CHECK(y.values()[0] == 1.5);
    CHECK(y.values()[1] == -2.0);
  }
  SUBCASE("backward negates ones") {
    Tensor x = Tensor::from_data({3}, {0.3, -0.7, 2.0}, true);
    sum_all(gradient_reversal(x, 1.0)).backward();
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[size_t(i)] == doctest::Approx(-1.0));
  }
  SUBCASE("scale 0.5 against finite differences of the unreversed graph") {
    Rng rng(3);
    Tensor x = rand_away_from_kinks({4}, rng);
    // composite graph: FD sees the identity forward, so the analytic
    // gradient must equal -0.5 times the numeric one
    expect_fd({x}, [&] { return sum_all(square(gradient_reversal(x, 0.5))); }, 1e-6, {-0.5});
  }
}

TEST_CASE("grad_check is exact on a linear graph") {
  Tensor x = Tensor::from_data({3}, {0.5, -1.5, 2.0}, true);
  auto report = grad_check({x}, [&] {
    Tensor w = Tensor::from_data({3}, {2.0, -1.0, 0.25});
    return sum_all(mul(x, w));
  });
  CHECK(report.max_rel_err <= 1e-10);
}

TEST_CASE("shape errors name the primitive and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_WITH_AS(add(a, b), "add: shape mismatch [2,3] vs [3,2]", Error);
  Tensor m = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(matmul(a, m), Error);
  try {
    matmul(a, m);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::Shape);
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("log rejects non-positive input") {
  Tensor x = Tensor::from_data({2}, {1.0, 0.0});
  CHECK_THROWS_AS(vlog(x), Error);
}

TEST_CASE("every primitive matches central finite differences") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    Rng rng(seed * 7919 + 11);

    // elementwise binary ops
    {
      Tensor a = rand_away_from_kinks({2, 5}, rng);
      Tensor b = rand_away_from_kinks({2, 5}, rng);
      expect_fd({a, b}, [&] { return sum_all(mul(add(a, b), sub(a, b))); });
      expect_fd({a, b}, [&] { return sum_all(divide(a, b)); });
      // keep |a| and |b| apart so vmax ties cannot flip under the probe
      Tensor c = Tensor::zeros({2, 5}, true);
      for (size_t i = 0; i < c.raw().size(); ++i) c.raw()[i] = b.values()[i] + 0.35;
      expect_fd({a, c}, [&] { return sum_all(vmax(a, c)); });
    }
    // elementwise unary ops
    {
      Tensor a = rand_away_from_kinks({3, 4}, rng);
      expect_fd({a}, [&] { return sum_all(vabs(a)); });
      expect_fd({a}, [&] { return sum_all(relu(a)); });
      expect_fd({a}, [&] { return sum_all(leaky_relu(a)); });
      expect_fd({a}, [&] { return sum_all(square(a)); });
      expect_fd({a}, [&] { return sum_all(vexp(mul_scalar(a, 0.3))); });
      expect_fd({a}, [&] { return sum_all(max_scalar(a, 0.5)); });
      expect_fd({a}, [&] { return sum_all(min_scalar(a, -0.5)); });
      expect_fd({a}, [&] { return mean_all(add_scalar(neg(a), 2.0)); });
      Tensor p = rand_positive({3, 4}, rng);
      expect_fd({p}, [&] { return sum_all(vlog(p)); });
      expect_fd({p}, [&] { return sum_all(vsqrt(p)); });
    }
    // softmax + reductions + shape ops
    {
      Tensor a = rand_normal({2, 3, 4}, rng);
      Tensor w = rand_normal({2, 3, 4}, rng, 1.0, false);
      expect_fd({a}, [&] { return sum_all(mul(softmax(a, 2), w)); });
      expect_fd({a}, [&] { return sum_all(mul(softmax(a, 1), w)); });
      expect_fd({a}, [&] {
        return sum_all(reduce_mean(square(reduce_sum(a, {1}, true)), {0, 2}));
      });
      expect_fd({a}, [&] { return sum_all(square(reshape(a, {6, 4}))); });
      expect_fd({a}, [&] { return sum_all(square(slice(a, 1, 1, 2))); });
      expect_fd({a}, [&] { return sum_all(square(transpose2d(reshape(a, {6, 4})))); });
      Tensor b = rand_normal({2, 3, 4}, rng);
      expect_fd({a, b}, [&] { return sum_all(square(concat({a, b}, 1))); });
    }
    // matmul variants
    {
      Tensor a2 = rand_normal({3, 4}, rng);
      Tensor b2 = rand_normal({4, 2}, rng);
      expect_fd({a2, b2}, [&] { return sum_all(square(matmul(a2, b2))); });
      Tensor a3 = rand_normal({2, 3, 4}, rng);
      Tensor b3 = rand_normal({2, 4, 2}, rng);
      expect_fd({a3, b3}, [&] { return sum_all(square(matmul(a3, b3))); });
      expect_fd({a3, b2}, [&] { return sum_all(square(matmul(a3, b2))); });
    }
    // conv + resampling
    {
      Tensor x = rand_normal({2, 5, 6, 3}, rng);
      Tensor w = rand_normal({3, 3, 3, 2}, rng, 0.5);
      Tensor bias = rand_normal({2}, rng, 0.5);
      const int stride = 1 + int(seed % 2);
      const int dilation = 1 + int(seed % 3 == 0);
      expect_fd({x, w, bias},
                [&] { return sum_all(square(conv2d(x, w, bias, stride, dilation))); });
      Tensor x4 = rand_normal({2, 4, 4, 2}, rng);
      expect_fd({x4}, [&] { return sum_all(square(upsample_nearest(x4, 2))); });
      expect_fd({x4}, [&] { return sum_all(square(upsample_bilinear(x4, 2))); });
      expect_fd({x4}, [&] { return sum_all(square(avgpool2d(x4, 2))); });
    }
    // batch norm, both modes. The probe tensor keeps the graph
    // well-conditioned: sum(bn(x)^2) is nearly constant in x by
    // construction, which starves the finite differences of signal.
    {
      Tensor x = rand_normal({3, 2, 2, 3}, rng);
      Tensor gamma = rand_positive({3}, rng);
      Tensor beta = rand_normal({3}, rng);
      Tensor rm = rand_normal({3}, rng, 1.0, false);
      Tensor rv = rand_positive({3}, rng, false);
      Tensor probe = rand_normal({3, 2, 2, 3}, rng, 1.0, false);
      BatchNormMode train{true, false, 0.1, 1e-5};
      expect_fd({x, gamma, beta},
                [&] { return sum_all(mul(batch_norm(x, gamma, beta, rm, rv, train), probe)); });
      BatchNormMode eval{false, false, 0.1, 1e-5};
      expect_fd({x, gamma, beta},
                [&] { return sum_all(mul(batch_norm(x, gamma, beta, rm, rv, eval), probe)); });
    }
    // dropout with a fixed mask stream
    {
      Tensor x = rand_normal({4, 6}, rng);
      expect_fd({x}, [&, seed] {
        Rng mask_rng(seed + 1000);
        return sum_all(square(dropout(x, 0.3, mask_rng, true)));
      });
    }
    // attention primitives
    {
      Tensor h = rand_normal({2, 4, 3}, rng);
      Tensor w = rand_normal({3}, rng);
      expect_fd({h, w}, [&] { return sum_all(square(pairwise_absdiff_dot(h, w))); });
      Tensor coarse = rand_normal({2, 4, 4}, rng);
      Tensor probe = rand_normal({2, 16, 16}, rng, 1.0, false);
      expect_fd({coarse},
                [&] { return sum_all(mul(lift_adjacency(softmax(coarse, 2), 2, 2, 2), probe)); });
      expect_fd({h}, [&] { return sum_all(square(leaky_relu(pairwise_absdiff_dot(h, w)))); });
    }
  }
}

TEST_CASE("dropout disabled is the identity node") {
  Rng rng(5);
  Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
  Tensor y = dropout(x, 0.5, rng, false);
  CHECK(y.node().get() == x.node().get());
}

TEST_CASE("batch norm updates running statistics only when asked") {
  Rng rng(11);
  Tensor x = rand_normal({4, 2, 2, 2}, rng, 2.0, false);
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  Tensor rm = Tensor::zeros({2});
  Tensor rv = Tensor::full({2}, 1.0);
  BatchNormMode no_update{true, false, 0.1, 1e-5};
  batch_norm(x, gamma, beta, rm, rv, no_update);
  CHECK(rm.values()[0] == 0.0);
  CHECK(rv.values()[0] == 1.0);
  BatchNormMode update{true, true, 0.1, 1e-5};
  batch_norm(x, gamma, beta, rm, rv, update);
  CHECK(rm.values()[0] != 0.0);
}

TEST_CASE("lifted adjacency rows stay stochastic") {
  Rng rng(13);
  Tensor scores = rand_normal({2, 9, 9}, rng, 2.0, false);
  Tensor lifted = lift_adjacency(softmax(scores, 2), 3, 3, 2);
  CHECK(lifted.shape() == Shape{2, 36, 36});
  auto v = lifted.values();
  for (int64_t r = 0; r < 2 * 36; ++r) {
    double sum = 0;
    for (int64_t q = 0; q < 36; ++q) sum += v[size_t(r * 36 + q)];
    CHECK(std::fabs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("parallel kernels are invariant to the worker count") {
  Rng rng(17);
  Tensor x = rand_normal({3, 8, 8, 4}, rng, 1.0, false);
  Tensor w = rand_normal({3, 3, 4, 6}, rng, 0.5, false);
  Tensor a = rand_normal({4, 9, 7}, rng, 1.0, false);
  Tensor b = rand_normal({4, 7, 5}, rng, 1.0, false);

  auto run_all = [&] {
    std::vector<double> out;
    auto c = conv2d(x, w, 1, 1);
    out.insert(out.end(), c.values().begin(), c.values().end());
    auto m = matmul(a, b);
    out.insert(out.end(), m.values().begin(), m.values().end());
    return out;
  };

  ThreadPool::set_global_threads(1);
  auto r1 = run_all();
  ThreadPool::set_global_threads(3);
  auto r3 = run_all();
  ThreadPool::set_global_threads(1);
  CHECK(r1 == r3);
}
