#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "protoalign/cdd.hpp"
#include "protoalign/gradcheck.hpp"
#include "test_util.hpp"

using namespace protoalign;
using testutil::rand_normal;
using testutil::rand_simplex;

namespace {

RandomizedMap literal_map(Shape fshape, std::vector<double> fvals, Shape mshape,
                          std::vector<double> mvals) {
  RandomizedMap rm;
  rm.r_f = Tensor::from_data(std::move(fshape), std::move(fvals));
  rm.r_m = Tensor::from_data(std::move(mshape), std::move(mvals));
  rm.d_o = int(rm.r_f.extent(1));
  return rm;
}

std::vector<double> unit_vector(int64_t d, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(d));
  double norm = 0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace

TEST_CASE("multilinear map is zero when features vanish") {
  RandomizedMap rm = make_randomized_map(4, 3, 5, 42);
  Tensor f = Tensor::zeros({1, 2, 2, 4});
  Rng rng(1);
  Tensor m = rand_simplex({1, 2, 2, 3}, rng);
  Tensor j = multilinear_map(f, m, rm);
  for (double v : j.values()) CHECK(v == 0.0);
}

TEST_CASE("multilinear map hand-evaluated 1-pixel case") {
  auto rm = literal_map({2, 1}, {1.0, -1.0}, {2, 1}, {1.0, 1.0});
  Tensor f = Tensor::from_data({1, 1, 1, 2}, {3.0, 1.0});
  Tensor m = Tensor::from_data({1, 1, 1, 2}, {0.5, 0.5});
  Tensor j = multilinear_map(f, m, rm);
  CHECK(j.numel() == 1);
  CHECK(j.item() == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("multilinear map is homogeneous in the features") {
  Rng rng(3);
  RandomizedMap rm = make_randomized_map(6, 4, 8, 7);
  Tensor f = rand_normal({2, 3, 3, 6}, rng, 1.0, false);
  Tensor m = rand_simplex({2, 3, 3, 4}, rng);
  Tensor f2 = Tensor::from_data(f.shape(), [&] {
    std::vector<double> v(f.values().begin(), f.values().end());
    for (auto& x : v) x *= 2.0;
    return v;
  }());
  Tensor j1 = multilinear_map(f, m, rm);
  Tensor j2 = multilinear_map(f2, m, rm);
  for (size_t i = 0; i < j1.values().size(); ++i) {
    CHECK(j2.values()[i] == doctest::Approx(2.0 * j1.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("randomized map construction is frozen and validated") {
  RandomizedMap a = make_randomized_map(8, 4, 16, 99);
  RandomizedMap b = make_randomized_map(8, 4, 16, 99);
  CHECK(std::vector<double>(a.r_f.values().begin(), a.r_f.values().end()) ==
        std::vector<double>(b.r_f.values().begin(), b.r_f.values().end()));
  CHECK_THROWS_AS(make_randomized_map(4, 4, 16, 1), Error);  // d_o not << d*nc
}

TEST_CASE("fused inner products estimate the product of inner products") {
  // average over fresh maps of <J(f,m), J(f',m')> -> <f,f'><m,m'>
  Rng rng(11);
  const int d = 8, nc = 4, d_o = 4096, draws = 100;
  for (int quad = 0; quad < 3; ++quad) {
    auto f = unit_vector(d, rng);
    auto fp = unit_vector(d, rng);
    auto m = unit_vector(nc, rng);
    auto mp = unit_vector(nc, rng);
    // blend to keep both inner products away from zero
    double df = 0, dm = 0;
    for (int i = 0; i < d; ++i) fp[size_t(i)] = 0.8 * f[size_t(i)] + 0.2 * fp[size_t(i)];
    for (int i = 0; i < nc; ++i) mp[size_t(i)] = 0.8 * m[size_t(i)] + 0.2 * mp[size_t(i)];
    double nf = 0, nm = 0;
    for (double v : fp) nf += v * v;
    for (double v : mp) nm += v * v;
    for (auto& v : fp) v /= std::sqrt(nf);
    for (auto& v : mp) v /= std::sqrt(nm);
    for (int i = 0; i < d; ++i) df += f[size_t(i)] * fp[size_t(i)];
    for (int i = 0; i < nc; ++i) dm += m[size_t(i)] * mp[size_t(i)];
    const double target = df * dm;
    REQUIRE(std::fabs(target) > 0.25);

    Tensor tf = Tensor::from_data({1, 1, 1, d}, f);
    Tensor tfp = Tensor::from_data({1, 1, 1, d}, fp);
    Tensor tm = Tensor::from_data({1, 1, 1, nc}, m);
    Tensor tmp = Tensor::from_data({1, 1, 1, nc}, mp);

    double acc = 0;
    for (int draw = 0; draw < draws; ++draw) {
      Rng mrng = Rng::stream(1000 + uint64_t(quad), "mc-kernel", uint64_t(draw));
      RandomizedMap rm;
      rm.d_o = d_o;
      rm.r_f = Tensor::randn({d, d_o}, mrng);
      rm.r_m = Tensor::randn({nc, d_o}, mrng);
      Tensor ja = multilinear_map(tf, tm, rm);
      Tensor jb = multilinear_map(tfp, tmp, rm);
      double dot = 0;
      for (size_t i = 0; i < ja.values().size(); ++i) dot += ja.values()[i] * jb.values()[i];
      acc += dot;
    }
    acc /= draws;
    CHECK(std::fabs(acc - target) / std::fabs(target) <= 0.05);
  }
}

TEST_CASE("a silent discriminator scores 2 ln 2") {
  Rng rng(5);
  DiscriminatorArch arch{4, 1};
  ParameterStore params;
  init_discriminator(arch, 6, params, rng);
  std::fill(params.get("disc/head/w").raw().begin(), params.get("disc/head/w").raw().end(), 0.0);
  Tensor js = rand_normal({2, 4, 4, 6}, rng, 1.0, false);
  Tensor jt = rand_normal({2, 4, 4, 6}, rng, 1.0, false);
  Tensor loss = cdd_loss(js, jt, arch, params, 1.0);
  CHECK(loss.item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("a saturated perfect discriminator scores ~2e-7 and is counted") {
  DiscriminatorArch arch{1, 0};
  ParameterStore params;
  params.add("disc/stem/w", Tensor::full({3, 3, 2, 1}, 1.0));
  params.add("disc/stem/b", Tensor::zeros({1}));
  params.add("disc/head/w", Tensor::full({1, 1, 1, 1}, 1e6));
  params.add("disc/head/b", Tensor::zeros({1}));
  Tensor js = Tensor::full({1, 4, 4, 2}, 1.0);
  Tensor jt = Tensor::full({1, 4, 4, 2}, -1.0);
  int saturated = 0;
  Tensor loss = cdd_loss(js, jt, arch, params, 1.0, &saturated);
  CHECK(loss.item() == doctest::Approx(2e-7).epsilon(1e-3));
  CHECK(saturated == 2);
}

TEST_CASE("reversal flips and scales the upstream gradient") {
  Rng rng(7);
  DiscriminatorArch arch{4, 1};
  ParameterStore params;
  init_discriminator(arch, 5, params, rng);
  RandomizedMap rm = make_randomized_map(6, 3, 5, 3);
  Tensor f_s = rand_normal({2, 4, 4, 6}, rng);
  Tensor f_t = rand_normal({2, 4, 4, 6}, rng);
  Tensor m_s = rand_simplex({2, 4, 4, 3}, rng);
  Tensor m_t = rand_simplex({2, 4, 4, 3}, rng);
  const double scale = 0.7;

  auto grads_with_scale = [&](double s) {
    f_s.zero_grad();
    f_t.zero_grad();
    params.zero_grads();
    Tensor loss = cdd_loss(multilinear_map(f_s, m_s, rm), multilinear_map(f_t, m_t, rm), arch,
                           params, s);
    loss.backward();
    return std::vector<double>(f_s.grad().begin(), f_s.grad().end());
  };

  auto g_rev = grads_with_scale(scale);
  auto g_fwd = grads_with_scale(0.0);  // scale 0: reversal blocks the gradient entirely
  for (double v : g_fwd) CHECK(v == 0.0);

  // compare against a bypassed graph built by hand
  f_s.zero_grad();
  f_t.zero_grad();
  params.zero_grads();
  Tensor d_src = discriminator_forward(arch, params, multilinear_map(f_s, m_s, rm));
  Tensor d_tgt = discriminator_forward(arch, params, multilinear_map(f_t, m_t, rm));
  Tensor loss = add(neg(mean_all(vlog(min_scalar(max_scalar(d_src, 1e-7), 1.0 - 1e-7)))),
                    neg(mean_all(vlog(sub(Tensor::full(d_tgt.shape(), 1.0),
                                          min_scalar(max_scalar(d_tgt, 1e-7), 1.0 - 1e-7))))));
  loss.backward();
  auto g_plain = std::vector<double>(f_s.grad().begin(), f_s.grad().end());
  REQUIRE(g_rev.size() == g_plain.size());
  for (size_t i = 0; i < g_rev.size(); ++i) {
    CHECK(g_rev[i] == doctest::Approx(-scale * g_plain[i]).epsilon(1e-9));
  }
}

TEST_CASE("cdd loss gradient passes the fd check") {
  Rng rng(13);
  DiscriminatorArch arch{3, 1};
  ParameterStore params;
  init_discriminator(arch, 4, params, rng);
  RandomizedMap rm = make_randomized_map(5, 3, 4, 17);
  Tensor f_s = rand_normal({1, 4, 4, 5}, rng);
  Tensor f_t = rand_normal({1, 4, 4, 5}, rng);
  Tensor m_s = rand_simplex({1, 4, 4, 3}, rng, true);
  Tensor m_t = rand_simplex({1, 4, 4, 3}, rng, true);
  const double scale = 1.0;

  auto builder = [&] {
    return cdd_loss(multilinear_map(f_s, m_s, rm), multilinear_map(f_t, m_t, rm), arch, params,
                    scale);
  };

  // discriminator parameters: the reversal sits upstream of them
  auto disc_report = grad_check(params, builder);
  CHECK_MESSAGE(disc_report.max_rel_err <= 1e-4, "disc worst at ", disc_report.worst);

  // upstream leaves: fold the reversal scale back in
  GradCheckOptions opts;
  opts.factors = {-scale, -scale, -scale, -scale};
  auto up_report = grad_check({f_s, f_t, m_s, m_t}, builder, opts);
  CHECK_MESSAGE(up_report.max_rel_err <= 1e-4, "upstream worst at ", up_report.worst);
}

TEST_CASE("randomized map survives a checkpoint round-trip bit-exactly") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "protoalign_rmap_ckpt";
  fs::remove_all(dir);
  RandomizedMap rm = make_randomized_map(8, 4, 10, 2024);
  ParameterStore params;
  save_randomized_map(rm, params);
  params.save(dir.string(), R"({"rmap_seed":2024})");
  ParameterStore loaded = ParameterStore::load(dir.string());
  RandomizedMap back = load_randomized_map(loaded, 2024);
  CHECK(std::vector<double>(back.r_f.values().begin(), back.r_f.values().end()) ==
        std::vector<double>(rm.r_f.values().begin(), rm.r_f.values().end()));
  CHECK(std::vector<double>(back.r_m.values().begin(), back.r_m.values().end()) ==
        std::vector<double>(rm.r_m.values().begin(), rm.r_m.values().end()));
  fs::remove_all(dir);
}
