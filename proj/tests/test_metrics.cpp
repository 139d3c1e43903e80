#include <cmath>

#include "doctest.h"
#include "dmvton/errors.hpp"
#include "dmvton/metrics.hpp"
#include "dmvton/nets.hpp"
#include "dmvton/toy.hpp"
#include "dmvton/weights.hpp"
#include "test_util.hpp"

using namespace dmvton;
using namespace dmvton::metrics;
using ag::Var;
using testutil::TempDir;

namespace {

GaussianStats stats(std::vector<double> mean, std::vector<double> cov) { return {std::move(mean), std::move(cov)}; }

// A random symmetric positive definite D x D matrix: A A^T + 0.1 I.
std::vector<double> random_spd(int64_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::vector<double> a(static_cast<size_t>(d * d)), c(static_cast<size_t>(d * d));
  for (double& v : a) v = n(rng);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double s = i == j ? 0.1 : 0.0;
      for (int64_t k = 0; k < d; ++k) s += a[i * d + k] * a[j * d + k];
      c[i * d + j] = s;
    }
  return c;
}

class Tanh : public nn::Layer {
 public:
  Var forward(const Var& x) const override { return ops::tanh(x); }
};

class Custom : public nn::Layer {
 public:
  Var forward(const Var& x) const override {
    return ops::map_unary(x, "cube", [](double v) { return v * v * v; }, [](double v) { return 3 * v * v; });
  }
};

}  // namespace

TEST_CASE("frechet distance closed forms") {
  CHECK(frechet_distance(stats({0}, {1}), stats({3}, {4})) == 10.0);

  std::mt19937_64 rng(1);
  const auto c = random_spd(5, rng);
  const GaussianStats g = stats({1, -2, 0.5, 3, 0}, c);
  CHECK(std::abs(frechet_distance(g, g)) <= 1e-6);

  // Commuting diagonal covariances.
  const std::vector<double> ma{0, 1, 2}, mb{1, -1, 2.5}, va{1, 4, 0.25}, vb{9, 1, 2};
  std::vector<double> ca(9, 0.0), cb(9, 0.0);
  double expected = 0;
  for (int i = 0; i < 3; ++i) {
    ca[i * 4] = va[i];
    cb[i * 4] = vb[i];
    expected += (ma[i] - mb[i]) * (ma[i] - mb[i]) + std::pow(std::sqrt(va[i]) - std::sqrt(vb[i]), 2);
  }
  CHECK(frechet_distance(stats(ma, ca), stats(mb, cb)) == doctest::Approx(expected).epsilon(1e-10));
  // Symmetric in its arguments.
  const GaussianStats h = stats({0, 0, 0, 0, 0}, random_spd(5, rng));
  CHECK(frechet_distance(g, h) == doctest::Approx(frechet_distance(h, g)).epsilon(1e-9));

  CHECK_THROWS_AS(frechet_distance(stats({0}, {1}), stats({0, 0}, {1, 0, 0, 1})), Error);
  CHECK_THROWS_AS(frechet_distance(stats({0, 0}, {1, 0, 0, -1}), stats({0, 0}, {1, 0, 0, 1})), Error);
  CHECK_THROWS_AS(frechet_distance(stats({0, 0}, {1, 0.5, 0, 1}), stats({0, 0}, {1, 0, 0, 1})), Error);
}

TEST_CASE("fitted Gaussians approach the analytic distance") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> a, b;
  for (int i = 0; i < 20000; ++i) {
    a.push_back({n(rng), 2 * n(rng)});
    b.push_back({1 + 3 * n(rng), -1 + n(rng)});
  }
  const GaussianStats sa = GaussianStats::fit(a), sb = GaussianStats::fit(b);
  // (0-1)^2 + (0+1)^2 + (1-3)^2 + (2-1)^2 = 7
  CHECK(frechet_distance(sa, sb) == doctest::Approx(7.0).epsilon(0.05));
  CHECK(sa.cov[3] == doctest::Approx(4.0).epsilon(0.05));

  const GaussianStats small = GaussianStats::fit({{1, 2}, {3, 6}});
  CHECK(small.mean == std::vector<double>{2, 4});
  CHECK(small.cov == std::vector<double>{2, 4, 4, 8});  // unbiased: divides by n - 1
  CHECK(GaussianStats::fit({{1, 2}}).cov == std::vector<double>{0, 0, 0, 0});
  CHECK_THROWS_AS(GaussianStats::fit({}), Error);
  CHECK_THROWS_AS(GaussianStats::fit({{1, 2}, {3}}), Error);
}

TEST_CASE("fid of identical image directories is zero") {
  TempDir dir("fid");
  toy::ToyOptions opt;
  opt.count = 6;
  toy::write_dataset(dir.path(), opt);
  const auto images = load_image_dir(dir / "person", {64, 48});
  REQUIRE(images.size() == 6);
  const losses::RandomConvExtractor phi;
  const FidResult r = fid_score(images, images, phi);
  CHECK(std::abs(r.value) <= 1e-6);
  CHECK(r.dim == phi.feature_dim());
  CHECK(r.warning.has_value());  // 6 images, 32 dims
  const auto other = load_image_dir(dir / "garment", {64, 48});
  CHECK(fid_score(images, other, phi).value > 1e-3);
  CHECK_THROWS_AS(load_image_dir(dir / "nope", {64, 48}), Error);
}

TEST_CASE("lpips-like distance") {
  const losses::IdentityExtractor id;
  // 2 channels, 1x1: (3,4)/5 vs (1,0): (0.6-1)^2 + 0.8^2 = 0.8, up to the
  // 1e-10 guard in the normaliser.
  const ImageTensor a(2, 1, 1, std::vector<double>{3, 4}), b(2, 1, 1, std::vector<double>{1, 0});
  CHECK(lpips_like(a, b, id) == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(lpips_like(a, b, id, {0.5}) == doctest::Approx(0.4).epsilon(1e-9));
  CHECK(lpips_like(a, a, id) == 0.0);
  std::mt19937_64 rng(3);
  const losses::RandomConvExtractor phi;
  const ImageTensor x = ImageTensor::from_tensor(testutil::uniform({1, 3, 16, 12}, rng));
  const ImageTensor y = ImageTensor::from_tensor(testutil::uniform({1, 3, 16, 12}, rng));
  CHECK(lpips_like(x, y, phi) > 0.0);
  CHECK(lpips_like(x, y, phi) == doctest::Approx(lpips_like(y, x, phi)).epsilon(1e-12));
  CHECK_THROWS_AS(lpips_like(x, y, phi, {1.0}), Error);  // three stages, one weight
}

TEST_CASE("FLOP and parameter counts") {
  nn::Conv2d::Options o;
  o.bias = false;
  const nn::Conv2d conv(1, 1, 3, o);
  CHECK(count_flops(conv, {1, 1, 4, 4}) == 288);
  CHECK(count_params(conv) == 9);
  CHECK(count_flops(conv, {2, 1, 4, 4}) == 576);
  CHECK(count_params(Tanh()) == 0);
  CHECK(count_flops(Tanh(), {1, 3, 2, 2}) == 12);
  try {
    count_flops(Custom(), {1, 1, 2, 2});
    FAIL("expected kUnsupported");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kUnsupported);
    CHECK(std::string(e.what()).find("cube") != std::string::npos);
  }

  nets::StudentNet s(nets::NetConfig::tiny());
  s.init(1);
  const auto archive = WeightArchive::pack(s.export_weights(), DType::kF32);
  int64_t elements = 0;
  for (const auto& [name, t] : archive.unpack()) elements += t.numel();
  CHECK(count_params(s) == elements);

  const int64_t m1 = memory_estimate(conv, {1, 1, 4, 4});
  CHECK(m1 >= 4 * 9 + 4 * 16);
  CHECK(memory_estimate(conv, {4, 1, 4, 4}) > m1);
}

TEST_CASE("latency benchmark") {
  nets::StudentNet s(nets::NetConfig::tiny());
  s.init(2);
  const auto l = benchmark_latency(s, {1, 6, 64, 48}, 1, 5, 0);
  CHECK(l.iterations == 5);
  CHECK(l.mean_ms > 0);
  CHECK(l.median_ms > 0);
  CHECK(l.p95_ms >= l.median_ms);
  CHECK_THROWS_AS(benchmark_latency(s, {1, 6, 64, 48}, 0, 5, 0), Error);
  CHECK_THROWS_AS(benchmark_latency(s, {1, 6, 64, 48}, 1, 2, 0), Error);
}

TEST_CASE("comparison report") {
  ProfileRow a{"student", 100, 50, LatencyStats{1.5, 1.4, 2.0, 5}, 0.5};
  ProfileRow b{"teacher", 400, 100, std::nullopt, 1.0};

  const Report plain = comparison_report({a, b});
  CHECK(plain.json["rows"].size() == 2);
  CHECK(plain.json["rows"][0]["latency_ms"]["p95"] == 2.0);
  CHECK(plain.json["rows"][1]["latency_ms"].is_null());
  CHECK_FALSE(plain.json["rows"][0].contains("flops_ratio"));
  CHECK(plain.json["quality"].empty());
  CHECK(plain.json["env"]["device"] == "cpu");
  CHECK(plain.text.find("student") != std::string::npos);
  CHECK(plain.text.find("FID") == std::string::npos);

  QualityBlock q;
  q.fid = 12.5;
  q.extractor = "random-conv";
  const Report withq = comparison_report({a, b}, q, "teacher");
  CHECK(withq.json["rows"][0]["flops_ratio"] == 0.5);
  CHECK(withq.json["rows"][0]["params_ratio"] == 0.25);
  CHECK(withq.json["rows"][1]["flops_ratio"] == 1.0);
  CHECK(withq.json["baseline"] == "teacher");
  CHECK(withq.json["quality"]["fid"] == 12.5);
  CHECK_FALSE(withq.json["quality"].contains("lpips"));
  CHECK(withq.text.find("FID") != std::string::npos);

  CHECK_THROWS_AS(comparison_report({}), Error);
  CHECK_THROWS_AS(comparison_report({a}, std::nullopt, "nobody"), Error);
}

TEST_CASE("profile_model fills every column") {
  nets::StudentNet s(nets::NetConfig::tiny());
  s.init(3);
  const ProfileRow r = profile_model("student", s, {1, 6, 64, 48}, 1, 3, 0);
  CHECK(r.params == count_params(s));
  CHECK(r.flops == count_flops(s, {1, 6, 64, 48}));
  REQUIRE(r.latency);
  CHECK(r.memory_mb > 0);
}
