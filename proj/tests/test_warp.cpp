#include <cmath>

#include "doctest.h"
#include "dmvton/errors.hpp"
#include "dmvton/warp.hpp"
#include "test_util.hpp"

using namespace dmvton;
using ag::Var;
using testutil::gradcheck;
using testutil::probe_sum;
using testutil::uniform;

namespace {

Tensor constant_flow(int64_t h, int64_t w, double u, double v) {
  Tensor f({1, 2, h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    f[i] = u;
    f[h * w + i] = v;
  }
  return f;
}

// u(y,x) = a + b x + c y, v(y,x) = d + e x + g y
Tensor affine_flow(int64_t h, int64_t w, const double (&k)[6]) {
  Tensor f({1, 2, h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      f.at(0, 0, y, x) = k[0] + k[1] * x + k[2] * y;
      f.at(0, 1, y, x) = k[3] + k[4] * x + k[5] * y;
    }
  return f;
}

double smooth(const Tensor& f, warp::CharbonnierParams p = {}) {
  warp::FlowPyramid pyr{{Var(f)}};
  return warp::second_order_smooth_loss(pyr, p).value()[0];
}

// Independent triple loop over points and the four directions.
double brute_force_smooth(const Tensor& f, double eps, double alpha) {
  const int64_t h = f.dim(2), w = f.dim(3);
  const int dirs[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
  double total = 0;
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (const auto& d : dirs) {
          const int64_t y0 = y - d[0], x0 = x - d[1], y1 = y + d[0], x1 = x + d[1];
          if (y0 < 0 || y1 >= h || x0 < 0 || x0 >= w || x1 < 0 || x1 >= w) continue;
          const double sd = f.at(0, c, y0, x0) + f.at(0, c, y1, x1) - 2 * f.at(0, c, y, x);
          total += std::pow(sd * sd + eps * eps, alpha);
        }
  return total;
}

}  // namespace

TEST_CASE("zero flow is the identity, bit for bit") {
  std::mt19937_64 rng(11);
  const Tensor src = uniform({2, 3, 5, 4}, rng);
  const Tensor flow({2, 2, 5, 4});
  for (auto pad : {warp::Padding::kZeros, warp::Padding::kBorder}) {
    const Tensor out = warp::apply_flow(Var(src), Var(flow), pad).value();
    for (int64_t i = 0; i < src.numel(); ++i) REQUIRE(out[i] == src[i]);
  }
}

TEST_CASE("unit shift on a 1x4x4 ramp shifts each row left with zeros entering") {
  Tensor ramp({1, 1, 4, 4});
  for (int64_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
  const Tensor out = warp::apply_flow(Var(ramp), Var(constant_flow(4, 4, 1.0, 0.0))).value();
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x) {
      const double expected = x + 1 < 4 ? ramp.at(0, 0, y, x + 1) : 0.0;
      CHECK(out.at(0, 0, y, x) == expected);
    }
}

TEST_CASE("integer shifts in any direction match the gather oracle exactly") {
  std::mt19937_64 rng(12);
  const Tensor src = uniform({1, 2, 5, 6}, rng);
  for (int du = -2; du <= 2; ++du)
    for (int dv = -2; dv <= 2; ++dv) {
      const Tensor out = warp::apply_flow(Var(src), Var(constant_flow(5, 6, du, dv))).value();
      for (int64_t c = 0; c < 2; ++c)
        for (int64_t y = 0; y < 5; ++y)
          for (int64_t x = 0; x < 6; ++x) {
            const int64_t sy = y + dv, sx = x + du;
            const double expected = sy >= 0 && sy < 5 && sx >= 0 && sx < 6 ? src.at(0, c, sy, sx) : 0.0;
            REQUIRE(out.at(0, c, y, x) == expected);
          }
    }
}

TEST_CASE("sampling entirely outside the image gives zeros, or the border with border padding") {
  std::mt19937_64 rng(13);
  const Tensor src = uniform({1, 1, 3, 3}, rng);
  const Tensor far = constant_flow(3, 3, 100.0, -100.0);
  const Tensor zeros = warp::apply_flow(Var(src), Var(far)).value();
  for (int64_t i = 0; i < 9; ++i) CHECK(zeros[i] == 0.0);
  const Tensor border = warp::apply_flow(Var(src), Var(far), warp::Padding::kBorder).value();
  for (int64_t i = 0; i < 9; ++i) CHECK(border[i] == src.at(0, 0, 0, 2));
}

TEST_CASE("half-pixel shift averages neighbours") {
  Tensor src({1, 1, 1, 3}, {0.0, 2.0, 4.0});
  const Tensor out = warp::apply_flow(Var(src), Var(constant_flow(1, 3, 0.5, 0.0))).value();
  CHECK(out[0] == doctest::Approx(1.0));
  CHECK(out[1] == doctest::Approx(3.0));
  CHECK(out[2] == doctest::Approx(2.0));  // half of the last pixel, half zero padding
}

TEST_CASE("non-finite flow is a numeric error") {
  Tensor flow = constant_flow(2, 2, 0.0, 0.0);
  flow[3] = std::nan("");
  try {
    warp::apply_flow(Var(Tensor({1, 1, 2, 2})), Var(flow));
    FAIL("expected kNumeric");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kNumeric);
  }
  CHECK_THROWS_AS(warp::apply_flow(Var(Tensor({1, 1, 2, 2})), Var(Tensor({1, 2, 3, 2}))), Error);
}

TEST_CASE("apply_flow gradients w.r.t. source and flow") {
  std::mt19937_64 rng(14);
  const Tensor src = uniform({1, 2, 6, 5}, rng);
  // Keep sample points away from integer grid lines, where bilinear
  // interpolation is not differentiable.
  Tensor flow = uniform({1, 2, 6, 5}, rng, -1.5, 1.5);
  for (int64_t i = 0; i < flow.numel(); ++i) {
    const double frac = flow[i] - std::floor(flow[i]);
    if (frac < 0.05 || frac > 0.95) flow[i] += 0.3;
  }
  for (auto pad : {warp::Padding::kZeros, warp::Padding::kBorder}) {
    const auto r = gradcheck([pad](auto& v) { return probe_sum(warp::apply_flow(v[0], v[1], pad)); }, {src, flow});
    CHECK(r.ok());
  }
}

TEST_CASE("image-level apply_flow matches the tensor path") {
  std::mt19937_64 rng(15);
  const Tensor src = uniform({1, 3, 4, 5}, rng);
  const Tensor f = uniform({1, 2, 4, 5}, rng, -2, 2);
  const ImageTensor img = ImageTensor::from_tensor(src);
  const ImageTensor out = warp::apply_flow(img, warp::FlowField::from_tensor(f));
  const Tensor ref = warp::apply_flow(Var(src), Var(f)).value();
  for (int64_t i = 0; i < ref.numel(); ++i) CHECK(out.data()[static_cast<size_t>(i)] == ref[i]);
}

TEST_CASE("charbonnier scalar cases") {
  CHECK(warp::charbonnier(0.0) == doctest::Approx(std::pow(1e-6, 0.45)).epsilon(1e-12));
  CHECK(warp::charbonnier(0.0) == doctest::Approx(1.995e-3).epsilon(1e-3));
  CHECK(warp::charbonnier(3.0, 4.0, 0.5) == doctest::Approx(5.0).epsilon(1e-15));
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> u(-10, 10);
  const double floor_value = std::pow(1e-6, 0.45);
  for (int i = 0; i < 200; ++i) {
    const double x = u(rng);
    CHECK(warp::charbonnier(-x) == warp::charbonnier(x));
    CHECK(warp::charbonnier(x) > floor_value);
  }
}

TEST_CASE("term counts") {
  CHECK(warp::second_order_term_count(4, 4) == 8 + 8 + 4 + 4);
  CHECK(warp::second_order_term_count(1, 1) == 0);
  CHECK(warp::second_order_term_count(1, 5) == 3);
  CHECK(warp::second_order_term_count(5, 5) == 15 + 15 + 9 + 9);
}

TEST_CASE("constant and affine flows cost count * charbonnier(0)") {
  const double c0 = std::pow(1e-6, 0.45);
  const double expected = 2 * warp::second_order_term_count(4, 4) * c0;
  CHECK(smooth(constant_flow(4, 4, 1.7, -0.3)) == doctest::Approx(expected).epsilon(1e-12));
  const double k[6] = {0.5, 0.25, -1.5, 2.0, -0.75, 0.125};
  CHECK(std::abs(smooth(affine_flow(4, 4, k)) - expected) <= 1e-9);
}

TEST_CASE("adding an affine field leaves the smoothness loss unchanged") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = uniform({1, 2, 6, 5}, rng, -2, 2);
    double k[6];
    for (double& c : k) c = u(rng);
    const Tensor a = affine_flow(6, 5, k);
    Tensor g = f;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += a[i];
    REQUIRE(std::abs(smooth(g) - smooth(f)) <= 1e-9);
  }
}

TEST_CASE("random 5x5 level matches the brute-force loop") {
  std::mt19937_64 rng(18);
  const Tensor f = uniform({1, 2, 5, 5}, rng, -2, 2);
  CHECK(smooth(f) == doctest::Approx(brute_force_smooth(f, 1e-3, 0.45)).epsilon(1e-12));
  CHECK(smooth(f, {0.1, 0.3}) == doctest::Approx(brute_force_smooth(f, 0.1, 0.3)).epsilon(1e-12));
}

TEST_CASE("pyramid reductions") {
  std::mt19937_64 rng(19);
  const Tensor a = uniform({1, 2, 2, 3}, rng);
  const Tensor b = uniform({1, 2, 4, 6}, rng);
  warp::FlowPyramid pyr{{Var(a), Var(b)}};
  pyr.validate();
  const double s = warp::second_order_smooth_loss(pyr).value()[0];
  CHECK(s == doctest::Approx(smooth(a) + smooth(b)).epsilon(1e-12));
  const double m = warp::second_order_smooth_loss(pyr, {}, warp::SmoothReduction::kMeanPerLevel).value()[0];
  const double ma = smooth(a) / (2.0 * warp::second_order_term_count(2, 3));
  const double mb = smooth(b) / (2.0 * warp::second_order_term_count(4, 6));
  CHECK(m == doctest::Approx(ma + mb).epsilon(1e-12));
  warp::FlowPyramid bad{{Var(a), Var(a)}};
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("smoothness loss gradient") {
  std::mt19937_64 rng(20);
  const Tensor a = uniform({1, 2, 3, 2}, rng);
  const Tensor b = uniform({1, 2, 6, 4}, rng);
  const auto r = gradcheck(
      [](auto& v) {
        warp::FlowPyramid p{{v[0], v[1]}};
        return warp::second_order_smooth_loss(p);
      },
      {a, b});
  CHECK(r.ok());
}

TEST_CASE("upsample_flow doubles size and displacement") {
  std::mt19937_64 rng(21);
  const Tensor f = uniform({1, 2, 3, 3}, rng);
  const Tensor up = warp::upsample_flow(Var(f)).value();
  REQUIRE(up.shape() == Shape{1, 2, 6, 6});
  // Half-pixel-centre bilinear with edge clamping, computed independently.
  auto sample = [&](int64_t c, int64_t oy, int64_t ox) {
    auto src_coord = [](int64_t o) { return std::clamp((o + 0.5) / 2.0 - 0.5, 0.0, 2.0); };
    const double sy = src_coord(oy), sx = src_coord(ox);
    const int64_t y0 = static_cast<int64_t>(std::floor(sy)), x0 = static_cast<int64_t>(std::floor(sx));
    const int64_t y1 = std::min<int64_t>(y0 + 1, 2), x1 = std::min<int64_t>(x0 + 1, 2);
    const double wy = sy - y0, wx = sx - x0;
    return (1 - wy) * ((1 - wx) * f.at(0, c, y0, x0) + wx * f.at(0, c, y0, x1)) +
           wy * ((1 - wx) * f.at(0, c, y1, x0) + wx * f.at(0, c, y1, x1));
  };
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t y = 0; y < 6; ++y)
      for (int64_t x = 0; x < 6; ++x) CHECK(up.at(0, c, y, x) == doctest::Approx(2 * sample(c, y, x)).epsilon(1e-12));
  CHECK(gradcheck([](auto& v) { return probe_sum(warp::upsample_flow(v[0])); }, {f}).ok());
}
