#include "dmvton/warp.hpp"

#include <algorithm>
#include <cmath>

#include "dmvton/errors.hpp"
#include "dmvton/ops.hpp"
#include "dmvton/profile.hpp"

namespace dmvton::warp {

using ag::make_result;
using ag::Node;

FlowField::FlowField(int64_t height, int64_t width)
    : h_(height), w_(width), u_(static_cast<size_t>(height * width), 0.0), v_(u_) {}

FlowField::FlowField(int64_t height, int64_t width, std::vector<double> u, std::vector<double> v)
    : h_(height), w_(width), u_(std::move(u)), v_(std::move(v)) {
  if (static_cast<int64_t>(u_.size()) != h_ * w_ || static_cast<int64_t>(v_.size()) != h_ * w_)
    fail(Errc::kShape, "flow field component length does not match H*W");
}

FlowField FlowField::from_tensor(const Tensor& t, int64_t n) {
  if (t.rank() != 4 || t.dim(1) != 2) fail(Errc::kShape, "flow tensor must be [N,2,H,W]");
  const int64_t h = t.dim(2), w = t.dim(3), hw = h * w;
  const double* p = t.data() + n * 2 * hw;
  return FlowField(h, w, std::vector<double>(p, p + hw), std::vector<double>(p + hw, p + 2 * hw));
}

Tensor FlowField::batched() const {
  std::vector<double> d(u_);
  d.insert(d.end(), v_.begin(), v_.end());
  return Tensor({1, 2, h_, w_}, std::move(d));
}

void FlowPyramid::validate() const {
  if (levels.empty()) fail(Errc::kShape, "flow pyramid is empty");
  for (size_t i = 0; i < levels.size(); ++i) {
    const Shape& s = levels[i].shape();
    if (s.size() != 4 || s[1] != 2) fail(Errc::kShape, "flow level must be [N,2,H,W], got " + shape_str(s));
    if (i > 0) {
      const Shape& p = levels[i - 1].shape();
      if (s[2] != 2 * p[2] || s[3] != 2 * p[3])
        fail(Errc::kShape, "flow pyramid level " + std::to_string(i) + " is not twice the previous level");
    }
  }
}

namespace {

struct Sample {
  int64_t x0, x1, y0, y1;
  double wx, wy;
  bool vx0, vx1, vy0, vy1;  // tap validity (zeros padding)
  double dsx, dsy;          // d(sample coord)/d(flow): 0 where clamped
};

Sample locate(double sx, double sy, int64_t w, int64_t h, Padding pad) {
  Sample s{};
  s.dsx = s.dsy = 1.0;
  if (pad == Padding::kBorder) {
    if (sx < 0 || sx > static_cast<double>(w - 1)) s.dsx = 0.0;
    if (sy < 0 || sy > static_cast<double>(h - 1)) s.dsy = 0.0;
    sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
  } else {
    // Far outside the grid every tap is padding; clamp to keep the casts defined.
    sx = std::clamp(sx, -2.0, static_cast<double>(w + 1));
    sy = std::clamp(sy, -2.0, static_cast<double>(h + 1));
  }
  const double fx = std::floor(sx), fy = std::floor(sy);
  s.x0 = static_cast<int64_t>(fx);
  s.y0 = static_cast<int64_t>(fy);
  s.wx = sx - fx;
  s.wy = sy - fy;
  s.x1 = s.x0 + 1;
  s.y1 = s.y0 + 1;
  if (pad == Padding::kBorder) {
    s.x1 = std::min(s.x1, w - 1);
    s.y1 = std::min(s.y1, h - 1);
  }
  s.vx0 = s.x0 >= 0 && s.x0 < w;
  s.vx1 = s.x1 >= 0 && s.x1 < w;
  s.vy0 = s.y0 >= 0 && s.y0 < h;
  s.vy1 = s.y1 >= 0 && s.y1 < h;
  return s;
}

}  // namespace

Var apply_flow(const Var& source, const Var& flow, Padding pad) {
  const Shape& ss = source.shape();
  const Shape& fs = flow.shape();
  if (ss.size() != 4 || fs.size() != 4 || fs[1] != 2)
    fail(Errc::kShape, "apply_flow: expected source [N,C,H,W] and flow [N,2,H,W]");
  if (ss[0] != fs[0] || ss[2] != fs[2] || ss[3] != fs[3])
    fail(Errc::kShape, "apply_flow: size mismatch " + shape_str(ss) + " vs flow " + shape_str(fs));
  const int64_t n = ss[0], c = ss[1], h = ss[2], w = ss[3], hw = h * w;
  profile::record("apply_flow", 11 * source.value().numel(), source.value().numel() + flow.value().numel(),
                  source.value().numel());
  if (source.is_meta() || flow.is_meta()) return make_result(Tensor::meta(ss), {source, flow}, nullptr);
  if (!flow.value().all_finite()) fail(Errc::kNumeric, "apply_flow: non-finite flow");

  Tensor out(ss);
  const double* src = source.value().data();
  const double* fl = flow.value().data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t p = y * w + x;
        const Sample s = locate(static_cast<double>(x) + fl[b * 2 * hw + p],
                                static_cast<double>(y) + fl[b * 2 * hw + hw + p], w, h, pad);
        for (int64_t ch = 0; ch < c; ++ch) {
          const double* I = src + (b * c + ch) * hw;
          const double i00 = (s.vy0 && s.vx0) ? I[s.y0 * w + s.x0] : 0.0;
          const double i01 = (s.vy0 && s.vx1) ? I[s.y0 * w + s.x1] : 0.0;
          const double i10 = (s.vy1 && s.vx0) ? I[s.y1 * w + s.x0] : 0.0;
          const double i11 = (s.vy1 && s.vx1) ? I[s.y1 * w + s.x1] : 0.0;
          out[(b * c + ch) * hw + p] =
              (1 - s.wy) * ((1 - s.wx) * i00 + s.wx * i01) + s.wy * ((1 - s.wx) * i10 + s.wx * i11);
        }
      }

  return make_result(std::move(out), {source, flow}, [n, c, h, w, hw, pad](Node& self) {
    Node& sn = *self.parents[0];
    Node& fn = *self.parents[1];
    const bool gs = sn.requires_grad, gf = fn.requires_grad;
    const double* src = sn.value.data();
    const double* fl = fn.value.data();
    double* dsrc = gs ? sn.grad_buffer().data() : nullptr;
    double* dfl = gf ? fn.grad_buffer().data() : nullptr;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const int64_t p = y * w + x;
          const Sample s = locate(static_cast<double>(x) + fl[b * 2 * hw + p],
                                  static_cast<double>(y) + fl[b * 2 * hw + hw + p], w, h, pad);
          double du = 0, dv = 0;
          for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t base = (b * c + ch) * hw;
            const double g = self.grad[base + p];
            if (g == 0.0) continue;
            if (dsrc) {
              double* D = dsrc + base;
              if (s.vy0 && s.vx0) D[s.y0 * w + s.x0] += g * (1 - s.wy) * (1 - s.wx);
              if (s.vy0 && s.vx1) D[s.y0 * w + s.x1] += g * (1 - s.wy) * s.wx;
              if (s.vy1 && s.vx0) D[s.y1 * w + s.x0] += g * s.wy * (1 - s.wx);
              if (s.vy1 && s.vx1) D[s.y1 * w + s.x1] += g * s.wy * s.wx;
            }
            if (dfl) {
              const double* I = src + base;
              const double i00 = (s.vy0 && s.vx0) ? I[s.y0 * w + s.x0] : 0.0;
              const double i01 = (s.vy0 && s.vx1) ? I[s.y0 * w + s.x1] : 0.0;
              const double i10 = (s.vy1 && s.vx0) ? I[s.y1 * w + s.x0] : 0.0;
              const double i11 = (s.vy1 && s.vx1) ? I[s.y1 * w + s.x1] : 0.0;
              du += g * ((1 - s.wy) * (i01 - i00) + s.wy * (i11 - i10));
              dv += g * ((1 - s.wx) * (i10 - i00) + s.wx * (i11 - i01));
            }
          }
          if (dfl) {
            dfl[b * 2 * hw + p] += du * s.dsx;
            dfl[b * 2 * hw + hw + p] += dv * s.dsy;
          }
        }
  });
}

ImageTensor apply_flow(const ImageTensor& source, const FlowField& flow, Padding pad) {
  ag::NoGradGuard ng;
  const Var out = apply_flow(ops::constant(source.batched()), ops::constant(flow.batched()), pad);
  return ImageTensor::from_tensor(out.value(), 0);
}

double charbonnier(double x, double eps, double alpha) { return std::pow(x * x + eps * eps, alpha); }

int64_t second_order_term_count(int64_t h, int64_t w) {
  const auto pos = [](int64_t v) { return v > 0 ? v : 0; };
  return h * pos(w - 2) + pos(h - 2) * w + 2 * pos(h - 2) * pos(w - 2);
}

namespace {

// One representative offset per direction axis: (dy, dx).
constexpr int64_t kDirs[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};

}  // namespace

Var second_order_smooth_loss(const FlowPyramid& pyramid, CharbonnierParams params, SmoothReduction reduction) {
  pyramid.validate();
  if (!(params.eps > 0)) fail(Errc::kConfig, "charbonnier eps must be positive");
  if (!(params.alpha > 0 && params.alpha <= 1)) fail(Errc::kConfig, "charbonnier alpha must lie in (0, 1]");

  int64_t terms_all = 0, in_elems = 0;
  bool meta = false;
  for (const Var& f : pyramid.levels) {
    const Shape& s = f.shape();
    terms_all += s[0] * 2 * second_order_term_count(s[2], s[3]);
    in_elems += f.value().numel();
    meta = meta || f.is_meta();
  }
  profile::record("second_order_smooth", 8 * terms_all, in_elems, 1);
  if (meta) return make_result(Tensor::meta({1}), pyramid.levels, nullptr);

  const double eps2 = params.eps * params.eps, alpha = params.alpha;
  std::vector<double> level_scale;
  double total = 0;
  for (const Var& f : pyramid.levels) {
    const Shape& s = f.shape();
    const int64_t n = s[0], h = s[2], w = s[3], hw = h * w;
    const int64_t count = n * 2 * second_order_term_count(h, w);
    const double k = (reduction == SmoothReduction::kMeanPerLevel && count > 0) ? 1.0 / static_cast<double>(count) : 1.0;
    level_scale.push_back(k);
    const double* d = f.value().data();
    double acc = 0;
    for (int64_t pc = 0; pc < n * 2; ++pc) {
      const double* F = d + pc * hw;
      for (const auto& dir : kDirs) {
        const int64_t dy = dir[0], dx = dir[1];
        for (int64_t y = dy; y < h - dy; ++y)
          for (int64_t x = std::abs(dx); x < w - std::abs(dx); ++x) {
            const double sd = F[(y - dy) * w + (x - dx)] + F[(y + dy) * w + (x + dx)] - 2 * F[y * w + x];
            acc += std::pow(sd * sd + eps2, alpha);
          }
      }
    }
    total += k * acc;
  }

  return make_result(Tensor::scalar(total), pyramid.levels, [level_scale, eps2, alpha](Node& self) {
    const double go = self.grad[0];
    for (size_t li = 0; li < self.parents.size(); ++li) {
      Node& p = *self.parents[li];
      if (!p.requires_grad) continue;
      const Shape& s = p.value.shape();
      const int64_t n = s[0], h = s[2], w = s[3], hw = h * w;
      const double k = go * level_scale[li];
      const double* d = p.value.data();
      double* g = p.grad_buffer().data();
      for (int64_t pc = 0; pc < n * 2; ++pc) {
        const double* F = d + pc * hw;
        double* G = g + pc * hw;
        for (const auto& dir : kDirs) {
          const int64_t dy = dir[0], dx = dir[1];
          for (int64_t y = dy; y < h - dy; ++y)
            for (int64_t x = std::abs(dx); x < w - std::abs(dx); ++x) {
              const int64_t a = (y - dy) * w + (x - dx), b = (y + dy) * w + (x + dx), m = y * w + x;
              const double sd = F[a] + F[b] - 2 * F[m];
              const double dr = k * 2.0 * alpha * sd * std::pow(sd * sd + eps2, alpha - 1.0);
              G[a] += dr;
              G[b] += dr;
              G[m] -= 2.0 * dr;
            }
        }
      }
    }
  });
}

Var upsample_flow(const Var& flow) {
  const Shape& s = flow.shape();
  if (s.size() != 4 || s[1] != 2) fail(Errc::kShape, "upsample_flow: expected [N,2,H,W]");
  return ops::scale(ops::resize_bilinear(flow, 2 * s[2], 2 * s[3]), 2.0);
}

}  // namespace dmvton::warp
