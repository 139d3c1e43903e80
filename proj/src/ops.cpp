#include "dmvton/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "dmvton/errors.hpp"
#include "dmvton/profile.hpp"

namespace dmvton::ops {

using ag::make_result;
using ag::Node;

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    fail(Errc::kShape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
}

void require_rank(const Var& x, int64_t r, const char* op) {
  if (x.value().rank() != r)
    fail(Errc::kShape, std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                           shape_str(x.shape()));
}

bool want(const Node& n, size_t i) { return n.parents[i] && n.parents[i]->requires_grad; }

template <class F, class DF>
Var unary(const Var& x, std::string_view name, F f, DF df) {
  const int64_t n = x.value().numel();
  profile::record(name, n, n, n);
  if (x.is_meta()) return make_result(Tensor::meta(x.shape()), {x}, nullptr);
  Tensor out(x.shape());
  const double* in = x.value().data();
  for (int64_t i = 0; i < n; ++i) out[i] = f(in[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    Node& p = *self.parents[0];
    Tensor& g = p.grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

Var reduce_scalar(const Var& x, std::string_view name, double factor) {
  const int64_t n = x.value().numel();
  profile::record(name, n, n, 1);
  if (x.is_meta()) return make_result(Tensor::meta({1}), {x}, nullptr);
  double s = 0;
  for (double v : x.value().span()) s += v;
  return make_result(Tensor::scalar(s * factor), {x}, [factor](Node& self) {
    Node& p = *self.parents[0];
    Tensor& g = p.grad_buffer();
    const double go = self.grad[0] * factor;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += go;
  });
}

}  // namespace

Var constant(Tensor t) { return Var(std::move(t), false); }

Var detach(const Var& x) { return Var(x.value(), false); }

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  const int64_t n = a.value().numel();
  profile::record("add", n, 2 * n, n);
  if (a.is_meta() || b.is_meta()) return make_result(Tensor::meta(a.shape()), {a, b}, nullptr);
  Tensor out(a.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (size_t k = 0; k < 2; ++k) {
      if (!want(self, k)) continue;
      Tensor& g = self.parents[k]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  const int64_t n = a.value().numel();
  profile::record("sub", n, 2 * n, n);
  if (a.is_meta() || b.is_meta()) return make_result(Tensor::meta(a.shape()), {a, b}, nullptr);
  Tensor out(a.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (want(self, 0)) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (want(self, 1)) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  const int64_t n = a.value().numel();
  profile::record("mul", n, 2 * n, n);
  if (a.is_meta() || b.is_meta()) return make_result(Tensor::meta(a.shape()), {a, b}, nullptr);
  Tensor out(a.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (want(self, 0)) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (want(self, 1)) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double k) {
  return unary(
      a, "scale", [k](double v) { return v * k; }, [k](double, double) { return k; });
}

Var add_scalar(const Var& a, double k) {
  return unary(
      a, "add_scalar", [k](double v) { return v + k; }, [](double, double) { return 1.0; });
}

Var one_minus(const Var& a) {
  return unary(
      a, "one_minus", [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

Var relu(const Var& x) {
  return unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var relu6(const Var& x) {
  return unary(
      x, "relu6", [](double v) { return std::clamp(v, 0.0, 6.0); },
      [](double v, double) { return (v > 0 && v < 6) ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, "leaky_relu", [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Var tanh(const Var& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var square(const Var& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var abs(const Var& x) {
  return unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var rsqrt(const Var& x, double eps) {
  return unary(
      x, "rsqrt", [eps](double v) { return 1.0 / std::sqrt(v + eps); },
      [](double, double y) { return -0.5 * y * y * y; });
}

Var sum(const Var& x) { return reduce_scalar(x, "sum", 1.0); }

Var mean(const Var& x) {
  return reduce_scalar(x, "mean", 1.0 / static_cast<double>(x.value().numel()));
}

Var l2_norm(const Var& x) {
  const int64_t n = x.value().numel();
  profile::record("l2_norm", 2 * n, n, 1);
  if (x.is_meta()) return make_result(Tensor::meta({1}), {x}, nullptr);
  double s = 0;
  for (double v : x.value().span()) s += v * v;
  const double norm = std::sqrt(s);
  return make_result(Tensor::scalar(norm), {x}, [](Node& self) {
    const double norm = self.value[0];
    if (norm == 0.0) return;
    Node& p = *self.parents[0];
    Tensor& g = p.grad_buffer();
    const double k = self.grad[0] / norm;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += k * p.value[i];
  });
}

Var mean_abs_diff(const Var& a, const Var& b) { return mean(abs(sub(a, b))); }

namespace {

struct ConvGeom {
  int64_t n, cin, h, w, cout, k, ho, wo, groups, cig, cog, stride, pad;
};

ConvGeom conv_geom(const Var& x, const Var& w, const Conv2dOptions& opt) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  ConvGeom g{};
  g.n = x.shape()[0];
  g.cin = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.cout = w.shape()[0];
  g.k = w.shape()[2];
  g.groups = opt.groups;
  g.stride = opt.stride;
  g.pad = opt.pad;
  if (w.shape()[3] != g.k) fail(Errc::kShape, "conv2d: only square kernels are supported");
  if (opt.groups < 1 || g.cin % opt.groups || g.cout % opt.groups)
    fail(Errc::kShape, "conv2d: channels not divisible by groups");
  g.cig = g.cin / g.groups;
  g.cog = g.cout / g.groups;
  if (w.shape()[1] != g.cig)
    fail(Errc::kShape, "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                           shape_str(x.shape()));
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.ho <= 0 || g.wo <= 0) fail(Errc::kShape, "conv2d: empty output for " + shape_str(x.shape()));
  return g;
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

// col [cig*k*k, ho*wo] for group `grp` of image x (pointer at sample start).
void im2col(const double* x, const ConvGeom& g, int64_t grp, double* col) {
  const int64_t hw = g.ho * g.wo;
  for (int64_t c = 0; c < g.cig; ++c) {
    const double* xc = x + (grp * g.cig + c) * g.h * g.w;
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          double* r = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(r, r + g.wo, 0.0);
            continue;
          }
          const double* xr = xc + iy * g.w;
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            r[ox] = (ix >= 0 && ix < g.w) ? xr[ix] : 0.0;
          }
        }
      }
  }
}

void col2im(const double* col, const ConvGeom& g, int64_t grp, double* dx) {
  const int64_t hw = g.ho * g.wo;
  for (int64_t c = 0; c < g.cig; ++c) {
    double* xc = dx + (grp * g.cig + c) * g.h * g.w;
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const double* r = row + oy * g.wo;
          double* xr = xc + iy * g.w;
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) xr[ix] += r[ox];
          }
        }
      }
  }
}

// Direct depthwise path (one input channel per group): avoids tiny GEMMs.
void depthwise_forward(const double* x, const double* w, const ConvGeom& g, double* out) {
  for (int64_t oc = 0; oc < g.cout; ++oc) {
    const int64_t ic = oc / g.cog;
    const double* xc = x + ic * g.h * g.w;
    const double* wk = w + oc * g.k * g.k;
    double* o = out + oc * g.ho * g.wo;
    for (int64_t oy = 0; oy < g.ho; ++oy)
      for (int64_t ox = 0; ox < g.wo; ++ox) {
        double acc = 0;
        for (int64_t ky = 0; ky < g.k; ++ky) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t kx = 0; kx < g.k; ++kx) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            acc += wk[ky * g.k + kx] * xc[iy * g.w + ix];
          }
        }
        o[oy * g.wo + ox] = acc;
      }
  }
}

void depthwise_backward(const double* x, const double* w, const double* gout, const ConvGeom& g,
                        double* dx, double* dw) {
  for (int64_t oc = 0; oc < g.cout; ++oc) {
    const int64_t ic = oc / g.cog;
    const double* xc = x + ic * g.h * g.w;
    const double* wk = w + oc * g.k * g.k;
    const double* go = gout + oc * g.ho * g.wo;
    double* dxc = dx ? dx + ic * g.h * g.w : nullptr;
    double* dwk = dw ? dw + oc * g.k * g.k : nullptr;
    for (int64_t oy = 0; oy < g.ho; ++oy)
      for (int64_t ox = 0; ox < g.wo; ++ox) {
        const double gv = go[oy * g.wo + ox];
        if (gv == 0.0) continue;
        for (int64_t ky = 0; ky < g.k; ++ky) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t kx = 0; kx < g.k; ++kx) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            if (dwk) dwk[ky * g.k + kx] += gv * xc[iy * g.w + ix];
            if (dxc) dxc[iy * g.w + ix] += gv * wk[ky * g.k + kx];
          }
        }
      }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dOptions opt) {
  const ConvGeom g = conv_geom(x, w, opt);
  const bool has_bias = b.defined();
  if (has_bias && (b.value().rank() != 1 || b.shape()[0] != g.cout))
    fail(Errc::kShape, "conv2d: bias shape " + shape_str(b.shape()));
  const int64_t hw = g.ho * g.wo;
  const int64_t out_elems = g.n * g.cout * hw;
  int64_t flops = 2 * g.cout * g.cig * g.k * g.k * hw * g.n;
  if (has_bias) flops += out_elems;
  profile::record("conv2d", flops, x.value().numel(), out_elems);

  Shape out_shape{g.n, g.cout, g.ho, g.wo};
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  if (x.is_meta()) return make_result(Tensor::meta(out_shape), inputs, nullptr);

  Tensor out(out_shape);
  const int64_t ckk = g.cig * g.k * g.k;
  const bool depthwise = g.cig == 1 && g.groups > 1;
  std::vector<double> col;
  if (!is_pointwise(g) && !depthwise) col.resize(static_cast<size_t>(ckk * hw));
  for (int64_t n = 0; n < g.n; ++n) {
    const double* xn = x.value().data() + n * g.cin * g.h * g.w;
    double* on = out.data() + n * g.cout * hw;
    if (depthwise) {
      depthwise_forward(xn, w.value().data(), g, on);
    } else {
      for (int64_t grp = 0; grp < g.groups; ++grp) {
        const double* colp = xn + grp * g.cig * hw;
        if (!is_pointwise(g)) {
          im2col(xn, g, grp, col.data());
          colp = col.data();
        }
        CMapR W(w.value().data() + grp * g.cog * ckk, g.cog, ckk);
        CMapR C(colp, ckk, hw);
        MapR O(on + grp * g.cog * hw, g.cog, hw);
        O.noalias() = W * C;
      }
    }
    if (has_bias)
      for (int64_t o = 0; o < g.cout; ++o) {
        const double bv = b.value()[o];
        double* p = on + o * hw;
        for (int64_t i = 0; i < hw; ++i) p[i] += bv;
      }
  }

  return make_result(std::move(out), inputs, [g, has_bias, depthwise](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    const bool gx = want(self, 0), gw = want(self, 1);
    const bool gb = has_bias && want(self, 2);
    const int64_t hw = g.ho * g.wo;
    const int64_t ckk = g.cig * g.k * g.k;
    double* dx = gx ? self.parents[0]->grad_buffer().data() : nullptr;
    double* dw = gw ? self.parents[1]->grad_buffer().data() : nullptr;
    std::vector<double> col, dcol;
    if (!depthwise) {
      col.resize(static_cast<size_t>(ckk * hw));
      dcol.resize(static_cast<size_t>(ckk * hw));
    }
    for (int64_t n = 0; n < g.n; ++n) {
      const double* xn = xv.data() + n * g.cin * g.h * g.w;
      const double* gn = self.grad.data() + n * g.cout * hw;
      double* dxn = dx ? dx + n * g.cin * g.h * g.w : nullptr;
      if (depthwise) {
        depthwise_backward(xn, wv.data(), gn, g, dxn, dw);
      } else {
        for (int64_t grp = 0; grp < g.groups; ++grp) {
          CMapR GO(gn + grp * g.cog * hw, g.cog, hw);
          if (gw) {
            const double* colp = xn + grp * g.cig * hw;
            if (!is_pointwise(g)) {
              im2col(xn, g, grp, col.data());
              colp = col.data();
            }
            MapR DW(dw + grp * g.cog * ckk, g.cog, ckk);
            DW.noalias() += GO * CMapR(colp, ckk, hw).transpose();
          }
          if (gx) {
            CMapR W(wv.data() + grp * g.cog * ckk, g.cog, ckk);
            if (is_pointwise(g)) {
              MapR DX(dxn + grp * g.cig * hw, ckk, hw);
              DX.noalias() += W.transpose() * GO;
            } else {
              MapR DC(dcol.data(), ckk, hw);
              DC.noalias() = W.transpose() * GO;
              col2im(dcol.data(), g, grp, dxn);
            }
          }
        }
      }
      if (gb) {
        Tensor& db = self.parents[2]->grad_buffer();
        for (int64_t o = 0; o < g.cout; ++o) {
          double s = 0;
          for (int64_t i = 0; i < hw; ++i) s += gn[o * hw + i];
          db[o] += s;
        }
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const int64_t n = x.shape()[0], d = x.shape()[1], o = w.shape()[0];
  if (w.shape()[1] != d) fail(Errc::kShape, "linear: weight/input mismatch");
  const bool has_bias = b.defined();
  if (has_bias && (b.value().rank() != 1 || b.shape()[0] != o))
    fail(Errc::kShape, "linear: bias shape " + shape_str(b.shape()));
  profile::record("linear", 2 * o * d * n + (has_bias ? o * n : 0), x.value().numel(), o * n);
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  if (x.is_meta()) return make_result(Tensor::meta({n, o}), inputs, nullptr);
  Tensor out({n, o});
  MapR(out.data(), n, o).noalias() =
      CMapR(x.value().data(), n, d) * CMapR(w.value().data(), o, d).transpose();
  if (has_bias)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < o; ++j) out[i * o + j] += b.value()[j];
  return make_result(std::move(out), inputs, [n, d, o, has_bias](Node& self) {
    CMapR G(self.grad.data(), n, o);
    if (want(self, 0))
      MapR(self.parents[0]->grad_buffer().data(), n, d).noalias() +=
          G * CMapR(self.parents[1]->value.data(), o, d);
    if (want(self, 1))
      MapR(self.parents[1]->grad_buffer().data(), o, d).noalias() +=
          G.transpose() * CMapR(self.parents[0]->value.data(), n, d);
    if (has_bias && want(self, 2)) {
      Tensor& db = self.parents[2]->grad_buffer();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < o; ++j) db[j] += self.grad[i * o + j];
    }
  });
}

Var scale_channels(const Var& x, const Var& s) {
  require_rank(x, 4, "scale_channels input");
  require_rank(s, 2, "scale_channels scale");
  const int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (s.shape()[0] != n || s.shape()[1] != c)
    fail(Errc::kShape, "scale_channels: scale " + shape_str(s.shape()) + " vs input " +
                           shape_str(x.shape()));
  profile::record("scale_channels", x.value().numel(), x.value().numel() + n * c,
                  x.value().numel());
  if (x.is_meta()) return make_result(Tensor::meta(x.shape()), {x, s}, nullptr);
  Tensor out(x.shape());
  for (int64_t i = 0; i < n * c; ++i) {
    const double k = s.value()[i];
    const double* in = x.value().data() + i * hw;
    double* o = out.data() + i * hw;
    for (int64_t j = 0; j < hw; ++j) o[j] = in[j] * k;
  }
  return make_result(std::move(out), {x, s}, [n, c, hw](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& sv = self.parents[1]->value;
    const bool gx = want(self, 0), gs = want(self, 1);
    for (int64_t i = 0; i < n * c; ++i) {
      const double* go = self.grad.data() + i * hw;
      if (gx) {
        double* dx = self.parents[0]->grad_buffer().data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) dx[j] += go[j] * sv[i];
      }
      if (gs) {
        double acc = 0;
        const double* xi = xv.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) acc += go[j] * xi[j];
        self.parents[1]->grad_buffer()[i] += acc;
      }
    }
  });
}

Var mul_mask(const Var& x, const Var& m) {
  require_rank(x, 4, "mul_mask input");
  require_rank(m, 4, "mul_mask mask");
  const int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (m.shape()[0] != n || m.shape()[1] != 1 || m.shape()[2] != x.shape()[2] || m.shape()[3] != x.shape()[3])
    fail(Errc::kShape, "mul_mask: mask " + shape_str(m.shape()) + " vs input " + shape_str(x.shape()));
  profile::record("mul_mask", x.value().numel(), x.value().numel() + m.value().numel(), x.value().numel());
  if (x.is_meta() || m.is_meta()) return make_result(Tensor::meta(x.shape()), {x, m}, nullptr);
  Tensor out(x.shape());
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t j = 0; j < hw; ++j)
        out[(b * c + ch) * hw + j] = x.value()[(b * c + ch) * hw + j] * m.value()[b * hw + j];
  return make_result(std::move(out), {x, m}, [n, c, hw](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& mv = self.parents[1]->value;
    const bool gx = want(self, 0), gm = want(self, 1);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t j = 0; j < hw; ++j) {
          const int64_t i = (b * c + ch) * hw + j;
          if (gx) self.parents[0]->grad_buffer()[i] += self.grad[i] * mv[b * hw + j];
          if (gm) self.parents[1]->grad_buffer()[b * hw + j] += self.grad[i] * xv[i];
        }
  });
}

Var add_channel_bias(const Var& x, const Var& b) {
  require_rank(x, 4, "add_channel_bias input");
  const int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (b.value().rank() != 1 || b.shape()[0] != c)
    fail(Errc::kShape, "add_channel_bias: bias " + shape_str(b.shape()));
  profile::record("add_channel_bias", x.value().numel(), x.value().numel(), x.value().numel());
  if (x.is_meta()) return make_result(Tensor::meta(x.shape()), {x, b}, nullptr);
  Tensor out(x.shape());
  for (int64_t i = 0; i < n * c; ++i) {
    const double bv = b.value()[i % c];
    for (int64_t j = 0; j < hw; ++j) out[i * hw + j] = x.value()[i * hw + j] + bv;
  }
  return make_result(std::move(out), {x, b}, [n, c, hw](Node& self) {
    if (want(self, 0)) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (want(self, 1)) {
      Tensor& db = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < n * c; ++i) {
        double s = 0;
        for (int64_t j = 0; j < hw; ++j) s += self.grad[i * hw + j];
        db[i % c] += s;
      }
    }
  });
}

namespace {

struct Tap {
  int64_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int64_t in, int64_t out) {
  std::vector<Tap> taps(static_cast<size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int64_t i0 = static_cast<int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Var resize_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "resize_bilinear");
  if (out_h <= 0 || out_w <= 0) fail(Errc::kShape, "resize_bilinear: empty target size");
  const int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const Shape out_shape{n, c, out_h, out_w};
  const int64_t out_elems = n * c * out_h * out_w;
  profile::record("resize_bilinear", 11 * out_elems, x.value().numel(), out_elems);
  if (x.is_meta()) return make_result(Tensor::meta(out_shape), {x}, nullptr);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  Tensor out(out_shape);
  for (int64_t p = 0; p < n * c; ++p) {
    const double* in = x.value().data() + p * h * w;
    double* o = out.data() + p * out_h * out_w;
    for (int64_t y = 0; y < out_h; ++y) {
      const Tap& a = ty[static_cast<size_t>(y)];
      for (int64_t xx = 0; xx < out_w; ++xx) {
        const Tap& b = tx[static_cast<size_t>(xx)];
        const double top = (1 - b.w1) * in[a.i0 * w + b.i0] + b.w1 * in[a.i0 * w + b.i1];
        const double bot = (1 - b.w1) * in[a.i1 * w + b.i0] + b.w1 * in[a.i1 * w + b.i1];
        o[y * out_w + xx] = (1 - a.w1) * top + a.w1 * bot;
      }
    }
  }
  return make_result(std::move(out), {x}, [n, c, h, w, out_h, out_w, ty, tx](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t p = 0; p < n * c; ++p) {
      double* d = g.data() + p * h * w;
      const double* go = self.grad.data() + p * out_h * out_w;
      for (int64_t y = 0; y < out_h; ++y) {
        const Tap& a = ty[static_cast<size_t>(y)];
        for (int64_t xx = 0; xx < out_w; ++xx) {
          const Tap& b = tx[static_cast<size_t>(xx)];
          const double gv = go[y * out_w + xx];
          d[a.i0 * w + b.i0] += gv * (1 - a.w1) * (1 - b.w1);
          d[a.i0 * w + b.i1] += gv * (1 - a.w1) * b.w1;
          d[a.i1 * w + b.i0] += gv * a.w1 * (1 - b.w1);
          d[a.i1 * w + b.i1] += gv * a.w1 * b.w1;
        }
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const Shape out_shape{n, c, 2 * h, 2 * w};
  profile::record("upsample_nearest2x", 0, x.value().numel(), 4 * x.value().numel());
  if (x.is_meta()) return make_result(Tensor::meta(out_shape), {x}, nullptr);
  Tensor out(out_shape);
  for (int64_t p = 0; p < n * c; ++p)
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = x.value()[(p * h + y / 2) * w + xx / 2];
  return make_result(std::move(out), {x}, [n, c, h, w](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t p = 0; p < n * c; ++p)
      for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx)
          g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
  });
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) fail(Errc::kShape, "concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  if (s0.size() != 4) fail(Errc::kShape, "concat_channels: expected NCHW");
  int64_t ctot = 0;
  bool meta = false;
  for (const Var& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      fail(Errc::kShape, "concat_channels: incompatible " + shape_str(s) + " vs " + shape_str(s0));
    ctot += s[1];
    meta = meta || v.is_meta();
  }
  const int64_t n = s0[0], hw = s0[2] * s0[3];
  const Shape out_shape{n, ctot, s0[2], s0[3]};
  profile::record("concat", 0, n * ctot * hw, n * ctot * hw);
  std::vector<Var> inputs(xs.begin(), xs.end());
  if (meta) return make_result(Tensor::meta(out_shape), inputs, nullptr);
  Tensor out(out_shape);
  std::vector<int64_t> offs;
  int64_t off = 0;
  for (const Var& v : xs) {
    const int64_t c = v.shape()[1];
    offs.push_back(off);
    for (int64_t b = 0; b < n; ++b)
      std::copy_n(v.value().data() + b * c * hw, c * hw, out.data() + (b * ctot + off) * hw);
    off += c;
  }
  return make_result(std::move(out), inputs, [offs, n, hw, ctot](Node& self) {
    for (size_t k = 0; k < self.parents.size(); ++k) {
      if (!want(self, k)) continue;
      Tensor& g = self.parents[k]->grad_buffer();
      const int64_t c = g.shape()[1];
      for (int64_t b = 0; b < n; ++b) {
        const double* src = self.grad.data() + (b * ctot + offs[k]) * hw;
        double* dst = g.data() + b * c * hw;
        for (int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

Var concat_channels(std::initializer_list<Var> xs) {
  return concat_channels(std::span<const Var>(xs.begin(), xs.size()));
}

Var slice_channels(const Var& x, int64_t begin, int64_t end) {
  require_rank(x, 4, "slice_channels");
  const int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (begin < 0 || end > c || begin >= end)
    fail(Errc::kShape, "slice_channels: bad range for " + shape_str(x.shape()));
  const int64_t cs = end - begin;
  const Shape out_shape{n, cs, x.shape()[2], x.shape()[3]};
  profile::record("slice", 0, n * cs * hw, n * cs * hw);
  if (x.is_meta()) return make_result(Tensor::meta(out_shape), {x}, nullptr);
  Tensor out(out_shape);
  for (int64_t b = 0; b < n; ++b)
    std::copy_n(x.value().data() + (b * c + begin) * hw, cs * hw, out.data() + b * cs * hw);
  return make_result(std::move(out), {x}, [n, c, hw, begin, cs](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t b = 0; b < n; ++b)
      for (int64_t i = 0; i < cs * hw; ++i) g[(b * c + begin) * hw + i] += self.grad[b * cs * hw + i];
  });
}

Var concat_batch(std::span<const Var> xs) {
  if (xs.empty()) fail(Errc::kShape, "concat_batch: no inputs");
  Shape s0 = xs[0].shape();
  int64_t ntot = 0;
  bool meta = false;
  for (const Var& v : xs) {
    Shape s = v.shape();
    if (s.size() != s0.size() || !std::equal(s.begin() + 1, s.end(), s0.begin() + 1))
      fail(Errc::kShape, "concat_batch: incompatible shapes");
    ntot += s[0];
    meta = meta || v.is_meta();
  }
  Shape out_shape = s0;
  out_shape[0] = ntot;
  const int64_t per = numel_of(s0) / std::max<int64_t>(s0[0], 1);
  profile::record("concat", 0, ntot * per, ntot * per);
  std::vector<Var> inputs(xs.begin(), xs.end());
  if (meta) return make_result(Tensor::meta(out_shape), inputs, nullptr);
  Tensor out(out_shape);
  int64_t off = 0;
  std::vector<int64_t> offs;
  for (const Var& v : xs) {
    offs.push_back(off);
    std::copy_n(v.value().data(), v.value().numel(), out.data() + off);
    off += v.value().numel();
  }
  return make_result(std::move(out), inputs, [offs](Node& self) {
    for (size_t k = 0; k < self.parents.size(); ++k) {
      if (!want(self, k)) continue;
      Tensor& g = self.parents[k]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[offs[k] + i];
    }
  });
}

Var batch_slice(const Var& x, int64_t n) {
  Shape s = x.shape();
  if (s.empty() || n < 0 || n >= s[0]) fail(Errc::kShape, "batch_slice: index out of range");
  const int64_t per = x.value().numel() / s[0];
  s[0] = 1;
  profile::record("slice", 0, per, per);
  if (x.is_meta()) return make_result(Tensor::meta(s), {x}, nullptr);
  Tensor out(s);
  std::copy_n(x.value().data() + n * per, per, out.data());
  return make_result(std::move(out), {x}, [n, per](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < per; ++i) g[n * per + i] += self.grad[i];
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  profile::record("global_avg_pool", x.value().numel(), x.value().numel(), n * c);
  if (x.is_meta()) return make_result(Tensor::meta({n, c}), {x}, nullptr);
  Tensor out({n, c});
  for (int64_t i = 0; i < n * c; ++i) {
    double s = 0;
    for (int64_t j = 0; j < hw; ++j) s += x.value()[i * hw + j];
    out[i] = s / static_cast<double>(hw);
  }
  return make_result(std::move(out), {x}, [n, c, hw](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < n * c; ++i) {
      const double gv = self.grad[i] / static_cast<double>(hw);
      for (int64_t j = 0; j < hw; ++j) g[i * hw + j] += gv;
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  if (numel_of(shape) != x.value().numel())
    fail(Errc::kShape, "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  profile::record("reshape", 0, x.value().numel(), x.value().numel());
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var sum_last_axis(const Var& x) {
  Shape s = x.shape();
  if (s.empty()) fail(Errc::kShape, "sum_last_axis: rank 0");
  const int64_t last = s.back();
  s.pop_back();
  if (s.empty()) s.push_back(1);
  const int64_t rows = numel_of(s);
  profile::record("sum_last_axis", x.value().numel(), x.value().numel(), rows);
  if (x.is_meta()) return make_result(Tensor::meta(s), {x}, nullptr);
  Tensor out(s);
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0;
    for (int64_t j = 0; j < last; ++j) acc += x.value()[r * last + j];
    out[r] = acc;
  }
  return make_result(std::move(out), {x}, [rows, last](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < last; ++j) g[r * last + j] += self.grad[r];
  });
}

Var map_unary(const Var& x, std::string_view name, std::function<double(double)> f,
              std::function<double(double)> df) {
  if (profile::tracing())
    fail(Errc::kUnsupported, "unsupported layer type for profiling: " + std::string(name));
  if (x.is_meta()) fail(Errc::kUnsupported, "map_unary on meta tensor: " + std::string(name));
  return unary(
      x, name, [f](double v) { return f(v); }, [df](double v, double) { return df(v); });
}

}  // namespace dmvton::ops
