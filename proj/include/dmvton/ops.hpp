#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "dmvton/autograd.hpp"

// Differentiable tensor operations. Image-like tensors are NCHW.
//
// Every op reports its cost to the active profile trace:
//   conv        2*Cout*(Cin/groups)*Kh*Kw*Hout*Wout (+ Cout*Hout*Wout with bias)
//   linear      2*O*D*N (+ O*N with bias)
//   elementwise output element count
//   bilinear    11 per output element
//   copies      0 (concat, slice, reshape, nearest upsample)
// and accepts meta inputs, in which case only the output shape is produced.
namespace dmvton::ops {

using ag::Var;

Var constant(Tensor t);
Var detach(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double k);
Var add_scalar(const Var& a, double k);
Var one_minus(const Var& a);

Var relu(const Var& x);
Var relu6(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var square(const Var& x);
Var abs(const Var& x);
Var rsqrt(const Var& x, double eps);

Var sum(const Var& x);
Var mean(const Var& x);
// Frobenius norm; the subgradient at 0 is taken as 0.
Var l2_norm(const Var& x);
Var mean_abs_diff(const Var& a, const Var& b);

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

// x [N,Cin,H,W], w [Cout,Cin/groups,K,K], b [Cout] or undefined.
Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dOptions opt);
// x [N,D], w [O,D], b [O] or undefined.
Var linear(const Var& x, const Var& w, const Var& b);

// x [N,C,H,W] * s [N,C] broadcast over space.
Var scale_channels(const Var& x, const Var& s);
// x [N,C,H,W] * m [N,1,H,W] broadcast over channels.
Var mul_mask(const Var& x, const Var& m);
// x [N,C,H,W] + b [C].
Var add_channel_bias(const Var& x, const Var& b);

// Half-pixel-centre bilinear resize with edge clamping.
Var resize_bilinear(const Var& x, int64_t out_h, int64_t out_w);
Var upsample_nearest2x(const Var& x);

Var concat_channels(std::span<const Var> xs);
Var concat_channels(std::initializer_list<Var> xs);
Var slice_channels(const Var& x, int64_t begin, int64_t end);
Var concat_batch(std::span<const Var> xs);
Var batch_slice(const Var& x, int64_t n);

// [N,C,H,W] -> [N,C]
Var global_avg_pool(const Var& x);
Var reshape(const Var& x, Shape shape);
Var sum_last_axis(const Var& x);

// User-supplied elementwise function. It has no known FLOP cost, so it
// cannot be profiled: calling it under an active trace throws kUnsupported.
Var map_unary(const Var& x, std::string_view name, std::function<double(double)> f,
              std::function<double(double)> df);

}  // namespace dmvton::ops
