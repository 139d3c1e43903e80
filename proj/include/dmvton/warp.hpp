#pragma once

#include <span>
#include <vector>

#include "dmvton/autograd.hpp"
#include "dmvton/image.hpp"

// Appearance-flow warping and flow regularisation.
//
// Flows are [N, 2, H, W] tensors holding (u, v) displacements in pixels of
// the level they live on. Warping is backward (gather):
//   out(x) = bilinear(source, x + f(x)).
namespace dmvton::warp {

using ag::Var;

enum class Padding { kZeros, kBorder };

// Single flow raster (one sample) with strong typing for file/API use.
class FlowField {
 public:
  FlowField(int64_t height, int64_t width);  // zero flow
  FlowField(int64_t height, int64_t width, std::vector<double> u, std::vector<double> v);
  static FlowField from_tensor(const Tensor& t, int64_t n = 0);

  int64_t height() const { return h_; }
  int64_t width() const { return w_; }
  double u(int64_t y, int64_t x) const { return u_[static_cast<size_t>(y * w_ + x)]; }
  double v(int64_t y, int64_t x) const { return v_[static_cast<size_t>(y * w_ + x)]; }
  Tensor batched() const;  // [1, 2, H, W]

 private:
  int64_t h_, w_;
  std::vector<double> u_, v_;
};

// Coarsest level first; every level doubles the previous spatial size.
struct FlowPyramid {
  std::vector<Var> levels;
  void validate() const;
};

// Differentiable w.r.t. both source and flow. Non-finite flow throws kNumeric.
Var apply_flow(const Var& source, const Var& flow, Padding pad = Padding::kZeros);
ImageTensor apply_flow(const ImageTensor& source, const FlowField& flow, Padding pad = Padding::kZeros);

struct CharbonnierParams {
  double eps = 1e-3;
  double alpha = 0.45;
};

// (x^2 + eps^2)^alpha
double charbonnier(double x, double eps = 1e-3, double alpha = 0.45);

enum class SmoothReduction {
  kSum,           // plain sum over levels, points, directions and channels
  kMeanPerLevel,  // each level's sum divided by its term count, then summed
};

// Second-order smoothness over horizontal, vertical and both diagonal
// neighbourhoods, applied to u and v separately. Points whose neighbours
// fall off the grid contribute nothing.
Var second_order_smooth_loss(const FlowPyramid& pyramid, CharbonnierParams params = {},
                             SmoothReduction reduction = SmoothReduction::kSum);

// Terms contributed per channel by an h x w level.
int64_t second_order_term_count(int64_t h, int64_t w);

// 2x bilinear upsample with displacements doubled.
Var upsample_flow(const Var& flow);

}  // namespace dmvton::warp
