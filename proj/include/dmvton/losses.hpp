#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dmvton/autograd.hpp"
#include "dmvton/warp.hpp"

namespace dmvton::losses {

using ag::Var;

struct LossWeights {
  double l_warp = 1.0;
  double per_warp = 0.2;
  double sec = 6.0;
  double dis = 0.04;
  double l_gen = 1.0;
  double per_gen = 0.2;

  void validate() const;  // finite and non-negative
  LossWeights scaled(double k) const;
};

// Fixed feature stages used by perceptual, FID and LPIPS-style distances.
class PerceptualExtractor {
 public:
  virtual ~PerceptualExtractor() = default;
  virtual std::vector<Var> features(const Var& x) const = 0;
  virtual std::string name() const = 0;
};

// Returns its input as the single stage.
class IdentityExtractor : public PerceptualExtractor {
 public:
  std::vector<Var> features(const Var& x) const override { return {x}; }
  std::string name() const override { return "identity"; }
};

// Seeded random CNN: three conv3x3 stride-2 + relu stages (3 -> 8 -> 16 -> 32).
class RandomConvExtractor : public PerceptualExtractor {
 public:
  static constexpr uint64_t kDefaultSeed = 20230717;
  explicit RandomConvExtractor(uint64_t seed = kDefaultSeed, int64_t in_channels = 3);
  std::vector<Var> features(const Var& x) const override;
  std::string name() const override;
  int64_t feature_dim() const { return widths_.back(); }

 private:
  uint64_t seed_;
  std::vector<int64_t> widths_;
  std::vector<Var> weights_;
  std::vector<Var> biases_;
};

// Scalar loss plus named component values (already weighted) for logging.
struct LossBreakdown {
  Var total;
  std::map<std::string, double> components;
  double total_value() const { return total.value()[0]; }
};

// Sum over stages of the mean absolute difference of features.
Var perceptual_loss(const Var& a, const Var& b, const PerceptualExtractor& phi);

// Quality gate: 1 for each sample where the teacher output is strictly closer
// to the target than the student output (mean absolute error).
std::vector<bool> distillation_gate(const Var& t, const Var& s, const Var& p);

struct DistillationResult {
  Var loss;
  double gate_fraction = 0;  // fraction of samples with an open gate
};

// Mean over the batch of gate_n * sum_i ||teacher_i[n] - student_i[n]||_F.
// Teacher features, t and s are treated as constants.
DistillationResult distillation_loss(const std::vector<Var>& teacher_feats, const std::vector<Var>& student_feats,
                                     const Var& t, const Var& s, const Var& p);

struct DistillationInputs {
  std::vector<Var> teacher_feats;
  std::vector<Var> student_feats;
  Var t, s, p;
};

struct WarpLossOptions {
  warp::CharbonnierParams charbonnier;
  warp::SmoothReduction reduction = warp::SmoothReduction::kMeanPerLevel;
};

// l_warp * mean|g_pred - p*m| + per_warp * perceptual(g_pred, p*m)
//   + sec * smoothness(flows) + dis * distillation.
// Terms with a zero weight are not evaluated; the distillation inputs are
// only needed when dis > 0.
LossBreakdown warp_stage_loss(const Var& g_pred, const Var& p, const Var& m_gt, const warp::FlowPyramid& flows,
                              const DistillationInputs* distill, const LossWeights& w,
                              const PerceptualExtractor& phi, const WarpLossOptions& opt = {});

// l_gen * mean|s - p| + per_gen * perceptual(s, p).
LossBreakdown gen_loss(const Var& s, const Var& p, const PerceptualExtractor& phi, const LossWeights& w);

}  // namespace dmvton::losses
