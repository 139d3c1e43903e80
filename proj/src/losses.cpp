#include "dmvton/losses.hpp"

#include <cmath>
#include <random>

#include "dmvton/errors.hpp"
#include "dmvton/ops.hpp"

namespace dmvton::losses {

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {{"l_warp", l_warp}, {"per_warp", per_warp}, {"sec", sec},
                                                {"dis", dis},       {"l_gen", l_gen},       {"per_gen", per_gen}};
  for (const auto& [name, v] : all)
    if (!std::isfinite(v) || v < 0)
      fail(Errc::kConfig, std::string("loss weight ") + name + " must be finite and non-negative");
}

LossWeights LossWeights::scaled(double k) const {
  return {l_warp * k, per_warp * k, sec * k, dis * k, l_gen * k, per_gen * k};
}

RandomConvExtractor::RandomConvExtractor(uint64_t seed, int64_t in_channels)
    : seed_(seed), widths_{in_channels, 8, 16, 32} {
  std::mt19937_64 rng(seed);
  for (size_t i = 0; i + 1 < widths_.size(); ++i) {
    const int64_t in = widths_[i], out = widths_[i + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w({out, in, 3, 3});
    for (int64_t k = 0; k < w.numel(); ++k) w[k] = dist(rng);
    Tensor b({out});
    for (int64_t k = 0; k < out; ++k) b[k] = 0.1 * dist(rng);
    weights_.push_back(ops::constant(std::move(w)));
    biases_.push_back(ops::constant(std::move(b)));
  }
}

std::vector<Var> RandomConvExtractor::features(const Var& x) const {
  std::vector<Var> out;
  Var h = x;
  for (size_t i = 0; i < weights_.size(); ++i) {
    h = ops::relu(ops::conv2d(h, weights_[i], biases_[i], {2, 1, 1}));
    out.push_back(h);
  }
  return out;
}

std::string RandomConvExtractor::name() const { return "random-conv(seed=" + std::to_string(seed_) + ")"; }

Var perceptual_loss(const Var& a, const Var& b, const PerceptualExtractor& phi) {
  if (a.shape() != b.shape())
    fail(Errc::kShape, "perceptual loss: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto fa = phi.features(a);
  const auto fb = phi.features(b);
  Var total;
  for (size_t i = 0; i < fa.size(); ++i) {
    const Var d = ops::mean_abs_diff(fa[i], fb[i]);
    total = total.defined() ? ops::add(total, d) : d;
  }
  return total.defined() ? total : ops::constant(Tensor::scalar(0));
}

std::vector<bool> distillation_gate(const Var& t, const Var& s, const Var& p) {
  if (t.shape() != p.shape() || s.shape() != p.shape())
    fail(Errc::kShape, "distillation gate: t, s and p must share a shape");
  const int64_t n = p.shape()[0];
  const int64_t per = p.value().numel() / n;
  std::vector<bool> gate(static_cast<size_t>(n));
  for (int64_t b = 0; b < n; ++b) {
    double et = 0, es = 0;
    for (int64_t i = 0; i < per; ++i) {
      et += std::abs(t.value()[b * per + i] - p.value()[b * per + i]);
      es += std::abs(s.value()[b * per + i] - p.value()[b * per + i]);
    }
    gate[static_cast<size_t>(b)] = et / static_cast<double>(per) < es / static_cast<double>(per);
  }
  return gate;
}

DistillationResult distillation_loss(const std::vector<Var>& teacher_feats, const std::vector<Var>& student_feats,
                                     const Var& t, const Var& s, const Var& p) {
  if (teacher_feats.size() != student_feats.size())
    fail(Errc::kShape, "distillation: teacher has " + std::to_string(teacher_feats.size()) + " levels, student " +
                           std::to_string(student_feats.size()));
  for (size_t i = 0; i < teacher_feats.size(); ++i)
    if (teacher_feats[i].shape() != student_feats[i].shape())
      fail(Errc::kShape, "distillation: level " + std::to_string(i) + " mismatch " +
                             shape_str(teacher_feats[i].shape()) + " vs " + shape_str(student_feats[i].shape()));
  const auto gate = distillation_gate(t, s, p);
  const int64_t n = static_cast<int64_t>(gate.size());
  DistillationResult r;
  int64_t open = 0;
  Var total;
  for (int64_t b = 0; b < n; ++b) {
    if (!gate[static_cast<size_t>(b)]) continue;
    ++open;
    for (size_t i = 0; i < teacher_feats.size(); ++i) {
      const Var tf = ops::detach(n == 1 ? teacher_feats[i] : ops::batch_slice(teacher_feats[i], b));
      const Var sf = n == 1 ? student_feats[i] : ops::batch_slice(student_feats[i], b);
      const Var d = ops::l2_norm(ops::sub(sf, tf));
      total = total.defined() ? ops::add(total, d) : d;
    }
  }
  r.gate_fraction = n > 0 ? static_cast<double>(open) / static_cast<double>(n) : 0.0;
  r.loss = total.defined() ? ops::scale(total, 1.0 / static_cast<double>(n)) : ops::constant(Tensor::scalar(0));
  return r;
}

namespace {

template <class F>
Var component(const char* loss, const char* name, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    fail(e.code(), std::string(loss) + " component '" + name + "': " + e.what());
  }
}

void accumulate(LossBreakdown& out, const char* name, double weight, const Var& term) {
  const Var weighted = ops::scale(term, weight);
  out.components[name] = weighted.value()[0];
  out.total = out.total.defined() ? ops::add(out.total, weighted) : weighted;
}

void finish(LossBreakdown& out) {
  if (!out.total.defined()) out.total = ops::constant(Tensor::scalar(0));
}

}  // namespace

LossBreakdown warp_stage_loss(const Var& g_pred, const Var& p, const Var& m_gt, const warp::FlowPyramid& flows,
                              const DistillationInputs* distill, const LossWeights& w,
                              const PerceptualExtractor& phi, const WarpLossOptions& opt) {
  w.validate();
  LossBreakdown out;
  Var target;
  if (w.l_warp > 0 || w.per_warp > 0) {
    target = component("warp loss", "target", [&] { return ops::mul_mask(p, m_gt); });
    if (target.shape() != g_pred.shape())
      fail(Errc::kShape, "warp loss: warped garment " + shape_str(g_pred.shape()) + " vs target " +
                             shape_str(target.shape()));
  }
  if (w.l_warp > 0)
    accumulate(out, "l1", w.l_warp, component("warp loss", "l1", [&] { return ops::mean_abs_diff(g_pred, target); }));
  if (w.per_warp > 0)
    accumulate(out, "perceptual", w.per_warp,
               component("warp loss", "perceptual", [&] { return perceptual_loss(g_pred, target, phi); }));
  if (w.sec > 0)
    accumulate(out, "smooth", w.sec, component("warp loss", "smooth", [&] {
                 return warp::second_order_smooth_loss(flows, opt.charbonnier, opt.reduction);
               }));
  if (w.dis > 0) {
    if (!distill) fail(Errc::kConfig, "warp loss component 'distill': no distillation inputs supplied");
    DistillationResult d;
    component("warp loss", "distill", [&] {
      d = distillation_loss(distill->teacher_feats, distill->student_feats, distill->t, distill->s, distill->p);
      return d.loss;
    });
    accumulate(out, "distill", w.dis, d.loss);
    out.components["gate"] = d.gate_fraction;
  }
  finish(out);
  return out;
}

LossBreakdown gen_loss(const Var& s, const Var& p, const PerceptualExtractor& phi, const LossWeights& w) {
  w.validate();
  if (s.shape() != p.shape())
    fail(Errc::kShape, "generation loss: shape mismatch " + shape_str(s.shape()) + " vs " + shape_str(p.shape()));
  LossBreakdown out;
  if (w.l_gen > 0)
    accumulate(out, "l1", w.l_gen, component("generation loss", "l1", [&] { return ops::mean_abs_diff(s, p); }));
  if (w.per_gen > 0)
    accumulate(out, "perceptual", w.per_gen,
               component("generation loss", "perceptual", [&] { return perceptual_loss(s, p, phi); }));
  finish(out);
  return out;
}

}  // namespace dmvton::losses
