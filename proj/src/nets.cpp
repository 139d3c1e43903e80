#include "dmvton/nets.hpp"

#include <cmath>

#include "dmvton/errors.hpp"

namespace dmvton::nets {

using nn::Conv2d;
using nn::InvertedResidual;
using nn::Sequential;

namespace {

constexpr double kFlowHeadFinalScale = 0.05;
constexpr double kLeakySlope = 0.1;
// sigmoid(40) rounds to exactly 1.0 in double precision.
constexpr double kMaskOneBias = 40.0;

std::unique_ptr<Conv2d> conv(int64_t in, int64_t out, int k, int stride = 1, double gain = 1.4142135623730951,
                             double init_scale = 1.0, bool bias = true) {
  Conv2d::Options o;
  o.stride = stride;
  o.gain = gain;
  o.init_scale = init_scale;
  o.bias = bias;
  return std::make_unique<Conv2d>(in, out, k, o);
}

std::unique_ptr<nn::Layer> act(nn::Activation a) { return std::make_unique<nn::ActivationLayer>(a); }

// conv3x3 -> relu -> conv3x3, added to the input, then relu.
class ResidualBlock : public nn::Layer {
 public:
  explicit ResidualBlock(int64_t ch) {
    a_ = &add_module("conv0", conv(ch, ch, 3));
    b_ = &add_module("conv1", conv(ch, ch, 3, 1, 1.0));
  }
  Var forward(const Var& x) const override {
    return ops::relu(ops::add(b_->forward(ops::relu(a_->forward(x))), x));
  }

 private:
  Conv2d* a_;
  Conv2d* b_;
};

int64_t scaled(int64_t c, double k) { return std::max<int64_t>(1, std::llround(static_cast<double>(c) * k)); }

}  // namespace

// ---------------------------------------------------------------------------
// NetConfig

NetConfig NetConfig::tiny() { return NetConfig{}; }

NetConfig NetConfig::paper() {
  NetConfig c;
  c.preset = "paper";
  c.levels = 5;
  c.channels = {32, 64, 128, 256, 256};
  c.height = 256;
  c.width = 192;
  c.flow_head_width = 96;
  c.gen_channels = {16, 32, 64, 128, 256};
  c.teacher_gen_width = 3.0;
  return c;
}

NetConfig NetConfig::from_preset(const std::string& name) {
  if (name == "tiny") return tiny();
  if (name == "paper") return paper();
  fail(Errc::kConfig, "unknown preset '" + name + "' (expected tiny or paper)");
}

Size2 NetConfig::level_size(int i) const {
  const int64_t f = int64_t{1} << (levels - i);
  return {height / f, width / f};
}

void NetConfig::validate() const {
  if (levels < 2) fail(Errc::kConfig, "levels must be >= 2");
  if (static_cast<int>(channels.size()) != levels)
    fail(Errc::kConfig, "channels must list one width per level");
  if (static_cast<int>(gen_channels.size()) != levels)
    fail(Errc::kConfig, "gen_channels must list one width per level");
  for (int64_t c : channels)
    if (c < 1) fail(Errc::kConfig, "channel widths must be positive");
  for (int64_t c : gen_channels)
    if (c < 1) fail(Errc::kConfig, "generator widths must be positive");
  if (height < 1 || width < 1) fail(Errc::kConfig, "image size must be positive");
  const int64_t f = int64_t{1} << levels;
  if (height % f != 0 || width % f != 0)
    fail(Errc::kConfig, "image size " + std::to_string(height) + "x" + std::to_string(width) +
                            " is not divisible by 2^levels = " + std::to_string(f));
  if (seg_channels <= kUpperClothesLabel) fail(Errc::kConfig, "seg_channels must include the upper-clothes label");
  if (expansion < 1) fail(Errc::kConfig, "expansion must be >= 1");
  if (flow_head_width < 4) fail(Errc::kConfig, "flow_head_width must be >= 4");
  if (!(teacher_gen_width > 0)) fail(Errc::kConfig, "teacher_gen_width must be positive");
}

// ---------------------------------------------------------------------------
// Feature pyramid

FeaturePyramidNet::FeaturePyramidNet(int64_t in_channels, const NetConfig& cfg, Kind kind) : kind_(kind) {
  cfg.validate();
  const int64_t p = cfg.pyramid_width();
  stem_ = &add_module("stem", conv(in_channels, cfg.channels[0], 3));
  int64_t prev = cfg.channels[0];
  for (int k = 0; k < cfg.levels; ++k) {
    const int64_t c = cfg.channels[static_cast<size_t>(k)];
    auto stage = std::make_unique<Sequential>();
    if (kind == Kind::kMobile) {
      stage->add("block0", std::make_unique<InvertedResidual>(InvertedResidual::Spec{prev, c, 2, cfg.expansion}));
    } else {
      stage->add("down", conv(prev, c, 3, 2));
      stage->add("down_act", act(nn::Activation::kRelu));
      stage->add("block0", std::make_unique<ResidualBlock>(c));
    }
    stages_.push_back(&add_module("stage" + std::to_string(k), std::move(stage)));
    prev = c;
  }
  for (int k = 0; k < cfg.levels; ++k)
    laterals_.push_back(
        &add_module("lateral" + std::to_string(k), conv(cfg.channels[static_cast<size_t>(k)], p, 1, 1, 1.0)));
  for (int k = 0; k < cfg.levels; ++k) smooth_.push_back(&add_module("smooth" + std::to_string(k), conv(p, p, 3, 1, 1.0)));
}

std::vector<Var> FeaturePyramidNet::forward(const Var& x) const {
  Var h = stem_->forward(x);
  h = kind_ == Kind::kMobile ? ops::relu6(h) : ops::relu(h);
  std::vector<Var> enc;
  for (const auto* s : stages_) {
    h = s->forward(h);
    enc.push_back(h);
  }
  const size_t n = enc.size();
  std::vector<Var> out(n);
  Var top;
  for (size_t i = n; i-- > 0;) {
    Var lat = laterals_[i]->forward(enc[i]);
    top = top.defined() ? ops::add(ops::upsample_nearest2x(top), lat) : lat;
    out[n - 1 - i] = smooth_[i]->forward(top);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flow estimation

ModulatedConv2d::ModulatedConv2d(int64_t style_dim, int64_t in_ch, int64_t out_ch, int kernel, bool demodulate,
                                 double init_scale)
    : kernel_(kernel), demodulate_(demodulate) {
  affine_ = &add_module("style", std::make_unique<nn::Linear>(style_dim, in_ch, 1.0, 0.1));
  weight_ = add_parameter("weight", {out_ch, in_ch, kernel, kernel},
                          nn::InitSpec::he(in_ch * kernel * kernel, 1.4142135623730951, init_scale));
  bias_ = add_parameter("bias", {out_ch}, nn::InitSpec::constant(0.0));
}

Var ModulatedConv2d::modulation(const Var& style) const { return affine_->forward(style); }

Var ModulatedConv2d::forward(const Var& x, const Var& style) const {
  const Var s = modulation(style);
  const Var y = ops::conv2d(ops::scale_channels(x, s), weight_, Var(), {1, kernel_ / 2, 1});
  if (!demodulate_) return ops::add_channel_bias(y, bias_);
  const Shape& ws = weight_.shape();
  const Var w2 = ops::sum_last_axis(ops::reshape(ops::square(weight_), {ws[0], ws[1], ws[2] * ws[3]}));
  const Var demod = ops::rsqrt(ops::linear(ops::square(s), w2, Var()), 1e-8);
  return ops::add_channel_bias(ops::scale_channels(y, demod), bias_);
}

FlowHead::FlowHead(int64_t in_ch, const NetConfig& cfg, int64_t style_dim) {
  const int64_t w = cfg.flow_head_width;
  const std::vector<int64_t> widths{in_ch, w, w / 2, w / 4, 2};
  const double final_scale = cfg.zero_flow_heads ? 0.0 : kFlowHeadFinalScale;
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    const std::string name = "conv" + std::to_string(i);
    if (style_dim > 0) {
      modulated_.push_back(&add_module(
          name, std::make_unique<ModulatedConv2d>(style_dim, widths[i], widths[i + 1], 3, !last, last ? final_scale : 1.0)));
    } else {
      plain_.push_back(&add_module(name, conv(widths[i], widths[i + 1], 3, 1, 1.4142135623730951,
                                              last ? final_scale : 1.0)));
    }
  }
}

Var FlowHead::forward(const Var& x, const Var& style) const {
  Var h = x;
  const size_t n = plain_.empty() ? modulated_.size() : plain_.size();
  for (size_t i = 0; i < n; ++i) {
    h = plain_.empty() ? modulated_[i]->forward(h, style) : plain_[i]->forward(h);
    if (i + 1 < n) h = ops::leaky_relu(h, kLeakySlope);
  }
  return h;
}

FlowEstimator::FlowEstimator(const NetConfig& cfg, bool style_modulated)
    : levels_(cfg.levels), modulated_(style_modulated) {
  const int64_t p = cfg.pyramid_width();
  for (int i = 0; i < cfg.levels; ++i) {
    const std::string lvl = "level" + std::to_string(i);
    if (modulated_) style_heads_.push_back(&add_module(lvl + ".global", std::make_unique<FlowHead>(2 * p, cfg, p)));
    heads_.push_back(&add_module(modulated_ ? lvl + ".local" : lvl, std::make_unique<FlowHead>(2 * p, cfg)));
  }
}

warp::FlowPyramid FlowEstimator::forward(const std::vector<Var>& person, const std::vector<Var>& garment) const {
  if (person.size() != static_cast<size_t>(levels_) || garment.size() != person.size())
    fail(Errc::kShape, "flow estimator: expected " + std::to_string(levels_) + " pyramid levels");
  for (size_t i = 0; i < person.size(); ++i)
    if (person[i].shape() != garment[i].shape())
      fail(Errc::kShape, "flow estimator: pyramid mismatch at level " + std::to_string(i) + ": " +
                             shape_str(person[i].shape()) + " vs " + shape_str(garment[i].shape()));
  const Var style = modulated_ ? ops::global_avg_pool(person[0]) : Var();
  warp::FlowPyramid out;
  Var flow;
  for (size_t i = 0; i < person.size(); ++i) {
    Var base = flow.defined() ? warp::upsample_flow(flow) : Var();
    auto sample = [&](const Var& f) {
      return ops::concat_channels({person[i], f.defined() ? warp::apply_flow(garment[i], f) : garment[i]});
    };
    auto step = [&](const Var& prev, const Var& residual) { return prev.defined() ? ops::add(prev, residual) : residual; };
    if (modulated_) base = step(base, style_heads_[i]->forward(sample(base), style));
    flow = step(base, heads_[i]->forward(sample(base)));
    out.levels.push_back(flow);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator

nn::Layer* Generator::block(const std::string& name, int64_t in, int64_t out, int stride) {
  auto seq = std::make_unique<Sequential>();
  if (kind_ == FeaturePyramidNet::Kind::kMobile) {
    seq->add("ir", std::make_unique<InvertedResidual>(InvertedResidual::Spec{in, out, stride, expansion_}));
  } else {
    seq->add("conv0", conv(in, out, 3, stride));
    seq->add("act0", act(nn::Activation::kRelu));
    seq->add("conv1", conv(out, out, 3));
    seq->add("act1", act(nn::Activation::kRelu));
  }
  return &add_module(name, std::move(seq));
}

Generator::Generator(int64_t in_channels, std::vector<int64_t> widths, FeaturePyramidNet::Kind kind, int expansion)
    : kind_(kind), expansion_(expansion) {
  const size_t n = widths.size();
  if (n < 2) fail(Errc::kConfig, "generator needs at least two levels");
  for (size_t k = 0; k < n; ++k) {
    auto seq = std::make_unique<Sequential>();
    if (k == 0) {
      seq->add("stem", conv(in_channels, widths[0], 3));
      seq->add("stem_act", act(kind == FeaturePyramidNet::Kind::kMobile ? nn::Activation::kRelu6 : nn::Activation::kRelu));
    } else if (kind == FeaturePyramidNet::Kind::kMobile) {
      seq->add("down", std::make_unique<InvertedResidual>(InvertedResidual::Spec{widths[k - 1], widths[k], 2, expansion}));
    } else {
      seq->add("down", conv(widths[k - 1], widths[k], 3, 2));
      seq->add("down_act", act(nn::Activation::kRelu));
    }
    if (kind == FeaturePyramidNet::Kind::kMobile)
      seq->add("block", std::make_unique<InvertedResidual>(InvertedResidual::Spec{widths[k], widths[k], 1, expansion}));
    else
      seq->add("block", std::make_unique<ResidualBlock>(widths[k]));
    encoder_.push_back(&add_module("enc" + std::to_string(k), std::move(seq)));
  }
  decoder_.resize(n - 1);
  for (size_t k = n - 1; k >= 1; --k)
    decoder_[k - 1] = block("dec" + std::to_string(k - 1), widths[k] + widths[k - 1], widths[k - 1], 1);
  head_ = &add_module("head", conv(widths[0], 4, 3, 1, 1.0, 0.5));
}

GeneratorOutput Generator::forward(const Var& warped, const Var& context) const {
  if (warped.shape() != context.shape())
    fail(Errc::kShape, "generator: warped garment " + shape_str(warped.shape()) + " vs context " +
                           shape_str(context.shape()));
  std::vector<Var> skips;
  Var h = ops::concat_channels({warped, context});
  for (const auto* e : encoder_) {
    h = e->forward(h);
    skips.push_back(h);
  }
  for (size_t k = skips.size() - 1; k >= 1; --k)
    h = decoder_[k - 1]->forward(ops::concat_channels({ops::upsample_nearest2x(h), skips[k - 1]}));
  const Var out = head_->forward(h);
  GeneratorOutput g;
  g.rendered = ops::tanh(ops::slice_channels(out, 0, 3));
  g.mask = ops::sigmoid(ops::slice_channels(out, 3, 4));
  g.tryon = ops::add(ops::mul_mask(warped, g.mask), ops::mul_mask(g.rendered, ops::one_minus(g.mask)));
  return g;
}

// ---------------------------------------------------------------------------
// Networks

void TryOnNet::init(uint64_t seed) {
  reset_parameters(seed, name());
  if (cfg_.zero_flow_heads) zero_flow_heads();
}

void TryOnNet::zero_flow_heads() {
  for (auto& p : named_parameters()) {
    const auto& n = p.name;
    const bool in_afen = n.find(".afen.") != std::string::npos;
    const bool final_conv = n.find(".conv3.weight") != std::string::npos || n.find(".conv3.bias") != std::string::npos;
    if (in_afen && final_conv) p.var.mutable_value().fill(0.0);
  }
}

void TryOnNet::force_mask_one() {
  Var w = parameter("gen.head.weight");
  Var b = parameter("gen.head.bias");
  const Shape& s = w.shape();
  const int64_t per = s[1] * s[2] * s[3];
  for (int64_t i = 0; i < per; ++i) w.mutable_value()[3 * per + i] = 0.0;
  b.mutable_value()[3] = kMaskOneBias;
}

std::vector<nn::NamedParameter> TryOnNet::warp_parameters() const {
  const std::string gen = std::string(name()) + ".gen.";
  std::vector<nn::NamedParameter> out;
  for (auto& p : named_parameters())
    if (p.name.rfind(gen, 0) != 0) out.push_back(p);
  return out;
}

std::vector<nn::NamedParameter> TryOnNet::generator_parameters() const {
  const std::string gen = std::string(name()) + ".gen.";
  std::vector<nn::NamedParameter> out;
  for (auto& p : named_parameters())
    if (p.name.rfind(gen, 0) == 0) out.push_back(p);
  return out;
}

StudentNet::StudentNet(NetConfig c) : TryOnNet(std::move(c)) {
  cfg_.validate();
  person_fpn_ = &add_module("person_fpn", std::make_unique<FeaturePyramidNet>(3, cfg_, FeaturePyramidNet::Kind::kMobile));
  garment_fpn_ =
      &add_module("garment_fpn", std::make_unique<FeaturePyramidNet>(3, cfg_, FeaturePyramidNet::Kind::kMobile));
  afen_ = &add_module("afen", std::make_unique<FlowEstimator>(cfg_, false));
  gen_ = &add_module("gen", std::make_unique<Generator>(6, cfg_.gen_channels, FeaturePyramidNet::Kind::kMobile,
                                                        cfg_.expansion));
}

namespace {

void require_image(const Var& x, int64_t channels, const NetConfig& cfg, const char* what) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != channels || s[2] != cfg.height || s[3] != cfg.width)
    fail(Errc::kShape, std::string(what) + ": expected [N," + std::to_string(channels) + "," +
                           std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "], got " + shape_str(s));
}

WarpOutput warp_garment(const FlowEstimator& afen, std::vector<Var> person_feats, const std::vector<Var>& garment_feats,
                        const Var& garment) {
  WarpOutput w;
  w.flows = afen.forward(person_feats, garment_feats);
  w.warped = warp::apply_flow(garment, warp::upsample_flow(w.flows.levels.back()));
  w.person_features = std::move(person_feats);
  return w;
}

}  // namespace

WarpOutput StudentNet::warp(const Var& person, const Var& garment) const {
  require_image(person, 3, cfg_, "student person");
  require_image(garment, 3, cfg_, "student garment");
  if (person.shape()[0] != garment.shape()[0]) fail(Errc::kShape, "student: batch size mismatch");
  return warp_garment(*afen_, person_fpn_->forward(person), garment_fpn_->forward(garment), garment);
}

GeneratorOutput StudentNet::generate(const Var& warped, const Var& person) const { return gen_->forward(warped, person); }

StudentOutput StudentNet::run(const Var& person, const Var& garment) const {
  StudentOutput o;
  o.warp = warp(person, garment);
  o.gen = generate(o.warp.warped, person);
  return o;
}

Var StudentNet::forward(const Var& packed) const {
  require_image(packed, 6, cfg_, "student packed input");
  return run(ops::slice_channels(packed, 0, 3), ops::slice_channels(packed, 3, 6)).gen.tryon;
}

TeacherNet::TeacherNet(NetConfig c) : TryOnNet(std::move(c)) {
  cfg_.validate();
  person_fpn_ = &add_module("person_fpn", std::make_unique<FeaturePyramidNet>(cfg_.human_rep_channels(), cfg_,
                                                                             FeaturePyramidNet::Kind::kStandard));
  garment_fpn_ =
      &add_module("garment_fpn", std::make_unique<FeaturePyramidNet>(3, cfg_, FeaturePyramidNet::Kind::kStandard));
  afen_ = &add_module("afen", std::make_unique<FlowEstimator>(cfg_, true));
  std::vector<int64_t> widths;
  for (int64_t c : cfg_.gen_channels) widths.push_back(scaled(c, cfg_.teacher_gen_width));
  gen_ = &add_module("gen", std::make_unique<Generator>(6, widths, FeaturePyramidNet::Kind::kStandard, cfg_.expansion));
}

Var preserved_region(const Var& person, const Var& human_rep, int64_t seg_channels) {
  if (human_rep.shape().size() != 4 || human_rep.shape()[1] < seg_channels)
    fail(Errc::kShape, "human representation has too few channels: " + shape_str(human_rep.shape()));
  const Var upper = ops::slice_channels(human_rep, kUpperClothesLabel, kUpperClothesLabel + 1);
  return ops::mul_mask(person, ops::one_minus(upper));
}

std::vector<Var> TeacherNet::person_features(const Var& human_rep) const {
  require_image(human_rep, cfg_.human_rep_channels(), cfg_, "teacher human representation");
  return person_fpn_->forward(human_rep);
}

WarpOutput TeacherNet::warp(const Var& human_rep, const Var& garment) const {
  if (!human_rep.defined()) fail(Errc::kData, "teacher requires a human representation");
  require_image(human_rep, cfg_.human_rep_channels(), cfg_, "teacher human representation");
  require_image(garment, 3, cfg_, "teacher garment");
  if (human_rep.shape()[0] != garment.shape()[0]) fail(Errc::kShape, "teacher: batch size mismatch");
  return warp_garment(*afen_, person_fpn_->forward(human_rep), garment_fpn_->forward(garment), garment);
}

TeacherOutput TeacherNet::run(const Var& human_rep, const Var& garment, const Var& person) const {
  if (!human_rep.defined()) fail(Errc::kData, "teacher requires a human representation");
  require_image(person, 3, cfg_, "teacher person");
  TeacherOutput o;
  o.warp = warp(human_rep, garment);
  o.preserved = preserved_region(person, human_rep, cfg_.seg_channels);
  o.gen = gen_->forward(o.warp.warped, o.preserved);
  return o;
}

Var TeacherNet::forward(const Var& packed) const {
  const int64_t k = cfg_.human_rep_channels();
  require_image(packed, k + 6, cfg_, "teacher packed input");
  return run(ops::slice_channels(packed, 0, k), ops::slice_channels(packed, k, k + 3),
             ops::slice_channels(packed, k + 3, k + 6))
      .gen.tryon;
}

std::string weights_kind(const NamedTensors& weights) {
  if (weights.empty()) fail(Errc::kConfig, "weight archive is empty");
  std::string kind;
  for (const auto& [name, _] : weights) {
    const auto dot = name.find('.');
    const std::string head = dot == std::string::npos ? name : name.substr(0, dot);
    if (head != "student" && head != "teacher")
      fail(Errc::kConfig, "tensor '" + name + "' belongs to neither the student nor the teacher");
    if (kind.empty()) kind = head;
    if (head != kind) fail(Errc::kConfig, "weight archive mixes student and teacher tensors");
  }
  return kind;
}

std::unique_ptr<TryOnNet> load_network(const NamedTensors& weights, const NetConfig& cfg) {
  const std::string kind = weights_kind(weights);
  std::unique_ptr<TryOnNet> net;
  if (kind == "student")
    net = std::make_unique<StudentNet>(cfg);
  else
    net = std::make_unique<TeacherNet>(cfg);
  try {
    net->import_weights(weights);
  } catch (const Error& e) {
    fail(Errc::kConfig, std::string(kind) + " weights do not match preset '" + cfg.preset + "': " + e.what());
  }
  return net;
}

}  // namespace dmvton::nets
