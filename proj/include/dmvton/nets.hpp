#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dmvton/dataset.hpp"
#include "dmvton/nn.hpp"
#include "dmvton/warp.hpp"

// Teacher (parser-based) and Student (parser-free) try-on networks.
//
// Feature pyramids are lists of [N, P, h, w] tensors, coarsest first, where
// level k (counting from the finest) sits at image_size / 2^(k+1) and P is
// the common pyramid width (the last encoder width).
namespace dmvton::nets {

using ag::Var;

struct NetConfig {
  std::string preset = "tiny";
  int levels = 3;
  std::vector<int64_t> channels{8, 16, 24};
  int64_t height = 64;
  int64_t width = 48;
  int64_t seg_channels = kDefaultSegChannels;
  int expansion = 6;
  // Width of the first conv of every flow head; later convs halve it.
  int64_t flow_head_width = 24;
  // Student generator widths, finest first; one entry per level.
  std::vector<int64_t> gen_channels{8, 16, 24};
  // Teacher generator widths are gen_channels scaled by this factor.
  double teacher_gen_width = 3.0;
  // Final flow convs start at exactly zero instead of a small random draw.
  bool zero_flow_heads = false;

  static NetConfig tiny();
  static NetConfig paper();
  static NetConfig from_preset(const std::string& name);

  int64_t pyramid_width() const { return channels.back(); }
  int64_t human_rep_channels() const { return seg_channels + kNumKeypoints; }
  Size2 image_size() const { return {height, width}; }
  // Spatial size of pyramid level `i`, coarsest first.
  Size2 level_size(int i) const;
  void validate() const;
};

// Encoder + top-down feature pyramid. The mobile variant uses inverted
// residual stages; the standard variant uses strided convs with a residual
// block per stage.
class FeaturePyramidNet : public nn::Module {
 public:
  enum class Kind { kMobile, kStandard };
  FeaturePyramidNet(int64_t in_channels, const NetConfig& cfg, Kind kind);
  std::vector<Var> forward(const Var& x) const;

 private:
  Kind kind_;
  nn::Conv2d* stem_;
  std::vector<nn::Sequential*> stages_;
  std::vector<nn::Conv2d*> laterals_;
  std::vector<nn::Conv2d*> smooth_;
};

// StyleGAN-style modulated conv: input channels scaled by a per-sample
// style projection, then (optionally) outputs demodulated by the norm of the
// modulated weights. Output layers skip demodulation so their scale is free.
class ModulatedConv2d : public nn::Module {
 public:
  ModulatedConv2d(int64_t style_dim, int64_t in_ch, int64_t out_ch, int kernel, bool demodulate = true,
                  double init_scale = 1.0);
  Var forward(const Var& x, const Var& style) const;
  // Per-sample input scales s = affine(style), [N, in_ch].
  Var modulation(const Var& style) const;

 private:
  int kernel_;
  bool demodulate_;
  nn::Linear* affine_;
  Var weight_, bias_;
};

// conv3x3 stack 2P -> w -> w/2 -> w/4 -> 2 with leaky relu between layers.
class FlowHead : public nn::Module {
 public:
  FlowHead(int64_t in_ch, const NetConfig& cfg, int64_t style_dim = 0);
  Var forward(const Var& x, const Var& style = {}) const;

 private:
  std::vector<nn::Conv2d*> plain_;
  std::vector<ModulatedConv2d*> modulated_;
};

struct WarpOutput {
  warp::FlowPyramid flows;   // level sizes follow the feature pyramid
  Var warped;                // garment warped at full image resolution
  std::vector<Var> person_features;
};

// Coarse-to-fine flow estimation. Plain heads for the Student; the Teacher
// adds a style-modulated head per level followed by a plain local refinement.
class FlowEstimator : public nn::Module {
 public:
  FlowEstimator(const NetConfig& cfg, bool style_modulated);
  warp::FlowPyramid forward(const std::vector<Var>& person, const std::vector<Var>& garment) const;
  bool style_modulated() const { return modulated_; }

 private:
  int levels_;
  bool modulated_;
  std::vector<FlowHead*> style_heads_;
  std::vector<FlowHead*> heads_;
};

struct GeneratorOutput {
  Var tryon;     // mask * warped + (1 - mask) * rendered
  Var rendered;  // tanh branch, [-1, 1]
  Var mask;      // sigmoid branch, [N, 1, H, W] in [0, 1]
};

// UNet over concat(warped garment, context image). Mobile kind builds
// every block from inverted residuals; standard kind uses plain convs.
class Generator : public nn::Module {
 public:
  Generator(int64_t in_channels, std::vector<int64_t> widths, FeaturePyramidNet::Kind kind, int expansion);
  GeneratorOutput forward(const Var& warped, const Var& context) const;

 private:
  nn::Layer* block(const std::string& name, int64_t in, int64_t out, int stride);

  FeaturePyramidNet::Kind kind_;
  int expansion_;
  std::vector<nn::Sequential*> encoder_;
  std::vector<nn::Layer*> decoder_;
  nn::Conv2d* head_;
};

// Everything a network exposes to training and profiling.
class TryOnNet : public nn::Layer {
 public:
  explicit TryOnNet(NetConfig cfg) : cfg_(std::move(cfg)) {}
  const NetConfig& config() const { return cfg_; }
  virtual const char* name() const = 0;
  // Channels of the packed profiling input; see forward().
  virtual int64_t packed_channels() const = 0;

  NamedTensors export_weights() const { return state_dict(name()); }
  void import_weights(const NamedTensors& t) { load_state_dict(t, name()); }
  void init(uint64_t seed);
  // Zeroes the final conv of every flow head, so every flow is exactly zero.
  void zero_flow_heads();
  // Forces the composition mask to 1 (sigmoid of a large bias).
  void force_mask_one();
  std::vector<nn::NamedParameter> named_parameters() const { return parameters(name()); }
  // Everything outside the generator (feature pyramids and flow estimator).
  std::vector<nn::NamedParameter> warp_parameters() const;
  std::vector<nn::NamedParameter> generator_parameters() const;

 protected:
  NetConfig cfg_;
};

struct StudentOutput {
  WarpOutput warp;
  GeneratorOutput gen;
};

class StudentNet : public TryOnNet {
 public:
  explicit StudentNet(NetConfig cfg);
  const char* name() const override { return "student"; }
  int64_t packed_channels() const override { return 6; }

  WarpOutput warp(const Var& person, const Var& garment) const;
  GeneratorOutput generate(const Var& warped, const Var& person) const;
  StudentOutput run(const Var& person, const Var& garment) const;
  // Packed input [N, 6, H, W] = (person, garment); returns the try-on.
  Var forward(const Var& packed) const override;

 private:
  FeaturePyramidNet* person_fpn_;
  FeaturePyramidNet* garment_fpn_;
  FlowEstimator* afen_;
  Generator* gen_;
};

struct TeacherOutput {
  WarpOutput warp;
  GeneratorOutput gen;
  Var preserved;
};

class TeacherNet : public TryOnNet {
 public:
  explicit TeacherNet(NetConfig cfg);
  const char* name() const override { return "teacher"; }
  int64_t packed_channels() const override { return cfg_.human_rep_channels() + 6; }

  // human_rep [N, K+17, H, W]; garment and person [N, 3, H, W]. The person
  // image only supplies the region kept outside the upper clothes.
  TeacherOutput run(const Var& human_rep, const Var& garment, const Var& person) const;
  WarpOutput warp(const Var& human_rep, const Var& garment) const;
  std::vector<Var> person_features(const Var& human_rep) const;
  // Packed input [N, K+17+6, H, W] = (human_rep, garment, person).
  Var forward(const Var& packed) const override;

 private:
  FeaturePyramidNet* person_fpn_;
  FeaturePyramidNet* garment_fpn_;
  FlowEstimator* afen_;
  Generator* gen_;
};

// Kind of network a weight set belongs to, from its tensor-name prefix
// ("student." or "teacher."). kConfig when the names are mixed or foreign.
std::string weights_kind(const NamedTensors& weights);

// Builds the matching network for `cfg` and imports the weights. A shape
// mismatch against the preset is reported as kConfig.
std::unique_ptr<TryOnNet> load_network(const NamedTensors& weights, const NetConfig& cfg);

// person * (1 - upper-clothes channel of the one-hot parser map).
Var preserved_region(const Var& person, const Var& human_rep, int64_t seg_channels);

}  // namespace dmvton::nets
