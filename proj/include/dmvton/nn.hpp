#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dmvton/autograd.hpp"
#include "dmvton/ops.hpp"
#include "dmvton/weights.hpp"

namespace dmvton::nn {

using ag::Var;

// How a parameter is (re)initialised by Module::reset_parameters.
struct InitSpec {
  enum class Kind { kUniform, kConstant } kind = Kind::kConstant;
  double value = 0.0;  // uniform bound or constant value

  static InitSpec constant(double v) { return {Kind::kConstant, v}; }
  static InitSpec uniform(double bound) { return {Kind::kUniform, bound}; }
  // He-style uniform: std = gain / sqrt(fan_in).
  static InitSpec he(int64_t fan_in, double gain, double scale = 1.0);
};

struct NamedParameter {
  std::string name;
  Var var;
};

class Module {
 public:
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  // Depth-first, registration order; names are dotted paths.
  std::vector<NamedParameter> parameters(const std::string& prefix = "") const;
  int64_t parameter_count() const;

  NamedTensors state_dict(const std::string& prefix = "") const;
  // Every parameter must be present with a matching shape; extra names are
  // rejected when strict.
  void load_state_dict(const NamedTensors& tensors, const std::string& prefix = "", bool strict = true);

  // Draws every parameter from its InitSpec. Each parameter has its own
  // stream seeded from (seed, full name), so the result does not depend on
  // construction order.
  void reset_parameters(uint64_t seed, const std::string& prefix = "");

  // Overwrites one parameter (dotted name relative to this module).
  void set_parameter(const std::string& name, const Tensor& value);
  Var parameter(const std::string& name) const;

 protected:
  Module() = default;
  Var add_parameter(const std::string& name, const Shape& shape, InitSpec init);
  template <class M>
  M& add_module(const std::string& name, std::unique_ptr<M> m) {
    M& ref = *m;
    children_.emplace_back(name, std::move(m));
    return ref;
  }

 private:
  struct Param {
    std::string name;
    Var var;
    InitSpec init;
  };
  void collect(const std::string& prefix, std::vector<std::pair<std::string, const Param*>>& out) const;

  std::vector<Param> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

// Single-input, single-output module. Networks with several inputs expose
// this interface over channel-packed inputs so they can be profiled.
class Layer : public Module {
 public:
  virtual Var forward(const Var& x) const = 0;
};

class Conv2d : public Layer {
 public:
  struct Options {
    int stride = 1;
    int pad = -1;  // -1: same padding (k / 2)
    int groups = 1;
    bool bias = true;
    double gain = 1.4142135623730951;
    double init_scale = 1.0;
  };
  Conv2d(int64_t in_ch, int64_t out_ch, int kernel, Options opt);
  Conv2d(int64_t in_ch, int64_t out_ch, int kernel) : Conv2d(in_ch, out_ch, kernel, Options{}) {}

  Var forward(const Var& x) const override;
  int64_t in_channels() const { return in_; }
  int64_t out_channels() const { return out_; }

 private:
  int64_t in_, out_;
  ops::Conv2dOptions conv_;
  Var weight_, bias_;
};

class Linear : public Layer {
 public:
  Linear(int64_t in, int64_t out, double bias_init = 0.0, double init_scale = 1.0);
  Var forward(const Var& x) const override;

 private:
  Var weight_, bias_;
};

enum class Activation { kNone, kRelu, kRelu6, kLeakyRelu, kTanh, kSigmoid };
Var activate(const Var& x, Activation a);

class ActivationLayer : public Layer {
 public:
  explicit ActivationLayer(Activation a) : act_(a) {}
  Var forward(const Var& x) const override { return activate(x, act_); }

 private:
  Activation act_;
};

// expand 1x1 -> depthwise 3x3 (stride) -> linear project 1x1, with a
// skip-add exactly when stride == 1 and in_ch == out_ch.
class InvertedResidual : public Layer {
 public:
  struct Spec {
    int64_t in_ch;
    int64_t out_ch;
    int stride = 1;
    int expansion = 6;
  };
  explicit InvertedResidual(Spec spec);
  Var forward(const Var& x) const override;
  bool uses_residual() const { return residual_; }
  const Spec& spec() const { return spec_; }

 private:
  Spec spec_;
  bool residual_;
  Conv2d* expand_ = nullptr;
  Conv2d* depthwise_;
  Conv2d* project_;
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  Sequential& add(const std::string& name, std::unique_ptr<Layer> layer);
  Var forward(const Var& x) const override;
  size_t size() const { return layers_.size(); }

 private:
  std::vector<Layer*> layers_;
};

}  // namespace dmvton::nn
