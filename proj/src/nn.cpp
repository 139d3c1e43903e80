#include "dmvton/nn.hpp"

#include <cmath>
#include <random>
#include <set>

#include "dmvton/errors.hpp"

namespace dmvton::nn {

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

InitSpec InitSpec::he(int64_t fan_in, double gain, double scale) {
  return uniform(scale * gain * std::sqrt(3.0 / static_cast<double>(std::max<int64_t>(fan_in, 1))));
}

Var Module::add_parameter(const std::string& name, const Shape& shape, InitSpec init) {
  for (const auto& p : params_)
    if (p.name == name) fail(Errc::kInternal, "duplicate parameter name " + name);
  Var v(Tensor(shape, init.kind == InitSpec::Kind::kConstant ? init.value : 0.0), true);
  params_.push_back({name, v, init});
  return v;
}

void Module::collect(const std::string& prefix, std::vector<std::pair<std::string, const Param*>>& out) const {
  for (const auto& p : params_) out.emplace_back(join(prefix, p.name), &p);
  for (const auto& [name, child] : children_) child->collect(join(prefix, name), out);
}

std::vector<NamedParameter> Module::parameters(const std::string& prefix) const {
  std::vector<std::pair<std::string, const Param*>> all;
  collect(prefix, all);
  std::vector<NamedParameter> out;
  out.reserve(all.size());
  for (auto& [name, p] : all) out.push_back({name, p->var});
  return out;
}

int64_t Module::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.var.value().numel();
  return n;
}

NamedTensors Module::state_dict(const std::string& prefix) const {
  NamedTensors out;
  for (const auto& p : parameters(prefix)) out.emplace(p.name, p.var.value());
  return out;
}

void Module::load_state_dict(const NamedTensors& tensors, const std::string& prefix, bool strict) {
  std::set<std::string> used;
  for (auto& p : parameters(prefix)) {
    auto it = tensors.find(p.name);
    if (it == tensors.end()) fail(Errc::kData, "weights are missing tensor " + p.name);
    if (it->second.shape() != p.var.shape())
      fail(Errc::kData, "tensor " + p.name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                            shape_str(p.var.shape()));
    p.var.mutable_value() = it->second;
    used.insert(p.name);
  }
  if (strict)
    for (const auto& [name, t] : tensors)
      if ((prefix.empty() || name.rfind(prefix + ".", 0) == 0) && !used.count(name))
        fail(Errc::kData, "weights contain unknown tensor " + name);
}

void Module::reset_parameters(uint64_t seed, const std::string& prefix) {
  std::vector<std::pair<std::string, const Param*>> all;
  collect(prefix, all);
  for (auto& [name, p] : all) {
    Var v = p->var;
    Tensor& t = v.mutable_value();
    if (p->init.kind == InitSpec::Kind::kConstant) {
      t.fill(p->init.value);
      continue;
    }
    std::mt19937_64 rng(seed ^ fnv1a(name));
    std::uniform_real_distribution<double> dist(-p->init.value, p->init.value);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  }
}

Var Module::parameter(const std::string& name) const {
  for (const auto& p : parameters())
    if (p.name == name) return p.var;
  fail(Errc::kConfig, "no parameter named " + name);
}

void Module::set_parameter(const std::string& name, const Tensor& value) {
  Var v = parameter(name);
  if (value.shape() != v.shape()) fail(Errc::kShape, "set_parameter: shape mismatch for " + name);
  v.mutable_value() = value;
}

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int kernel, Options opt) : in_(in_ch), out_(out_ch) {
  conv_.stride = opt.stride;
  conv_.pad = opt.pad < 0 ? kernel / 2 : opt.pad;
  conv_.groups = opt.groups;
  const int64_t fan_in = in_ch / opt.groups * kernel * kernel;
  weight_ = add_parameter("weight", {out_ch, in_ch / opt.groups, kernel, kernel},
                          InitSpec::he(fan_in, opt.gain, opt.init_scale));
  if (opt.bias) bias_ = add_parameter("bias", {out_ch}, InitSpec::constant(0.0));
}

Var Conv2d::forward(const Var& x) const { return ops::conv2d(x, weight_, bias_, conv_); }

Linear::Linear(int64_t in, int64_t out, double bias_init, double init_scale) {
  weight_ = add_parameter("weight", {out, in}, InitSpec::he(in, 1.0, init_scale));
  bias_ = add_parameter("bias", {out}, InitSpec::constant(bias_init));
}

Var Linear::forward(const Var& x) const { return ops::linear(x, weight_, bias_); }

Var activate(const Var& x, Activation a) {
  switch (a) {
    case Activation::kNone: return x;
    case Activation::kRelu: return ops::relu(x);
    case Activation::kRelu6: return ops::relu6(x);
    case Activation::kLeakyRelu: return ops::leaky_relu(x, 0.1);
    case Activation::kTanh: return ops::tanh(x);
    case Activation::kSigmoid: return ops::sigmoid(x);
  }
  return x;
}

InvertedResidual::InvertedResidual(Spec spec)
    : spec_(spec), residual_(spec.stride == 1 && spec.in_ch == spec.out_ch) {
  if (spec.stride != 1 && spec.stride != 2) fail(Errc::kConfig, "inverted residual stride must be 1 or 2");
  if (spec.expansion < 1) fail(Errc::kConfig, "inverted residual expansion must be >= 1");
  const int64_t hidden = spec.in_ch * spec.expansion;
  if (spec.expansion != 1) expand_ = &add_module("expand", std::make_unique<Conv2d>(spec.in_ch, hidden, 1));
  Conv2d::Options dw;
  dw.stride = spec.stride;
  dw.groups = static_cast<int>(hidden);
  depthwise_ = &add_module("depthwise", std::make_unique<Conv2d>(hidden, hidden, 3, dw));
  Conv2d::Options pw;
  pw.gain = 1.0;
  project_ = &add_module("project", std::make_unique<Conv2d>(hidden, spec.out_ch, 1, pw));
}

Var InvertedResidual::forward(const Var& x) const {
  Var h = x;
  if (expand_) h = ops::relu6(expand_->forward(h));
  h = ops::relu6(depthwise_->forward(h));
  h = project_->forward(h);
  return residual_ ? ops::add(h, x) : h;
}

Sequential& Sequential::add(const std::string& name, std::unique_ptr<Layer> layer) {
  layers_.push_back(&add_module(name, std::move(layer)));
  return *this;
}

Var Sequential::forward(const Var& x) const {
  Var h = x;
  for (const Layer* l : layers_) h = l->forward(h);
  return h;
}

}  // namespace dmvton::nn
