#include "dmvton/optim.hpp"

#include <cmath>

#include "dmvton/errors.hpp"

namespace dmvton::optim {

Adam::Adam(std::vector<nn::NamedParameter> params, Options opt) : params_(std::move(params)), opt_(opt) {
  if (!(opt_.lr > 0) || !std::isfinite(opt_.lr)) fail(Errc::kConfig, "learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape(), 0.0);
    v_.emplace_back(p.var.shape(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    ag::Var var = params_[i].var;
    const ag::Node* node = var.node();
    if (!node->grad.defined()) continue;
    const Tensor& g = node->grad;
    Tensor& w = var.mutable_value();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (int64_t k = 0; k < w.numel(); ++k) {
      m[k] = opt_.beta1 * m[k] + (1 - opt_.beta1) * g[k];
      v[k] = opt_.beta2 * v[k] + (1 - opt_.beta2) * g[k] * g[k];
      w[k] -= opt_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

NamedTensors Adam::state(const std::string& prefix) const {
  NamedTensors out;
  for (size_t i = 0; i < params_.size(); ++i) {
    out.emplace(prefix + params_[i].name + ".m", m_[i]);
    out.emplace(prefix + params_[i].name + ".v", v_[i]);
  }
  out.emplace(prefix + "step", Tensor::scalar(static_cast<double>(t_)));
  return out;
}

void Adam::load_state(const NamedTensors& state, const std::string& prefix) {
  auto get = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = state.find(name);
    if (it == state.end()) fail(Errc::kData, "optimizer state is missing " + name);
    if (it->second.shape() != shape) fail(Errc::kData, "optimizer state " + name + " has the wrong shape");
    return it->second;
  };
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i] = get(prefix + params_[i].name + ".m", params_[i].var.shape());
    v_[i] = get(prefix + params_[i].name + ".v", params_[i].var.shape());
  }
  t_ = static_cast<int64_t>(get(prefix + "step", {1})[0]);
}

}  // namespace dmvton::optim
