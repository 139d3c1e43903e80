#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmvton/nn.hpp"
#include "dmvton/weights.hpp"

namespace dmvton::optim {

// Adam with bias correction. Moments are kept per parameter in f64 so a
// checkpointed run resumes bit-exactly.
class Adam {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<nn::NamedParameter> params, Options opt);

  // Applies one update from the gradients currently held by the parameters.
  void step();
  void zero_grad();
  int64_t steps() const { return t_; }
  const std::vector<nn::NamedParameter>& params() const { return params_; }

  // "{prefix}{param}.m", "{prefix}{param}.v" and "{prefix}step".
  NamedTensors state(const std::string& prefix) const;
  void load_state(const NamedTensors& state, const std::string& prefix);

 private:
  std::vector<nn::NamedParameter> params_;
  Options opt_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

}  // namespace dmvton::optim
