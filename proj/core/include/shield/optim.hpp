#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "shield/tensor.hpp"

namespace shield {

struct AdamConfig {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam moments for an ordered parameter list. The caller must pass the
// same parameter order to every step() call.
class AdamState {
public:
  AdamState(const std::vector<Tensor*>& params, AdamConfig config = {});

  // One bias-corrected Adam update in place. grads must align with the
  // parameter list element-by-element.
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);

  int64_t steps() const { return step_count_; }
  const AdamConfig& config() const { return config_; }

private:
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  int64_t step_count_ = 0;
};

// Scales all gradients by max_norm/norm when the joint L2 norm exceeds
// max_norm. Returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

// Central differences (f(x+h e_k) - f(x-h e_k)) / 2h per coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& loss_fn,
                                  const Tensor& point, double step);

}  // namespace shield
