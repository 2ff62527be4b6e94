#include "shield/optim.hpp"

#include <cmath>
#include <string>

#include "shield/errors.hpp"

namespace shield {

AdamState::AdamState(const std::vector<Tensor*>& params, AdamConfig config)
    : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor* p : params) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void AdamState::step(const std::vector<Tensor*>& params,
                     const std::vector<Tensor>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads for state of " +
                     std::to_string(m_.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->size() != m_[i].size() || !grads[i].same_shape(*params[i]))
      throw ShapeError("adam_step: param " + std::to_string(i) + " shape " +
                       Tensor::shape_str(params[i]->shape) + " vs grad " +
                       Tensor::shape_str(grads[i].shape));
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    double* p = params[i]->values.data();
    const double* g = grads[i].values.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const size_t n = m_[i].size();
    for (size_t k = 0; k < n; ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip_global_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.values) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads)
      for (double& x : g.values) x *= s;
  }
  return norm;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& loss_fn,
                                  const Tensor& point, double step) {
  if (step <= 0.0) throw ConfigError("finite_difference_gradient: step must be > 0");
  Tensor grad(point.shape);
  Tensor x = point;
  for (size_t k = 0; k < x.size(); ++k) {
    const double orig = x.values[k];
    x.values[k] = orig + step;
    const double up = loss_fn(x);
    x.values[k] = orig - step;
    const double down = loss_fn(x);
    x.values[k] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_difference_gradient: non-finite loss at coordinate " +
                         std::to_string(k));
    grad.values[k] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace shield
