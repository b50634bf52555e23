#include "qpi/adam.hpp"

#include <cmath>
#include <string>

#include "qpi/error.hpp"

namespace qpi::nn {

AdamState make_adam_state(std::span<Tensor* const> params, const AdamConfig& config) {
  AdamState state;
  state.config = config;
  for (const Tensor* p : params) {
    state.first_moment.emplace_back(p->shape());
    state.second_moment.emplace_back(p->shape());
  }
  return state;
}

void adam_step(AdamState& state, std::span<Tensor* const> params) {
  if (params.size() != state.first_moment.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters but state holds " +
                         std::to_string(state.first_moment.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = *params[i];
    if (!p.has_grad() || p.shape() != state.first_moment[i].shape()) {
      throw DimensionError("adam_step: parameter " + std::to_string(i) + " shape/grad mismatch");
    }
    const auto grad = p.grad();
    for (std::size_t j = 0; j < grad.size(); ++j) {
      if (!std::isfinite(grad[j])) {
        throw NumericError("adam_step: non-finite gradient " + std::to_string(grad[j]) + " in parameter " +
                           std::to_string(i) + " element " + std::to_string(j) + "; step aborted");
      }
    }
  }

  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    const auto grad = p.grad();
    for (std::size_t j = 0; j < grad.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad[j] * grad[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      p[j] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace qpi::nn
