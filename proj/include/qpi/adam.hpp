#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qpi/tensor.hpp"

namespace qpi::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

AdamState make_adam_state(std::span<Tensor* const> params, const AdamConfig& config = {});

// One bias-corrected Adam update using each parameter's grad buffer.
// Non-finite gradients abort the step (parameters and state untouched) with
// a NumericError naming the offending parameter.
void adam_step(AdamState& state, std::span<Tensor* const> params);

}  // namespace qpi::nn
