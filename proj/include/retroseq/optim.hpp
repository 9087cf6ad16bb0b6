#pragma once

#include <cstdint>
#include <vector>

#include "retroseq/tensor.hpp"

namespace retroseq {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment buffers kept in f64 regardless of parameter precision.
struct OptimizerState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

OptimizerState make_adam_state(const std::vector<Tensor>& params, AdamOptions options = {});

/// One bias-corrected Adam step over `params` (in place) using the matching
/// entries of `grads`. Throws ShapeError when sizes disagree.
void adam_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                 OptimizerState& state);
void adam_update(std::vector<Tensor>& params, const Gradients& grads, OptimizerState& state);

}  // namespace retroseq
