#include "retroseq/optim.hpp"

#include <cmath>
#include <string>

namespace retroseq {

OptimizerState make_adam_state(const std::vector<Tensor>& params, AdamOptions options) {
  OptimizerState state;
  state.options = options;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.numel(), 0.0);
    state.second_moment.emplace_back(p.numel(), 0.0);
  }
  return state;
}

void adam_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                 OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw ShapeError("adam_update: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " +
                     std::to_string(state.first_moment.size()) + " moment buffers");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() != grads[i].numel() ||
        params[i].numel() != state.first_moment[i].size())
      throw ShapeError("adam_update: parameter " + std::to_string(i) + " of shape " +
                       shape_str(params[i].shape()) + " vs gradient " +
                       shape_str(grads[i].shape()));
  }
  const auto& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Buffer& w = params[i].mutable_buffer();
    const Buffer& g = grads[i].buffer();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double gj = g.get(j);
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * gj;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * gj * gj;
      const double step = o.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + o.epsilon);
      if (step != 0.0) w.set(j, w.get(j) - step);
    }
  }
}

void adam_update(std::vector<Tensor>& params, const Gradients& grads, OptimizerState& state) {
  std::vector<Tensor> ordered;
  ordered.reserve(params.size());
  for (const auto& p : params) ordered.push_back(grads.get(p));
  adam_update(params, ordered, state);
}

}  // namespace retroseq
