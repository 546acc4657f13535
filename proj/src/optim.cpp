#include "moedt/optim.hpp"

#include <algorithm>
#include <cmath>

namespace moedt {

template <typename T>
LossAndGrads<T> forward_backward(ParamSet<T>& params, const LossFn<T>& loss_fn) {
  params.sync_requires_grad();
  params.zero_grads();
  LossAndGrads<T> out;
  {
    Tensor<T> loss = loss_fn(params);
    if (loss.numel() != 1) {
      throw ShapeError("forward_backward: loss of shape " + shape_str(loss.shape()) +
                       " is not a scalar");
    }
    out.loss = loss.item();
    loss.backward();
  }
  for (auto& [name, e] : params) {
    if (e.trainable && e.tensor.has_grad()) {
      auto g = e.tensor.grad();
      out.grads.emplace(name, std::vector<T>(g.begin(), g.end()));
    }
  }
  params.zero_grads();
  return out;
}

template LossAndGrads<float> forward_backward(ParamSet<float>&, const LossFn<float>&);
template LossAndGrads<double> forward_backward(ParamSet<double>&, const LossFn<double>&);

double grad_check(ParamSet<double>& params, const LossFn<double>& loss_fn, double eps) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");
  const auto analytic = forward_backward(params, loss_fn);
  auto eval = [&]() {
    NoGradGuard guard;
    return loss_fn(params).item();
  };
  double worst = 0.0;
  for (auto& [name, e] : params) {
    if (!e.trainable) continue;
    auto it = analytic.grads.find(name);
    auto values = e.tensor.mutable_data();
    for (size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = eval();
      values[i] = orig - eps;
      const double down = eval();
      values[i] = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double an = it == analytic.grads.end() ? 0.0 : it->second[i];
      worst = std::max(worst, std::abs(an - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

AdamState AdamState::init(const ParamSet<float>& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& [name, e] : params) {
    if (!e.trainable) continue;
    s.first_moment[name].assign(e.tensor.data().size(), 0.0f);
    s.second_moment[name].assign(e.tensor.data().size(), 0.0f);
  }
  return s;
}

void AdamState::drop_frozen(const ParamSet<float>& params) {
  for (const auto& [name, e] : params) {
    if (e.trainable) continue;
    first_moment.erase(name);
    second_moment.erase(name);
  }
}

void adam_step(ParamSet<float>& params, const GradMap<float>& grads, AdamState& state) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw Error("adam_step: gradient for unknown parameter '" + name + "'");
    const auto& e = params.entry(name);
    if (!e.trainable) continue;
    if (!state.first_moment.count(name) || !state.second_moment.count(name)) {
      throw Error("adam_step: missing moment entry for '" + name + "'");
    }
    if (g.size() != e.tensor.data().size()) {
      throw ShapeError("adam_step: gradient size mismatch for '" + name + "'");
    }
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const float bc1 = static_cast<float>(1.0 - std::pow(state.beta1, t));
  const float bc2 = static_cast<float>(1.0 - std::pow(state.beta2, t));
  const float b1 = static_cast<float>(state.beta1);
  const float b2 = static_cast<float>(state.beta2);
  const float lr = static_cast<float>(state.lr);
  const float eps = static_cast<float>(state.eps);
  for (const auto& [name, g] : grads) {
    auto& e = params.entry(name);
    if (!e.trainable) continue;
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    auto p = e.tensor.mutable_data();
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const float mhat = m[i] / bc1;
      const float vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace moedt
