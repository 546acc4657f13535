#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "moedt/params.hpp"

namespace moedt {

template <typename T>
using GradMap = std::map<std::string, std::vector<T>>;

template <typename T>
struct LossAndGrads {
  T loss{};
  // Only trainable parameters that the loss actually touched appear here.
  GradMap<T> grads;
};

template <typename T>
using LossFn = std::function<Tensor<T>(const ParamSet<T>&)>;

// Evaluates `loss_fn` once and differentiates it w.r.t. every trainable
// entry of `params`. Throws ShapeError if the loss is not a scalar.
template <typename T>
LossAndGrads<T> forward_backward(ParamSet<T>& params, const LossFn<T>& loss_fn);

// max over trainable coordinates of
//   |analytic - central_difference| / max(1, |central_difference|).
double grad_check(ParamSet<double>& params, const LossFn<double>& loss_fn,
                  double eps = 1e-5);

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::map<std::string, std::vector<float>> first_moment;
  std::map<std::string, std::vector<float>> second_moment;

  // Zero moments for every trainable entry.
  static AdamState init(const ParamSet<float>& params, double lr);
  // Forgets moments of entries that are no longer trainable.
  void drop_frozen(const ParamSet<float>& params);
};

// One bias-corrected Adam update. Non-trainable entries are skipped even if
// a gradient is supplied. Throws if a trainable entry with a gradient has no
// moment buffers or if a gradient names an unknown parameter.
void adam_step(ParamSet<float>& params, const GradMap<float>& grads, AdamState& state);

}  // namespace moedt
