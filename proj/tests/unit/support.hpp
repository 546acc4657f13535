#pragma once

#include <cmath>
#include <vector>

#include "moedt/params.hpp"
#include "moedt/rng.hpp"
#include "moedt/tensor.hpp"

namespace moedt::test {

inline std::vector<double> normals(size_t n, uint64_t key, double scale = 1.0) {
  Rng rng(key);
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline Tensor<double> random_leaf(Shape shape, uint64_t key, double scale = 1.0) {
  size_t n = 1;
  for (auto d : shape) n *= static_cast<size_t>(d);
  return Tensor<double>::from_data(shape, normals(n, key, scale), true);
}

// Wraps a few tensors into a ParamSet so grad_check can perturb them.
inline ParamSet<double> as_params(const std::vector<std::pair<std::string, Tensor<double>>>& items) {
  ParamSet<double> p;
  for (const auto& [name, t] : items) {
    p.add(name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()), Component::backbone());
  }
  return p;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace moedt::test
