#include "moedt/params.hpp"

#include <cstring>

namespace moedt {

std::string Component::str() const {
  switch (kind) {
    case Kind::backbone:
      return "backbone";
    case Kind::router:
      return "router";
    case Kind::expert:
      return "expert:" + std::to_string(expert);
  }
  return "?";
}

Component Component::parse(const std::string& text) {
  if (text == "backbone") return backbone();
  if (text == "router") return router();
  if (text.rfind("expert:", 0) == 0) {
    const std::string idx = text.substr(7);
    if (!idx.empty() && idx.find_first_not_of("0123456789") == std::string::npos) {
      return expert_of(std::stoi(idx));
    }
  }
  throw Error("unknown component '" + text + "'");
}

template <typename T>
ParamSet<T>::ParamSet(const ParamSet& other) {
  *this = other;
}

template <typename T>
ParamSet<T>& ParamSet<T>::operator=(const ParamSet& other) {
  if (this == &other) return *this;
  entries_.clear();
  for (const auto& [name, e] : other.entries_) {
    Entry copy{e.tensor.detach(), e.component, e.trainable};
    copy.tensor.set_requires_grad(e.tensor.requires_grad());
    entries_.emplace(name, std::move(copy));
  }
  return *this;
}

template <typename T>
void ParamSet<T>::add(const std::string& name, Shape shape, std::vector<T> values,
                      Component component, bool trainable) {
  if (entries_.count(name)) throw Error("duplicate parameter name '" + name + "'");
  auto t = Tensor<T>::from_data(std::move(shape), std::move(values), trainable);
  entries_.emplace(name, Entry{std::move(t), component, trainable});
}

template <typename T>
const typename ParamSet<T>::Entry& ParamSet<T>::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
typename ParamSet<T>::Entry& ParamSet<T>::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
std::vector<std::string> ParamSet<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& kv : entries_) out.push_back(kv.first);
  return out;
}

template <typename T>
std::set<Component> ParamSet<T>::components() const {
  std::set<Component> out;
  for (const auto& kv : entries_) out.insert(kv.second.component);
  return out;
}

template <typename T>
int64_t ParamSet<T>::numel() const {
  int64_t n = 0;
  for (const auto& kv : entries_) n += kv.second.tensor.numel();
  return n;
}

template <typename T>
std::vector<T> ParamSet<T>::flatten() const {
  std::vector<T> out;
  out.reserve(static_cast<size_t>(numel()));
  for (const auto& kv : entries_) {
    auto d = kv.second.tensor.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

template <typename T>
void ParamSet<T>::unflatten(std::span<const T> flat) {
  if (static_cast<int64_t>(flat.size()) != numel()) {
    throw ShapeError("unflatten: got " + std::to_string(flat.size()) +
                     " values for " + std::to_string(numel()) + " parameters");
  }
  size_t off = 0;
  for (auto& kv : entries_) {
    auto d = kv.second.tensor.mutable_data();
    std::copy_n(flat.begin() + off, d.size(), d.begin());
    off += d.size();
  }
}

template <typename T>
void ParamSet<T>::sync_requires_grad() {
  for (auto& kv : entries_) kv.second.tensor.set_requires_grad(kv.second.trainable);
}

template <typename T>
void ParamSet<T>::zero_grads() {
  for (auto& kv : entries_) kv.second.tensor.zero_grad();
}

template <typename T>
ParamSet<T> ParamSet<T>::subset(const std::function<bool(const Component&)>& keep) const {
  ParamSet out;
  for (const auto& [name, e] : entries_) {
    if (!keep(e.component)) continue;
    auto d = e.tensor.data();
    out.add(name, e.tensor.shape(), std::vector<T>(d.begin(), d.end()), e.component,
            e.trainable);
  }
  return out;
}

template <typename T>
void ParamSet<T>::merge(const ParamSet& other) {
  for (const auto& [name, e] : other.entries_) {
    auto d = e.tensor.data();
    entries_.erase(name);
    add(name, e.tensor.shape(), std::vector<T>(d.begin(), d.end()), e.component, e.trainable);
  }
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(T)) == 0;
}

template <typename T>
std::vector<std::string> differing_entries(
    const ParamSet<T>& a, const ParamSet<T>& b,
    const std::function<bool(const Component&)>& filter) {
  std::vector<std::string> out;
  for (const auto& [name, e] : a) {
    if (filter && !filter(e.component)) continue;
    if (!b.contains(name) || !bitwise_equal(e.tensor, b[name])) out.push_back(name);
  }
  for (const auto& [name, e] : b) {
    if (filter && !filter(e.component)) continue;
    if (!a.contains(name)) out.push_back(name);
  }
  return out;
}

template <typename T>
void freeze(ParamSet<T>& params, const std::set<Component>& components) {
  const auto present = params.components();
  for (const auto& c : components) {
    if (!present.count(c)) throw Error("freeze: unknown component " + c.str());
  }
  for (auto& [name, e] : params) {
    if (components.count(e.component)) {
      e.trainable = false;
      e.tensor.set_requires_grad(false);
    }
  }
}

template class ParamSet<float>;
template class ParamSet<double>;
template bool bitwise_equal(const Tensor<float>&, const Tensor<float>&);
template bool bitwise_equal(const Tensor<double>&, const Tensor<double>&);
template std::vector<std::string> differing_entries(
    const ParamSet<float>&, const ParamSet<float>&,
    const std::function<bool(const Component&)>&);
template std::vector<std::string> differing_entries(
    const ParamSet<double>&, const ParamSet<double>&,
    const std::function<bool(const Component&)>&);
template void freeze(ParamSet<float>&, const std::set<Component>&);
template void freeze(ParamSet<double>&, const std::set<Component>&);

}  // namespace moedt
