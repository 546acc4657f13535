#pragma once

#include <compare>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "moedt/tensor.hpp"

namespace moedt {

// Which part of the model a parameter belongs to.
struct Component {
  enum class Kind { backbone, expert, router };
  Kind kind = Kind::backbone;
  int expert = -1;  // only for Kind::expert

  static Component backbone() { return {Kind::backbone, -1}; }
  static Component expert_of(int i) { return {Kind::expert, i}; }
  static Component router() { return {Kind::router, -1}; }

  // "backbone", "router", "expert:<i>"
  std::string str() const;
  static Component parse(const std::string& text);

  auto operator<=>(const Component&) const = default;
};

// Named parameters with a component tag and a trainable flag each.
// Iteration is lexicographic by name. Copies are deep.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    Tensor<T> tensor;
    Component component;
    bool trainable = true;
  };

  ParamSet() = default;
  ParamSet(const ParamSet& other);
  ParamSet& operator=(const ParamSet& other);
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  void add(const std::string& name, Shape shape, std::vector<T> values,
           Component component, bool trainable = true);
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const Entry& entry(const std::string& name) const;
  Entry& entry(const std::string& name);
  const Tensor<T>& operator[](const std::string& name) const { return entry(name).tensor; }
  void erase(const std::string& name) { entries_.erase(name); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const;
  std::set<Component> components() const;
  int64_t numel() const;

  // Concatenation of all values in name order, and its inverse.
  std::vector<T> flatten() const;
  void unflatten(std::span<const T> flat);

  // Sets requires_grad on every leaf from its trainable flag.
  void sync_requires_grad();
  void zero_grads();

  // Entries whose component satisfies `keep`, deep-copied.
  ParamSet subset(const std::function<bool(const Component&)>& keep) const;
  // Inserts (or overwrites) every entry of `other`.
  void merge(const ParamSet& other);

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, e] : entries_) {
      std::vector<U> values(e.tensor.data().begin(), e.tensor.data().end());
      out.add(name, e.tensor.shape(), std::move(values), e.component, e.trainable);
    }
    return out;
  }

 private:
  std::map<std::string, Entry> entries_;
};

// Byte-level equality of every tensor in `a` restricted to names in `b`.
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b);

// Names of entries in `a` whose bytes differ from the same-named entry of `b`
// (entries present in only one set are reported too).
template <typename T>
std::vector<std::string> differing_entries(
    const ParamSet<T>& a, const ParamSet<T>& b,
    const std::function<bool(const Component&)>& filter = nullptr);

// Marks every entry in one of `components` non-trainable. Throws on a
// component that no entry carries.
template <typename T>
void freeze(ParamSet<T>& params, const std::set<Component>& components);

}  // namespace moedt
