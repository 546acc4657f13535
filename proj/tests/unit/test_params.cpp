#include <doctest.h>

#include <cmath>

#include "moedt/error.hpp"
#include "moedt/optim.hpp"
#include "support.hpp"

using namespace moedt;

namespace {

ParamSet<float> small_set() {
  ParamSet<float> p;
  p.add("b.w", {2, 2}, {1, 2, 3, 4}, Component::backbone());
  p.add("a.bias", {2}, {0.5f, -0.5f}, Component::backbone());
  p.add("expert0.x", {3}, {1, 1, 1}, Component::expert_of(0));
  p.add("router.r", {1}, {7}, Component::router());
  return p;
}

}  // namespace

TEST_CASE("component names round trip") {
  for (const auto& c : {Component::backbone(), Component::router(), Component::expert_of(3)}) {
    CHECK(Component::parse(c.str()) == c);
  }
  CHECK(Component::expert_of(2).str() == "expert:2");
  CHECK_THROWS(Component::parse("nonsense"));
}

TEST_CASE("param set basics") {
  ParamSet<float> p = small_set();
  CHECK(p.size() == 4);
  CHECK(p.numel() == 10);
  CHECK(p.names() == std::vector<std::string>{"a.bias", "b.w", "expert0.x", "router.r"});
  CHECK(p.components().size() == 3);
  CHECK_THROWS(p.add("a.bias", {1}, {0}, Component::backbone()));
  CHECK_THROWS(p.add("bad", {2}, {0}, Component::backbone()));
  CHECK_THROWS(p.entry("missing"));

  // Copies are deep.
  ParamSet<float> q = p;
  q.entry("b.w").tensor.mutable_data()[0] = 100.0f;
  CHECK(p["b.w"].data()[0] == 1.0f);
  CHECK(differing_entries(q, p) == std::vector<std::string>{"b.w"});
}

TEST_CASE("flatten and unflatten are inverse (property)") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    ParamSet<float> p;
    const int n = 1 + static_cast<int>(rng.below(5));
    for (int i = 0; i < n; ++i) {
      const int64_t r = 1 + static_cast<int64_t>(rng.below(4)), c = 1 + static_cast<int64_t>(rng.below(4));
      std::vector<float> v(static_cast<size_t>(r * c));
      for (float& x : v) x = static_cast<float>(rng.normal());
      p.add("p" + std::to_string(rng.next() % 1000) + "_" + std::to_string(i), {r, c}, v, Component::backbone());
    }
    const auto flat = p.flatten();
    CHECK(static_cast<int64_t>(flat.size()) == p.numel());
    ParamSet<float> q = p;
    std::vector<float> zeros(flat.size(), 0.0f);
    q.unflatten(zeros);
    q.unflatten(flat);
    CHECK(differing_entries(p, q).empty());
  }
  ParamSet<float> p = small_set();
  std::vector<float> short_flat(3, 0.0f);
  CHECK_THROWS_AS(p.unflatten(short_flat), ShapeError);
}

TEST_CASE("subset, merge, cast and freeze") {
  ParamSet<float> p = small_set();
  const auto experts = p.subset([](const Component& c) { return c.kind == Component::Kind::expert; });
  CHECK(experts.names() == std::vector<std::string>{"expert0.x"});

  ParamSet<float> base = p.subset([](const Component& c) { return c.kind == Component::Kind::backbone; });
  base.merge(experts);
  CHECK(base.size() == 3);

  const auto d = p.cast<double>();
  CHECK(d["b.w"].data()[3] == 4.0);
  CHECK(d.entry("router.r").component == Component::router());

  freeze(p, {Component::backbone()});
  CHECK_FALSE(p.entry("b.w").trainable);
  CHECK(p.entry("expert0.x").trainable);
  CHECK_THROWS(freeze(p, {Component::expert_of(9)}));

  const auto only_router = differing_entries(small_set(), p, [](const Component& c) {
    return c.kind == Component::Kind::router;
  });
  CHECK(only_router.empty());
}

TEST_CASE("forward_backward returns gradients only for trainable, touched entries") {
  ParamSet<double> p;
  p.add("x", {1, 2}, {1.0, 2.0}, Component::backbone());
  p.add("y", {1, 1}, {3.0}, Component::backbone(), false);
  p.add("unused", {1}, {0.0}, Component::backbone());
  const auto r = forward_backward<double>(p, [](const ParamSet<double>& ps) {
    return sum(mul(mul(ps["x"], ps["x"]), concat_cols<double>({ps["y"], ps["y"]})));
  });
  CHECK(r.loss == doctest::Approx(15.0));
  REQUIRE(r.grads.count("x"));
  CHECK(r.grads.at("x")[1] == doctest::Approx(12.0));
  CHECK_FALSE(r.grads.count("y"));
  CHECK_FALSE(r.grads.count("unused"));
}

TEST_CASE("adam step matches the bias-corrected update computed by hand") {
  ParamSet<float> p;
  p.add("w", {2}, {1.0f, -1.0f}, Component::backbone());
  p.add("frozen", {1}, {5.0f}, Component::backbone(), false);
  AdamState s = AdamState::init(p, 0.1);
  CHECK_FALSE(s.first_moment.count("frozen"));

  const std::vector<std::vector<float>> grads = {{0.5f, -2.0f}, {0.25f, 1.0f}};
  double m[2] = {0, 0}, v[2] = {0, 0}, w[2] = {1.0, -1.0};
  for (int t = 1; t <= 2; ++t) {
    adam_step(p, {{"w", grads[t - 1]}, {"frozen", {1.0f}}}, s);
    for (int i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      w[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p["w"].data()[i] == doctest::Approx(w[i]).epsilon(1e-6));
    }
  }
  CHECK(p["frozen"].data()[0] == 5.0f);
  CHECK_THROWS(adam_step(p, {{"nope", {1.0f}}}, s));
  CHECK_THROWS_AS(adam_step(p, {{"w", {1.0f}}}, s), ShapeError);

  p.entry("w").trainable = false;
  s.drop_frozen(p);
  CHECK(s.first_moment.empty());
}

TEST_CASE("grad_check flags a wrong gradient") {
  ParamSet<double> p;
  p.add("x", {3}, {0.3, -0.7, 1.1}, Component::backbone());
  CHECK(grad_check(p, [](const ParamSet<double>& ps) { return sum(tanh(ps["x"])); }) < 1e-8);
  // Values only, no backward path: the analytic gradient is zero but the
  // function still changes.
  const double bad = grad_check(p, [](const ParamSet<double>& ps) {
    return Tensor<double>::scalar(ps["x"].data()[0] * 2.0);
  });
  CHECK(bad == doctest::Approx(2.0 / 2.0).epsilon(1e-6));
}
