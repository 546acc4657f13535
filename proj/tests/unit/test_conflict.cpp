#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "moedt/conflict.hpp"
#include "moedt/error.hpp"
#include "moedt/rng.hpp"

using namespace moedt;

namespace {

// Pair-counting ARI straight from the contingency definition, over all pairs.
double ari_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size();
  double both = 0, in_a = 0, in_b = 0, pairs = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      in_a += sa;
      in_b += sb;
      pairs += 1;
    }
  }
  const double expected = in_a * in_b / pairs;
  const double max_index = 0.5 * (in_a + in_b);
  if (max_index == expected) return 1.0;
  return (both - expected) / (max_index - expected);
}

double wcss_of(const std::vector<std::vector<double>>& pts, const std::vector<int>& labels, int k) {
  std::vector<std::vector<double>> c(static_cast<size_t>(k), std::vector<double>(pts[0].size(), 0.0));
  std::vector<int> count(static_cast<size_t>(k), 0);
  for (size_t i = 0; i < pts.size(); ++i) {
    ++count[labels[i]];
    for (size_t d = 0; d < pts[i].size(); ++d) c[labels[i]][d] += pts[i][d];
  }
  for (int j = 0; j < k; ++j)
    for (double& x : c[j]) x /= count[j];
  double w = 0;
  for (size_t i = 0; i < pts.size(); ++i)
    for (size_t d = 0; d < pts[i].size(); ++d) w += std::pow(pts[i][d] - c[labels[i]][d], 2);
  return w;
}

std::vector<std::vector<double>> planted_points(int k, int per, double spread, uint64_t seed,
                                                std::vector<int>& truth) {
  Rng rng(seed);
  std::vector<std::vector<double>> pts;
  truth.clear();
  for (int c = 0; c < k; ++c) {
    std::vector<double> centre = {10.0 * c, -7.0 * c * c, 3.0};
    for (int i = 0; i < per; ++i) {
      auto p = centre;
      for (double& x : p) x += spread * rng.normal();
      pts.push_back(p);
      truth.push_back(c);
    }
  }
  return pts;
}

}  // namespace

TEST_CASE("similarity hand cases") {
  const auto ortho = gradient_similarity(make_report({0, 1}, {{1, 0}, {0, 1}}));
  REQUIRE(ortho.defined);
  CHECK(ortho.value == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(ortho.conflict() == doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)));

  const auto opposite = gradient_similarity(make_report({0, 1}, {{1, 2}, {-1, -2}}));
  CHECK_FALSE(opposite.defined);

  const auto aligned = gradient_similarity(make_report({0, 1, 2}, {{1, 1}, {2, 2}, {0.5, 0.5}}));
  CHECK(aligned.value == doctest::Approx(1.0));

  const auto with_zero = gradient_similarity(make_report({0, 1, 2}, {{1, 0}, {0, 0}, {1, 0}}));
  CHECK(with_zero.defined);
  CHECK(with_zero.excluded_tasks == 1);
  CHECK(with_zero.value == doctest::Approx(1.0));
}

TEST_CASE("similarity is bounded and scale invariant (property)") {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(6)), d = 1 + static_cast<int>(rng.below(8));
    std::vector<std::vector<double>> g(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(d)));
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) {
      ids.push_back(i);
      for (double& x : g[i]) x = rng.normal();
    }
    const auto s = gradient_similarity(make_report(ids, g));
    if (!s.defined) continue;
    CHECK(s.value <= 1.0 + 1e-12);
    CHECK(s.value >= -1.0 - 1e-12);
    for (auto& v : g)
      for (double& x : v) x *= 37.5;
    const auto scaled = gradient_similarity(make_report(ids, g));
    CHECK(scaled.value == doctest::Approx(s.value).epsilon(1e-9));
  }
}

TEST_CASE("agreement vectors are elementwise products with the mean") {
  const auto r = make_report({0, 1}, {{2, 0}, {0, 2}});
  const auto a = agreement_vectors(r);
  CHECK(a[0] == std::vector<double>{2, 0});
  CHECK(a[1] == std::vector<double>{0, 2});
  const auto n = agreement_vectors(r, true);
  CHECK(n[0][0] == doctest::Approx(1.0));
  CHECK_THROWS(make_report({0, 1}, {{1, 2}, {1}}));
}

TEST_CASE("grouping json round trip and validation") {
  const auto g = random_grouping({3, 5, 7, 9, 11}, 2, 4);
  CHECK(g.groups().size() == 2);
  std::set<int> all;
  for (const auto& grp : g.groups()) {
    CHECK_FALSE(grp.empty());
    all.insert(grp.begin(), grp.end());
  }
  CHECK(all == std::set<int>{3, 5, 7, 9, 11});
  const auto back = GroupAssignment::from_json(g.to_json());
  CHECK(back.group_of == g.group_of);
  CHECK(random_grouping({3, 5, 7, 9, 11}, 2, 4).group_of == g.group_of);
  CHECK_THROWS(random_grouping({1, 2}, 3, 0));

  GroupAssignment bad;
  bad.n_groups = 2;
  bad.group_of = {{0, 0}, {1, 0}};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("random grouping balances group sizes (property)") {
  for (uint64_t seed = 0; seed < 30; ++seed) {
    std::vector<int> ids;
    for (int i = 0; i < 5 + static_cast<int>(seed % 11); ++i) ids.push_back(i);
    const int k = 1 + static_cast<int>(seed % 4);
    const auto g = random_grouping(ids, k, seed);
    size_t lo = ids.size(), hi = 0;
    for (const auto& grp : g.groups()) {
      lo = std::min(lo, grp.size());
      hi = std::max(hi, grp.size());
    }
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("kmeans recovers well separated clusters") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<int> truth;
    const auto pts = planted_points(3, 6, 0.1, seed, truth);
    const auto r = kmeans(pts, 3, seed, 100, 5);
    CHECK(adjusted_rand_index(r.labels, truth) == doctest::Approx(1.0));
    CHECK(r.labels[0] == 0);  // renumbered by first appearance
    CHECK(r.wcss_history.back() == doctest::Approx(wcss_of(pts, r.labels, 3)).epsilon(1e-9));
  }
}

TEST_CASE("kmeans invariants (property)") {
  Rng rng(30);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(12)), k = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(n)));
    std::vector<std::vector<double>> pts(static_cast<size_t>(n), std::vector<double>(3));
    for (auto& p : pts)
      for (double& x : p) x = rng.normal();
    const auto r = kmeans(pts, k, rng.next());
    std::set<int> used(r.labels.begin(), r.labels.end());
    CHECK(static_cast<int>(used.size()) == k);
    for (size_t i = 1; i < r.wcss_history.size(); ++i) CHECK(r.wcss_history[i] <= r.wcss_history[i - 1] + 1e-9);
    // Each point sits with its nearest centroid at convergence.
    if (r.iterations < 100) {
      for (size_t i = 0; i < pts.size(); ++i) {
        double own = 0, best = 1e300;
        for (int j = 0; j < k; ++j) {
          double d = 0;
          for (size_t t = 0; t < 3; ++t) d += std::pow(pts[i][t] - r.centroids[j][t], 2);
          if (j == r.labels[i]) own = d;
          best = std::min(best, d);
        }
        CHECK(own <= best + 1e-9);
      }
    }
    // More restarts never end worse.
    const uint64_t s = rng.next();
    CHECK(kmeans(pts, k, s, 100, 8).wcss_history.back() <= kmeans(pts, k, s, 100, 1).wcss_history.back() + 1e-12);
  }
}

TEST_CASE("kmeans edge cases") {
  const std::vector<std::vector<double>> pts = {{0, 0}, {1, 0}, {5, 5}, {6, 5}};
  const auto one = kmeans(pts, 1, 2);
  CHECK(one.labels == std::vector<int>{0, 0, 0, 0});
  CHECK(one.centroids[0][0] == doctest::Approx(3.0));
  const auto all = kmeans(pts, 4, 2);
  CHECK(all.labels == std::vector<int>{0, 1, 2, 3});
  CHECK(all.wcss_history.back() == doctest::Approx(0.0));
  CHECK_THROWS(kmeans(pts, 5, 0));
  CHECK_THROWS(kmeans(pts, 0, 0));
  CHECK_THROWS(kmeans(pts, 2, 0, 100, 0));
  CHECK_THROWS(kmeans({{0, 0}, {NAN, 1}}, 1, 0));
  CHECK(kmeans(pts, 2, 9).labels == kmeans(pts, 2, 9).labels);

  const auto g = kmeans_grouping({10, 20, 30, 40}, pts, 2, 1);
  CHECK(g.group_of.at(10) == g.group_of.at(20));
  CHECK(g.group_of.at(30) == g.group_of.at(40));
  CHECK(g.group_of.at(10) != g.group_of.at(30));
}

TEST_CASE("ARI against the pair-count oracle (property)") {
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(-0.5));
  Rng rng(40);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(15));
    std::vector<int> a(static_cast<size_t>(n)), b(static_cast<size_t>(n));
    const uint64_t ka = 1 + rng.below(4), kb = 1 + rng.below(4);
    for (int i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng.below(ka));
      b[i] = static_cast<int>(rng.below(kb));
    }
    CHECK(adjusted_rand_index(a, b) == doctest::Approx(ari_oracle(a, b)).epsilon(1e-9));
    CHECK(adjusted_rand_index(a, b) == doctest::Approx(adjusted_rand_index(b, a)));
  }
  CHECK_THROWS(adjusted_rand_index({0, 1}, {0}));
}

TEST_CASE("subset sampler keeps family ratios and difficulty balance") {
  std::vector<int> pool;
  std::map<int, double> diff;
  std::map<int, Family> fam;
  for (int i = 0; i < 16; ++i) {
    pool.push_back(i);
    diff[i] = 10.0 + 5.0 * (i % 7);
    fam[i] = i < 6 ? Family::point_dir : i < 11 ? Family::point_vel : Family::point_reach;
  }
  double pool_mean = 0;
  for (int i : pool) pool_mean += diff[i];
  pool_mean /= 16;
  for (int n : {4, 8, 12}) {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      const auto r = task_subset_sampler(pool, diff, fam, n, seed);
      REQUIRE(static_cast<int>(r.tasks.size()) == n);
      CHECK(std::is_sorted(r.tasks.begin(), r.tasks.end()));
      CHECK(std::set<int>(r.tasks.begin(), r.tasks.end()).size() == r.tasks.size());
      std::map<Family, int> counts;
      double mean = 0;
      for (int t : r.tasks) {
        ++counts[fam[t]];
        mean += diff[t];
      }
      CHECK(std::abs(mean / n - pool_mean) <= 2.0);
      CHECK(std::abs(counts[Family::point_dir] - n * 6.0 / 16) <= 0.5);
      CHECK(std::abs(counts[Family::point_vel] - n * 5.0 / 16) <= 0.5);
      CHECK(std::abs(counts[Family::point_reach] - n * 5.0 / 16) <= 0.5);
    }
  }
  CHECK(task_subset_sampler(pool, diff, fam, 16, 0).tasks == pool);
  CHECK_THROWS(task_subset_sampler(pool, diff, fam, 17, 0));

  // Unsatisfiable: names the binding constraint.
  SubsetOptions tight;
  tight.difficulty_tolerance = -1.0;
  tight.max_draws = 20;
  try {
    task_subset_sampler(pool, diff, fam, 4, 0, tight);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("difficulty balance") != std::string::npos);
  }
}

TEST_CASE("gradient scope") {
  CHECK(GradScope::parse("expert:2").expert == 2);
  CHECK(GradScope::parse(GradScope::ffn_only().str()).kind == GradScope::Kind::ffn_only);
  CHECK_THROWS(GradScope::parse("bogus"));
  CHECK(GradScope::experts().includes("block0.expert1.fc1.w", Component::expert_of(1)));
  CHECK_FALSE(GradScope::expert_of(0).includes("block0.expert1.fc1.w", Component::expert_of(1)));
  CHECK_FALSE(GradScope::all_backbone().includes("router.w", Component::router()));
}
