#include "moedt/conflict.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "moedt/batching.hpp"
#include "moedt/error.hpp"
#include "moedt/optim.hpp"
#include "moedt/rng.hpp"

namespace moedt {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

int nearest(const std::vector<double>& p, const std::vector<std::vector<double>>& centroids) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

double wcss(const std::vector<std::vector<double>>& pts, const std::vector<int>& labels,
            const std::vector<std::vector<double>>& centroids) {
  double s = 0.0;
  for (size_t i = 0; i < pts.size(); ++i) s += sq_dist(pts[i], centroids[labels[i]]);
  return s;
}

double choose2(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

bool GradScope::includes(const std::string& name, const Component& c) const {
  switch (kind) {
    case Kind::all_backbone:
      return c.kind == Component::Kind::backbone;
    case Kind::ffn_only:
      return c.kind == Component::Kind::backbone && name.find(".ffn.") != std::string::npos;
    case Kind::experts:
      return c.kind == Component::Kind::expert;
    case Kind::expert:
      return c.kind == Component::Kind::expert && c.expert == expert;
  }
  return false;
}

std::string GradScope::str() const {
  switch (kind) {
    case Kind::all_backbone:
      return "all_backbone";
    case Kind::ffn_only:
      return "ffn_only";
    case Kind::experts:
      return "experts";
    case Kind::expert:
      return "expert:" + std::to_string(expert);
  }
  return "?";
}

GradScope GradScope::parse(const std::string& text) {
  if (text == "all_backbone") return all_backbone();
  if (text == "ffn_only") return ffn_only();
  if (text == "experts") return experts();
  if (text.rfind("expert:", 0) == 0) return expert_of(std::stoi(text.substr(7)));
  throw ConfigError("unknown gradient scope '" + text + "'");
}

nlohmann::json GradientReport::to_json() const {
  nlohmann::json j;
  j["scope"] = scope.str();
  j["batches_per_task"] = batches_per_task;
  j["task_ids"] = task_ids;
  j["per_task"] = per_task;
  j["mean_gradient"] = mean_gradient;
  return j;
}

GradientReport make_report(std::vector<int> task_ids, std::vector<std::vector<double>> grads,
                           GradScope scope, int batches) {
  if (task_ids.size() != grads.size() || grads.empty()) {
    throw Error("gradient report: need one gradient per task and at least one task");
  }
  GradientReport r;
  r.scope = scope;
  r.batches_per_task = batches;
  r.task_ids = std::move(task_ids);
  r.per_task = std::move(grads);
  const size_t n = r.per_task[0].size();
  r.mean_gradient.assign(n, 0.0);
  for (const auto& g : r.per_task) {
    if (g.size() != n) throw ShapeError("gradient report: vectors of different lengths");
    for (size_t i = 0; i < n; ++i) r.mean_gradient[i] += g[i];
  }
  for (double& m : r.mean_gradient) m /= static_cast<double>(r.per_task.size());
  return r;
}

GradientReport per_task_gradients(const ParamSet<float>& params, const ModelConfig& cfg,
                                  const MoEConfig& moe, const DatasetStore& store,
                                  const std::vector<int>& task_ids, const GradientOptions& opts,
                                  uint64_t seed) {
  if (opts.batches_per_task < 1) throw Error("per_task_gradients: batches_per_task must be >= 1");
  ParamSet<float> work = params;
  int64_t width = 0;
  for (auto& [name, e] : work) {
    e.trainable = opts.scope.includes(name, e.component);
    if (e.trainable) width += e.tensor.numel();
  }
  if (width == 0) throw Error("per_task_gradients: scope " + opts.scope.str() + " is empty");

  ForwardOptions fwd;
  fwd.routing = opts.routing;
  std::vector<std::vector<double>> grads;
  for (int task : task_ids) {
    if (store.task(task).trajectories.empty()) {
      throw Error("per_task_gradients: task " + std::to_string(task) + " has an empty dataset");
    }
    std::vector<double> acc(static_cast<size_t>(width), 0.0);
    for (int b = 0; b < opts.batches_per_task; ++b) {
      ModelBatch batch = sample_task_batch(cfg, store, task, opts.batch_size,
                                           hash_key({seed, static_cast<uint64_t>(b), 0x96}));
      if (auto it = opts.expert_of_task.find(task); it != opts.expert_of_task.end()) {
        batch.expert_per_sequence.assign(static_cast<size_t>(batch.batch), it->second);
      }
      const auto lg = forward_backward<float>(work, [&](const ParamSet<float>& p) {
        return dt_loss(forward(p, cfg, moe, batch, fwd), batch, cfg);
      });
      size_t off = 0;
      for (const auto& [name, e] : work) {
        if (!e.trainable) continue;
        const size_t n = static_cast<size_t>(e.tensor.numel());
        if (auto it = lg.grads.find(name); it != lg.grads.end()) {
          for (size_t i = 0; i < n; ++i) acc[off + i] += it->second[i];
        }
        off += n;
      }
    }
    for (double& g : acc) g /= opts.batches_per_task;
    grads.push_back(std::move(acc));
  }
  return make_report(task_ids, std::move(grads), opts.scope, opts.batches_per_task);
}

Similarity gradient_similarity(const GradientReport& report) {
  Similarity s;
  const double mean_norm = std::sqrt(dot(report.mean_gradient, report.mean_gradient));
  if (mean_norm <= kNormTolerance) return s;
  double total = 0.0;
  int used = 0;
  for (const auto& g : report.per_task) {
    const double n = std::sqrt(dot(g, g));
    if (n <= kNormTolerance) {
      ++s.excluded_tasks;
      continue;
    }
    total += std::clamp(dot(g, report.mean_gradient) / (n * mean_norm), -1.0, 1.0);
    ++used;
  }
  if (used == 0) return s;
  s.defined = true;
  s.value = total / used;
  return s;
}

std::vector<std::vector<double>> agreement_vectors(const GradientReport& report,
                                                   bool l2_normalize) {
  std::vector<std::vector<double>> out;
  for (const auto& g : report.per_task) {
    std::vector<double> a(g.size());
    for (size_t i = 0; i < g.size(); ++i) a[i] = g[i] * report.mean_gradient[i];
    if (l2_normalize) {
      const double n = std::sqrt(dot(a, a));
      if (n > kNormTolerance) {
        for (double& x : a) x /= n;
      }
    }
    out.push_back(std::move(a));
  }
  return out;
}

// ---- grouping -------------------------------------------------------------------

std::vector<std::vector<int>> GroupAssignment::groups() const {
  std::vector<std::vector<int>> out(static_cast<size_t>(n_groups));
  for (const auto& [task, g] : group_of) out.at(static_cast<size_t>(g)).push_back(task);
  return out;
}

void GroupAssignment::validate() const {
  if (n_groups < 1) throw Error("group assignment: n_groups must be >= 1");
  std::vector<int> sizes(static_cast<size_t>(n_groups), 0);
  for (const auto& [task, g] : group_of) {
    if (g < 0 || g >= n_groups) {
      throw Error("group assignment: task " + std::to_string(task) + " in group " +
                  std::to_string(g) + " outside [0, " + std::to_string(n_groups) + ")");
    }
    ++sizes[g];
  }
  for (int g = 0; g < n_groups; ++g) {
    if (sizes[g] == 0) throw Error("group assignment: group " + std::to_string(g) + " is empty");
  }
}

nlohmann::json GroupAssignment::to_json() const {
  nlohmann::ordered_json j;
  j["method"] = method;
  j["n_groups"] = n_groups;
  j["groups"] = groups();
  return j;
}

GroupAssignment GroupAssignment::from_json(const nlohmann::json& j) {
  GroupAssignment a;
  a.method = j.at("method").get<std::string>();
  a.n_groups = j.at("n_groups").get<int>();
  const auto gs = j.at("groups").get<std::vector<std::vector<int>>>();
  for (size_t g = 0; g < gs.size(); ++g) {
    for (int t : gs[g]) {
      if (!a.group_of.emplace(t, static_cast<int>(g)).second) {
        throw Error("group assignment: task " + std::to_string(t) + " listed twice");
      }
    }
  }
  a.validate();
  return a;
}

GroupAssignment random_grouping(const std::vector<int>& task_ids, int n_groups, uint64_t seed) {
  if (n_groups < 1 || n_groups > static_cast<int>(task_ids.size())) {
    throw Error("random_grouping: " + std::to_string(n_groups) + " groups for " +
                std::to_string(task_ids.size()) + " tasks");
  }
  std::vector<int> order = task_ids;
  Rng rng(hash_key({seed, 0x77}));
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  GroupAssignment a;
  a.method = "random";
  a.n_groups = n_groups;
  for (size_t i = 0; i < order.size(); ++i) a.group_of[order[i]] = static_cast<int>(i % n_groups);
  a.validate();
  return a;
}

namespace {

KMeansResult kmeans_once(const std::vector<std::vector<double>>& pts, int k, uint64_t seed,
                         int max_iters) {
  const size_t n = pts.size();
  if (k < 1 || k > static_cast<int>(n)) {
    throw Error("kmeans: k=" + std::to_string(k) + " for " + std::to_string(n) + " points");
  }
  for (const auto& p : pts) {
    if (p.size() != pts[0].size()) throw ShapeError("kmeans: points of different lengths");
    for (double x : p) {
      if (!std::isfinite(x)) throw Error("kmeans: non-finite input");
    }
  }

  // k-means++ seeding.
  Rng rng(hash_key({seed, 0x4b}));
  std::vector<std::vector<double>> centroids;
  std::vector<char> chosen(n, 0);
  size_t first = rng.below(n);
  centroids.push_back(pts[first]);
  chosen[first] = 1;
  std::vector<double> d2(n);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      d2[i] = sq_dist(pts[i], centroids[nearest(pts[i], centroids)]);
      total += d2[i];
    }
    size_t pick = n;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        if (u < d2[i]) break;
        u -= d2[i];
      }
    } else {
      std::vector<size_t> free;
      for (size_t i = 0; i < n; ++i) {
        if (!chosen[i]) free.push_back(i);
      }
      pick = free[rng.below(free.size())];
    }
    centroids.push_back(pts[pick]);
    chosen[pick] = 1;
  }

  KMeansResult r;
  std::vector<int> labels(n, -1);
  for (int it = 0; it < max_iters; ++it) {
    std::vector<int> next(n);
    for (size_t i = 0; i < n; ++i) next[i] = nearest(pts[i], centroids);

    // Repair empty clusters with the point farthest from its centroid.
    for (int c = 0; c < k; ++c) {
      std::vector<int> sizes(static_cast<size_t>(k), 0);
      for (int l : next) ++sizes[l];
      if (sizes[c] > 0) continue;
      size_t far = n;
      double far_d = -1.0;
      for (size_t i = 0; i < n; ++i) {
        if (sizes[next[i]] < 2) continue;
        const double d = sq_dist(pts[i], centroids[next[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      next[far] = c;
      centroids[c] = pts[far];
    }

    const bool converged = next == labels;
    labels = std::move(next);
    if (converged) break;
    r.iterations = it + 1;

    for (int c = 0; c < k; ++c) {
      std::vector<double> sum(pts[0].size(), 0.0);
      int count = 0;
      for (size_t i = 0; i < n; ++i) {
        if (labels[i] != c) continue;
        for (size_t d = 0; d < sum.size(); ++d) sum[d] += pts[i][d];
        ++count;
      }
      for (double& x : sum) x /= count;
      centroids[c] = std::move(sum);
    }
    r.wcss_history.push_back(wcss(pts, labels, centroids));
  }

  std::vector<int> relabel(static_cast<size_t>(k), -1);
  int next_id = 0;
  for (int l : labels) {
    if (relabel[l] < 0) relabel[l] = next_id++;
  }
  r.centroids.resize(static_cast<size_t>(k));
  for (int c = 0; c < k; ++c) r.centroids[relabel[c]] = centroids[c];
  for (int l : labels) r.labels.push_back(relabel[l]);
  return r;
}

}  // namespace

KMeansResult kmeans(const std::vector<std::vector<double>>& pts, int k, uint64_t seed,
                    int max_iters, int restarts) {
  if (restarts < 1) throw Error("kmeans: restarts must be >= 1");
  KMeansResult best;
  double best_wcss = 0.0;
  for (int r = 0; r < restarts; ++r) {
    const uint64_t key = r == 0 ? seed : hash_key({seed, static_cast<uint64_t>(r)});
    KMeansResult cur = kmeans_once(pts, k, key, max_iters);
    const double w = wcss(pts, cur.labels, cur.centroids);
    if (r == 0 || w < best_wcss) {
      best = std::move(cur);
      best_wcss = w;
    }
  }
  return best;
}

GroupAssignment kmeans_grouping(const std::vector<int>& task_ids,
                                const std::vector<std::vector<double>>& agreement, int k,
                                uint64_t seed, int max_iters, int restarts) {
  if (task_ids.size() != agreement.size()) {
    throw Error("kmeans_grouping: one agreement vector per task required");
  }
  if (k > static_cast<int>(task_ids.size())) {
    throw Error("kmeans_grouping: k=" + std::to_string(k) + " exceeds " +
                std::to_string(task_ids.size()) + " tasks");
  }
  const KMeansResult km = kmeans(agreement, k, seed, max_iters, restarts);
  GroupAssignment a;
  a.method = "gradient";
  a.n_groups = k;
  for (size_t i = 0; i < task_ids.size(); ++i) a.group_of[task_ids[i]] = km.labels[i];
  a.validate();
  return a;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw Error("adjusted_rand_index: label vectors differ in length");
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> ra, rb;
  for (size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [_, c] : table) index += choose2(c);
  for (const auto& [_, c] : ra) sa += choose2(c);
  for (const auto& [_, c] : rb) sb += choose2(c);
  const double total = choose2(static_cast<double>(a.size()));
  const double expected = total > 0.0 ? sa * sb / total : 0.0;
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

SubsetResult task_subset_sampler(const std::vector<int>& pool,
                                 const std::map<int, double>& difficulty,
                                 const std::map<int, Family>& family, int n, uint64_t seed,
                                 const SubsetOptions& opts) {
  if (n < 1 || n > static_cast<int>(pool.size())) {
    throw Error("task_subset_sampler: n=" + std::to_string(n) + " for a pool of " +
                std::to_string(pool.size()));
  }
  std::map<Family, double> pool_counts;
  double pool_mean = 0.0;
  for (int t : pool) {
    if (!difficulty.count(t) || !family.count(t)) {
      throw Error("task_subset_sampler: task " + std::to_string(t) + " lacks difficulty or family");
    }
    pool_mean += difficulty.at(t);
    pool_counts[family.at(t)] += 1.0;
  }
  pool_mean /= static_cast<double>(pool.size());

  Rng rng(hash_key({seed, 0x55}));
  int balance_failures = 0, ratio_failures = 0;
  for (int draw = 1; draw <= opts.max_draws; ++draw) {
    std::vector<int> order = pool;
    for (int i = 0; i < n; ++i) {
      std::swap(order[i], order[i + rng.below(order.size() - i)]);
    }
    order.resize(static_cast<size_t>(n));

    std::map<Family, double> counts;
    double mean = 0.0;
    for (int t : order) {
      mean += difficulty.at(t);
      counts[family.at(t)] += 1.0;
    }
    mean /= n;
    bool ratio_ok = true;
    for (const auto& [f, c] : pool_counts) {
      const double target = n * c / static_cast<double>(pool.size());
      if (std::abs(counts[f] - target) > 0.5 + 1e-9) ratio_ok = false;
    }
    const bool balance_ok = std::abs(mean - pool_mean) <= opts.difficulty_tolerance;
    if (ratio_ok && balance_ok) {
      std::sort(order.begin(), order.end());
      return {order, draw};
    }
    if (!ratio_ok) ++ratio_failures;
    if (!balance_ok) ++balance_failures;
  }
  const std::string binding =
      ratio_failures >= balance_failures ? "family ratio preservation" : "difficulty balance";
  throw Error("task_subset_sampler: no subset of " + std::to_string(n) + " satisfied the constraints in " +
              std::to_string(opts.max_draws) + " draws (binding constraint: " + binding +
              "; ratio failures " + std::to_string(ratio_failures) + ", balance failures " +
              std::to_string(balance_failures) + ")");
}

}  // namespace moedt
