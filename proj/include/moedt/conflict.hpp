#pragma once

// Per-task gradients, gradient similarity and agreement vectors, task
// grouping (random and k-means) and balanced task-subset sampling.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedt/model.hpp"
#include "moedt/tasks.hpp"

namespace moedt {

// Which parameters a gradient vector covers.
struct GradScope {
  enum class Kind { all_backbone, ffn_only, experts, expert };
  Kind kind = Kind::all_backbone;
  int expert = -1;  // Kind::expert only

  static GradScope all_backbone() { return {Kind::all_backbone, -1}; }
  static GradScope ffn_only() { return {Kind::ffn_only, -1}; }
  static GradScope experts() { return {Kind::experts, -1}; }
  static GradScope expert_of(int i) { return {Kind::expert, i}; }

  bool includes(const std::string& name, const Component& c) const;
  std::string str() const;
  static GradScope parse(const std::string& text);
};

struct GradientReport {
  GradScope scope;
  int batches_per_task = 0;
  std::vector<int> task_ids;
  std::vector<std::vector<double>> per_task;
  std::vector<double> mean_gradient;

  nlohmann::json to_json() const;
};

// Builds a report from given vectors (all of one length).
GradientReport make_report(std::vector<int> task_ids, std::vector<std::vector<double>> grads,
                           GradScope scope = GradScope::all_backbone(), int batches = 1);

struct GradientOptions {
  GradScope scope = GradScope::all_backbone();
  int batches_per_task = 8;
  int batch_size = 16;
  Routing routing = Routing::backbone_only();
  // Used by hard/oracle routing; tasks missing here fall back to routing.expert.
  std::map<int, int> expert_of_task;
};

// g_i = mean over minibatch gradients of dt_loss on task i, flattened over
// the scope in name order. Dropout is off. `params` is not modified.
GradientReport per_task_gradients(const ParamSet<float>& params, const ModelConfig& cfg,
                                  const MoEConfig& moe, const DatasetStore& store,
                                  const std::vector<int>& task_ids, const GradientOptions& opts,
                                  uint64_t seed);

constexpr double kNormTolerance = 1e-12;

struct Similarity {
  bool defined = false;
  double value = 0.0;      // mean cosine over included tasks
  int excluded_tasks = 0;  // zero-gradient tasks left out of the mean

  double conflict() const { return 1.0 - value; }
};

Similarity gradient_similarity(const GradientReport& report);

std::vector<std::vector<double>> agreement_vectors(const GradientReport& report,
                                                   bool l2_normalize = false);

struct GroupAssignment {
  std::string method;
  int n_groups = 0;
  std::map<int, int> group_of;  // task id -> group

  std::vector<std::vector<int>> groups() const;
  void validate() const;
  nlohmann::json to_json() const;
  static GroupAssignment from_json(const nlohmann::json& j);
};

GroupAssignment random_grouping(const std::vector<int>& task_ids, int n_groups, uint64_t seed);

struct KMeansResult {
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  std::vector<double> wcss_history;  // after each centroid update
  int iterations = 0;
};

// Labels are renumbered by first appearance. With restarts > 1, independently
// seeded runs are compared and the one with the lowest final WCSS is kept.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                    int max_iters = 100, int restarts = 1);

GroupAssignment kmeans_grouping(const std::vector<int>& task_ids,
                                const std::vector<std::vector<double>>& agreement, int k,
                                uint64_t seed, int max_iters = 100, int restarts = 10);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

struct SubsetOptions {
  double difficulty_tolerance = 2.0;
  int max_draws = 10000;
};

struct SubsetResult {
  std::vector<int> tasks;  // ascending
  int draws = 0;
};

SubsetResult task_subset_sampler(const std::vector<int>& pool,
                                 const std::map<int, double>& difficulty,
                                 const std::map<int, Family>& family, int n, uint64_t seed,
                                 const SubsetOptions& opts = {});

}  // namespace moedt
