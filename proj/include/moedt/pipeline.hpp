#pragma once

// The staged training procedure (backbone, grouped experts, router), its
// ablation variants, and evaluation reporting.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedt/config.hpp"
#include "moedt/conflict.hpp"
#include "moedt/metrics.hpp"
#include "moedt/params.hpp"

namespace moedt {

DatasetStore generate_data(const ExperimentConfig& cfg);

// All task ids, or a balanced subset when suite.subset > 0.
std::vector<int> select_tasks(const ExperimentConfig& cfg, const DatasetStore& store);

struct SimilaritySample {
  int64_t step = 0;
  Similarity similarity;
  double smoothed_conflict = 0.0;
};

// Stopping rule on the conflict curve: trailing moving average of
// (1 - similarity) over `window` samples; fires once the smoothed value has
// failed to exceed its running maximum for `patience` consecutive samples.
class EarlyStopper {
 public:
  EarlyStopper(int window, int patience) : window_(window), patience_(patience) {}

  // Returns true when the rule fires. Undefined similarities are ignored.
  bool observe(int64_t step, const Similarity& s);
  double last_smoothed() const { return last_smoothed_; }
  // Step of the running maximum, or -1 before any defined sample.
  int64_t best_step() const { return best_step_; }
  bool improved() const { return improved_; }

 private:
  int window_;
  int patience_;
  std::vector<double> recent_;
  double best_ = 0.0;
  int64_t best_step_ = -1;
  int stale_ = 0;
  bool improved_ = false;
  double last_smoothed_ = 0.0;
};

struct Stage1Result {
  ParamSet<float> selected;
  ParamSet<float> final;
  int64_t selected_step = 0;
  int64_t final_step = 0;
  bool early_stopped = false;
  std::vector<SimilaritySample> curve;
  std::optional<double> similarity_at_selected;

  nlohmann::ordered_json summary() const;
};

Stage1Result run_stage1(const ExperimentConfig& cfg, const DatasetStore& store,
                        const std::vector<int>& tasks, uint64_t seed, MetricsWriter* metrics);

// `method` is "random" or "gradient" (k-means on agreement vectors).
GroupAssignment group_tasks(const ExperimentConfig& cfg, const DatasetStore& store,
                            const std::vector<int>& tasks, const ParamSet<float>& backbone,
                            const std::string& method, uint64_t seed);

struct Stage2Result {
  ParamSet<float> params;  // backbone + experts
  // Mean expert-scope similarity over logged samples, per expert.
  std::map<int, double> expert_similarity;
};

// Adds function-preserving experts around `backbone` and trains expert j on
// group j with hard(j) routing; everything else frozen. Jobs are independent
// and merged by name.
Stage2Result run_stage2(const ExperimentConfig& cfg, const DatasetStore& store,
                        const ParamSet<float>& backbone, const GroupAssignment& groups,
                        uint64_t seed, MetricsWriter* metrics);

struct Stage3Options {
  Routing routing = Routing::dense();
  bool freeze_experts = true;
};

// Adds a router (if absent) and trains it on all tasks.
ParamSet<float> run_stage3(const ExperimentConfig& cfg, const DatasetStore& store,
                           const std::vector<int>& tasks, const ParamSet<float>& stage2,
                           uint64_t seed, MetricsWriter* metrics, const Stage3Options& opts = {});

struct EvalReport {
  std::string mode;
  std::vector<double> per_seed;
  std::map<int, double> per_task;  // averaged over seeds
  double mean = 0.0;

  nlohmann::ordered_json to_json() const;
};

// One eval metrics row per evaluation seed.
EvalReport evaluate_model(const ExperimentConfig& cfg, const DatasetStore& store,
                          const std::vector<int>& tasks, const ParamSet<float>& params,
                          const Routing& routing, const std::map<int, int>& expert_of_task,
                          MetricsWriter* metrics);

struct VariantResult {
  std::string variant;
  EvalReport eval;
  std::optional<EvalReport> oracle;  // oracle_eval only
  std::optional<GroupAssignment> groups;
  ParamSet<float> params;
  std::optional<double> expert_similarity;  // during expert training
  bool reused_stage1 = false;

  nlohmann::ordered_json to_json() const;
};

// Variants: three_stage, e2e, no_grouping, no_expert_freeze, oracle_eval,
// topk:<k>, small. `stage1` is reused when given and the variant includes
// a stage 1 with the configured widths.
VariantResult run_variant(const ExperimentConfig& cfg, const DatasetStore& store,
                          const std::vector<int>& tasks, const std::string& variant,
                          uint64_t seed, MetricsWriter* metrics,
                          const Stage1Result* stage1 = nullptr);

ExperimentConfig small_config(const ExperimentConfig& cfg);

std::map<int, int> expert_map(const GroupAssignment& groups);

}  // namespace moedt
