#pragma once

// Closed-loop rollouts of return-conditioned policies on the task suite.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "moedt/model.hpp"
#include "moedt/tasks.hpp"

namespace moedt {

// What a policy sees for one running episode. `history` holds every step
// so far in native dims; its last entry is the current step, whose action
// is a zero placeholder and whose rtg is the remaining target return.
struct EpisodeView {
  const TaskSpec* task = nullptr;
  const StepWindow* prompt = nullptr;
  const StepWindow* history = nullptr;
};

// Returns one action (native dims) per episode.
using BatchPolicy =
    std::function<std::vector<std::vector<double>>(std::span<const EpisodeView>)>;

enum class TargetReturn { r_max, dataset_max };

TargetReturn parse_target_return(const std::string& text);
std::string to_string(TargetReturn t);

struct EvalOptions {
  int episodes = 10;
  int prompt_Kstar = 5;
  TargetReturn target = TargetReturn::r_max;
};

struct TaskEval {
  int task_id = 0;
  double mean_score = 0.0;
  double mean_return = 0.0;
  std::vector<double> returns;
};

// Runs every episode of every listed task in lockstep, one policy call per
// timestep. A fresh prompt is drawn per episode.
std::vector<TaskEval> evaluate_tasks(const BatchPolicy& policy, const DatasetStore& store,
                                     const std::vector<int>& task_ids, const EvalOptions& opts,
                                     uint64_t seed);

TaskEval evaluate_task(const BatchPolicy& policy, const TaskDataset& data,
                       const EvalOptions& opts, uint64_t seed);

// Equal-weight mean of per-task scores.
double mean_score(const std::vector<TaskEval>& evals);

BatchPolicy controller_policy();
BatchPolicy random_policy(uint64_t seed);

// Oracle routing needs `expert_of_task`; an empty map is an error.
BatchPolicy model_policy(const ParamSet<float>& params, const ModelConfig& cfg,
                         const MoEConfig& moe, const Routing& routing,
                         std::map<int, int> expert_of_task = {});

}  // namespace moedt
