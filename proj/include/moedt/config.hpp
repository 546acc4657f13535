#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedt/evaluate.hpp"
#include "moedt/model.hpp"
#include "moedt/tasks.hpp"

namespace moedt {

struct SuiteConfig {
  SuiteSpec spec;
  int trajectories_per_task = 40;
  NoiseSchedule noise;
  int oracle_episodes = 100;
  int subset = 0;  // >0: train on a balanced subset of this many tasks
};

struct EarlyStopConfig {
  bool enabled = true;
  int smoothing_window = 5;
  int patience = 3;
};

struct TrainingConfig {
  int batch_size = 16;
  double lr = 1e-4;
  int64_t steps_stage1 = 20000;
  int64_t steps_stage2 = 10000;
  int64_t steps_stage3 = 20000;
  int64_t sim_log_interval = 500;
  int grad_batches = 8;
  int grad_batch_size = 16;
  EarlyStopConfig early_stop;
};

struct GroupingConfig {
  std::string method = "gradient";  // random | gradient
  int n_groups = 4;
  int kmeans_max_iters = 100;
  int kmeans_restarts = 10;
  bool l2_normalize = false;
};

struct EvaluationConfig {
  int episodes = 10;
  std::vector<uint64_t> seeds = {0, 1, 2};
  TargetReturn target = TargetReturn::r_max;
};

struct ExperimentConfig {
  SuiteConfig suite;
  ModelConfig model;
  MoEConfig moe;
  TrainingConfig training;
  GroupingConfig grouping;
  EvaluationConfig evaluation;
  uint64_t seed = 0;
  std::string output_dir = "out";

  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Unknown keys anywhere are an error; missing keys keep their defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  // FNV-1a of the canonical JSON form without output_dir, as 16 hex digits.
  std::string hash() const;
};

}  // namespace moedt
