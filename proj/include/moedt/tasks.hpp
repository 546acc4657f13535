#pragma once

// Synthetic point-mass control tasks, offline dataset generation and
// storage, score normalization, and prompt/segment sampling.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moedt/model.hpp"
#include "moedt/rng.hpp"

namespace moedt {

enum class Family { point_dir, point_vel, point_reach };

std::string to_string(Family f);
Family parse_family(const std::string& text);

constexpr double kDt = 0.1;
constexpr double kDirMaxSpeed = 2.0;

struct TaskSpec {
  int task_id = 0;
  Family family = Family::point_dir;
  // theta for point_dir, v* for point_vel, (gx, gy) for point_reach
  std::vector<double> parameter;
  int state_dim = 0;
  int action_dim = 0;
  int episode_len = 64;
  double discount = 0.99;  // carried for completeness; returns are undiscounted
  double r_min = 0.0;
  double r_max = 0.0;
  double difficulty = 0.0;
};

TaskSpec make_task(int task_id, Family family, std::vector<double> parameter, int episode_len);

struct SuiteSpec {
  int n_point_dir = 6;
  int n_point_vel = 5;
  int n_point_reach = 5;
  int episode_len = 64;
  double reach_radius = 0.8;
  // Fraction of each family's parameter range in use. Below 1 the tasks of a
  // family bunch together, with point_reach goals opposite the point_dir
  // headings.
  double parameter_spread = 1.0;
};

// Task ids are assigned in order: all point_dir, then point_vel, then point_reach.
std::vector<TaskSpec> make_suite(const SuiteSpec& spec);

struct StepResult {
  std::vector<double> next_state;
  double reward = 0.0;
};

// Pure dynamics. Actions are clipped to [-1, 1] first.
StepResult step_env(const TaskSpec& task, std::span<const double> state,
                    std::span<const double> action);

// Small random start around the origin.
std::vector<double> initial_state(const TaskSpec& task, uint64_t key);

// Noise-free proportional-derivative controller, already clipped to [-1, 1].
std::vector<double> controller_action(const TaskSpec& task, std::span<const double> state);

struct Trajectory {
  int task_id = 0;
  int state_dim = 0;
  int action_dim = 0;
  std::vector<float> states;   // [T * state_dim]
  std::vector<float> actions;  // [T * action_dim]
  std::vector<float> rewards;
  std::vector<float> rtg;
  std::vector<int64_t> timesteps;

  int length() const { return static_cast<int>(rewards.size()); }
  double episode_return() const;
};

// rtg[t] = sum of rewards[t..]; accumulated in double from the end.
std::vector<float> compute_rtg(std::span<const float> rewards);

struct NoiseSchedule {
  double start_std = 1.0;
  double end_std = 0.05;

  double std_for(int index, int count) const;
};

std::vector<Trajectory> generate_dataset(const TaskSpec& task, int n_traj,
                                         const NoiseSchedule& noise, uint64_t seed);

// Average return over `episodes` starts of the noise-free controller
// and of a uniform random policy.
struct ScoreRange {
  double r_min = 0.0;
  double r_max = 0.0;
};
ScoreRange score_range_oracle(const TaskSpec& task, int episodes, uint64_t seed);

double normalized_score(const TaskSpec& task, double episode_return);

// Zero-pads states and actions on the right to the given widths.
struct PaddedTrajectory {
  Trajectory traj;
  ActionMask mask;
};
PaddedTrajectory pad_and_mask(const Trajectory& traj, int max_state_dim, int max_action_dim);

struct TaskDataset {
  TaskSpec spec;
  std::vector<Trajectory> trajectories;
};

// Steps [begin, end) of a trajectory.
StepWindow window_of(const Trajectory& traj, int begin, int end);

// Contiguous Kstar-step window drawn uniformly over all windows of the
// top-return quartile of the dataset.
StepWindow sample_prompt(const TaskDataset& data, int kstar, uint64_t seed);

// Segment ending at a uniformly drawn step, at most K steps long.
StepWindow sample_segment(const Trajectory& traj, int context_K, Rng& rng);

// ---- storage -----------------------------------------------------------------

struct GenerationInfo {
  uint64_t seed = 0;
  int trajectories_per_task = 0;
  NoiseSchedule noise;
  int oracle_episodes = 100;
};

struct DatasetStore {
  GenerationInfo info;
  std::vector<TaskDataset> tasks;

  const TaskDataset& task(int task_id) const;
};

// Generates every task's data, score range and difficulty proxy.
DatasetStore build_store(const std::vector<TaskSpec>& specs, const GenerationInfo& info);

std::string trajectory_to_jsonl(const Trajectory& t);
Trajectory trajectory_from_json(const std::string& line);

// Writes manifest.json and datasets/task_<id>.jsonl under `dir`.
void save_store(const DatasetStore& store, const std::filesystem::path& dir);
// Reads them back; verifies every dataset file against the manifest hash.
DatasetStore load_store(const std::filesystem::path& dir);

// Round to 9 significant decimal digits.
double round9(double v);

}  // namespace moedt
