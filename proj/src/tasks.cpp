#include "moedt/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "moedt/error.hpp"
#include "moedt/hash.hpp"

namespace moedt {

namespace {

constexpr double kInitRange = 0.1;
constexpr double kDirGain = 2.0;
constexpr double kVelGain = 2.0;
constexpr double kReachKp = 1.5;
constexpr double kReachKd = 2.5;

double clip1(double x) { return std::clamp(x, -1.0, 1.0); }

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(std::string("step_env: non-finite ") + what);
  }
}

using Policy = std::function<std::vector<double>(std::span<const double> state, Rng& rng)>;

// Runs one episode; returns the total reward and optionally records it.
double run_episode(const TaskSpec& task, uint64_t start_key, Rng& rng, const Policy& policy,
                   Trajectory* record) {
  std::vector<double> state = initial_state(task, start_key);
  double total = 0.0;
  for (int t = 0; t < task.episode_len; ++t) {
    std::vector<double> action = policy(state, rng);
    for (double& a : action) a = clip1(a);
    const StepResult r = step_env(task, state, action);
    if (record) {
      for (double s : state) record->states.push_back(static_cast<float>(s));
      for (double a : action) record->actions.push_back(static_cast<float>(a));
      record->rewards.push_back(static_cast<float>(r.reward));
      record->timesteps.push_back(t);
    }
    total += r.reward;
    state = r.next_state;
  }
  return total;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
  if (!out) throw Error("write failed for " + p.string());
}

template <typename V>
void append_array(std::string& out, const V& values, size_t begin, size_t end) {
  out += '[';
  for (size_t i = begin; i < end; ++i) {
    if (i > begin) out += ',';
    if constexpr (std::is_integral_v<typename V::value_type>) {
      out += std::to_string(values[i]);
    } else {
      out += fmt9(values[i]);
    }
  }
  out += ']';
}

void append_rows(std::string& out, const std::vector<float>& values, int width) {
  out += '[';
  const size_t rows = width > 0 ? values.size() / width : 0;
  for (size_t r = 0; r < rows; ++r) {
    if (r) out += ',';
    append_array(out, values, r * width, (r + 1) * width);
  }
  out += ']';
}

}  // namespace

std::string to_string(Family f) {
  switch (f) {
    case Family::point_dir:
      return "point_dir";
    case Family::point_vel:
      return "point_vel";
    case Family::point_reach:
      return "point_reach";
  }
  return "?";
}

Family parse_family(const std::string& text) {
  if (text == "point_dir") return Family::point_dir;
  if (text == "point_vel") return Family::point_vel;
  if (text == "point_reach") return Family::point_reach;
  throw ConfigError("unknown task family '" + text + "'");
}

TaskSpec make_task(int task_id, Family family, std::vector<double> parameter, int episode_len) {
  TaskSpec t;
  t.task_id = task_id;
  t.family = family;
  t.episode_len = episode_len;
  const size_t want = family == Family::point_reach ? 2 : 1;
  if (parameter.size() != want) {
    throw ConfigError(to_string(family) + " expects " + std::to_string(want) + " parameter(s)");
  }
  t.parameter = std::move(parameter);
  t.state_dim = family == Family::point_vel ? 2 : 4;
  t.action_dim = family == Family::point_vel ? 1 : 2;
  if (episode_len < 1) throw ConfigError("episode_len must be >= 1");
  return t;
}

std::vector<TaskSpec> make_suite(const SuiteSpec& spec) {
  if (spec.n_point_dir < 0 || spec.n_point_vel < 0 || spec.n_point_reach < 0) {
    throw ConfigError("suite: task counts must be >= 0");
  }
  if (!(spec.parameter_spread > 0.0 && spec.parameter_spread <= 1.0)) {
    throw ConfigError("suite: parameter_spread must be in (0, 1]");
  }
  const double f = spec.parameter_spread;
  std::vector<TaskSpec> out;
  int id = 0;
  for (int k = 0; k < spec.n_point_dir; ++k) {
    out.push_back(make_task(id++, Family::point_dir,
                            {2.0 * std::numbers::pi * f * k / spec.n_point_dir}, spec.episode_len));
  }
  for (int k = 0; k < spec.n_point_vel; ++k) {
    const double v = spec.n_point_vel == 1 ? 1.6 : 0.2 + 2.8 * f * k / (spec.n_point_vel - 1);
    out.push_back(make_task(id++, Family::point_vel, {v}, spec.episode_len));
  }
  for (int k = 0; k < spec.n_point_reach; ++k) {
    const double a = 2.0 * std::numbers::pi * f * (k + 0.5) / spec.n_point_reach + (1.0 - f) * std::numbers::pi;
    out.push_back(make_task(id++, Family::point_reach,
                            {spec.reach_radius * std::cos(a), spec.reach_radius * std::sin(a)},
                            spec.episode_len));
  }
  if (out.empty()) throw ConfigError("suite: no tasks");
  return out;
}

StepResult step_env(const TaskSpec& task, std::span<const double> state,
                    std::span<const double> action) {
  if (static_cast<int>(state.size()) != task.state_dim ||
      static_cast<int>(action.size()) != task.action_dim) {
    throw ShapeError("step_env: state/action sizes (" + std::to_string(state.size()) + ", " +
                     std::to_string(action.size()) + ") do not fit " + to_string(task.family));
  }
  require_finite(state, "state");
  require_finite(action, "action");

  StepResult r;
  r.next_state.assign(state.begin(), state.end());
  auto& s = r.next_state;
  if (task.family == Family::point_vel) {
    const double a = clip1(action[0]);
    s[0] = state[0] + state[1] * kDt;
    s[1] = state[1] + a * kDt;
    r.reward = -std::abs(s[1] - task.parameter[0]);
    return r;
  }

  const double ax = clip1(action[0]), ay = clip1(action[1]);
  s[0] = state[0] + state[2] * kDt;
  s[1] = state[1] + state[3] * kDt;
  s[2] = state[2] + ax * kDt;
  s[3] = state[3] + ay * kDt;
  if (task.family == Family::point_dir) {
    const double speed = std::hypot(s[2], s[3]);
    if (speed > kDirMaxSpeed) {
      s[2] *= kDirMaxSpeed / speed;
      s[3] *= kDirMaxSpeed / speed;
    }
    const double th = task.parameter[0];
    r.reward = s[2] * std::cos(th) + s[3] * std::sin(th);
  } else {
    r.reward = -std::hypot(s[0] - task.parameter[0], s[1] - task.parameter[1]);
  }
  return r;
}

std::vector<double> initial_state(const TaskSpec& task, uint64_t key) {
  Rng rng(key);
  std::vector<double> s(static_cast<size_t>(task.state_dim));
  for (double& x : s) x = rng.uniform(-kInitRange, kInitRange);
  return s;
}

std::vector<double> controller_action(const TaskSpec& task, std::span<const double> s) {
  switch (task.family) {
    case Family::point_dir: {
      const double th = task.parameter[0];
      return {clip1(kDirGain * (kDirMaxSpeed * std::cos(th) - s[2])),
              clip1(kDirGain * (kDirMaxSpeed * std::sin(th) - s[3]))};
    }
    case Family::point_vel:
      return {clip1(kVelGain * (task.parameter[0] - s[1]))};
    case Family::point_reach:
      return {clip1(kReachKp * (task.parameter[0] - s[0]) - kReachKd * s[2]),
              clip1(kReachKp * (task.parameter[1] - s[1]) - kReachKd * s[3])};
  }
  return {};
}

double Trajectory::episode_return() const {
  double total = 0.0;
  for (float r : rewards) total += r;
  return total;
}

std::vector<float> compute_rtg(std::span<const float> rewards) {
  std::vector<float> out(rewards.size());
  double acc = 0.0;
  for (size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    out[i] = static_cast<float>(acc);
  }
  return out;
}

double NoiseSchedule::std_for(int index, int count) const {
  if (count <= 1) return start_std;
  return start_std + (end_std - start_std) * index / (count - 1);
}

std::vector<Trajectory> generate_dataset(const TaskSpec& task, int n_traj,
                                         const NoiseSchedule& noise, uint64_t seed) {
  if (n_traj < 1) throw Error("generate_dataset: n_traj must be >= 1");
  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(n_traj));
  for (int i = 0; i < n_traj; ++i) {
    const double sigma = noise.std_for(i, n_traj);
    Trajectory t;
    t.task_id = task.task_id;
    t.state_dim = task.state_dim;
    t.action_dim = task.action_dim;
    Rng rng(hash_key({seed, static_cast<uint64_t>(task.task_id), static_cast<uint64_t>(i), 2}));
    const uint64_t start = hash_key({seed, static_cast<uint64_t>(task.task_id),
                                     static_cast<uint64_t>(i), 1});
    run_episode(task, start, rng,
                [&](std::span<const double> s, Rng& r) {
                  auto a = controller_action(task, s);
                  for (double& x : a) x += sigma * r.normal();
                  return a;
                },
                &t);
    t.rtg = compute_rtg(t.rewards);
    out.push_back(std::move(t));
  }
  return out;
}

ScoreRange score_range_oracle(const TaskSpec& task, int episodes, uint64_t seed) {
  if (episodes < 1) throw Error("score_range_oracle: episodes must be >= 1");
  double ctrl = 0.0, rand = 0.0;
  for (int e = 0; e < episodes; ++e) {
    const uint64_t start = hash_key({seed, static_cast<uint64_t>(task.task_id),
                                     static_cast<uint64_t>(e), 3});
    Rng rng(hash_key({seed, static_cast<uint64_t>(task.task_id), static_cast<uint64_t>(e), 4}));
    ctrl += run_episode(task, start, rng,
                        [&](std::span<const double> s, Rng&) { return controller_action(task, s); },
                        nullptr);
    rand += run_episode(task, start, rng,
                        [&](std::span<const double>, Rng& r) {
                          std::vector<double> a(static_cast<size_t>(task.action_dim));
                          for (double& x : a) x = r.uniform(-1.0, 1.0);
                          return a;
                        },
                        nullptr);
  }
  ScoreRange out{round9(rand / episodes), round9(ctrl / episodes)};
  if (!(out.r_min < out.r_max)) {
    throw Error("score_range_oracle: task " + std::to_string(task.task_id) +
                " has controller return " + fmt9(out.r_max) + " <= random return " +
                fmt9(out.r_min));
  }
  return out;
}

double normalized_score(const TaskSpec& task, double episode_return) {
  if (task.r_max == task.r_min) {
    throw Error("normalized_score: empty score range for task " + std::to_string(task.task_id));
  }
  const double s = 100.0 * (episode_return - task.r_min) / (task.r_max - task.r_min);
  return std::clamp(s, 0.0, 100.0);
}

PaddedTrajectory pad_and_mask(const Trajectory& traj, int max_state_dim, int max_action_dim) {
  if (traj.state_dim > max_state_dim || traj.action_dim > max_action_dim) {
    throw Error("pad_and_mask: dims (" + std::to_string(traj.state_dim) + ", " +
                std::to_string(traj.action_dim) + ") exceed (" + std::to_string(max_state_dim) +
                ", " + std::to_string(max_action_dim) + ")");
  }
  PaddedTrajectory out;
  out.traj = traj;
  out.traj.state_dim = max_state_dim;
  out.traj.action_dim = max_action_dim;
  const int T = traj.length();
  out.traj.states.assign(static_cast<size_t>(T) * max_state_dim, 0.0f);
  out.traj.actions.assign(static_cast<size_t>(T) * max_action_dim, 0.0f);
  for (int t = 0; t < T; ++t) {
    for (int d = 0; d < traj.state_dim; ++d) {
      out.traj.states[t * max_state_dim + d] = traj.states[t * traj.state_dim + d];
    }
    for (int d = 0; d < traj.action_dim; ++d) {
      out.traj.actions[t * max_action_dim + d] = traj.actions[t * traj.action_dim + d];
    }
  }
  out.mask = ActionMask::first_n(traj.action_dim, max_action_dim);
  return out;
}

StepWindow window_of(const Trajectory& traj, int begin, int end) {
  if (begin < 0 || end > traj.length() || begin > end) {
    throw Error("window_of: [" + std::to_string(begin) + ", " + std::to_string(end) +
                ") outside trajectory of length " + std::to_string(traj.length()));
  }
  StepWindow w;
  w.state_dim = traj.state_dim;
  w.action_dim = traj.action_dim;
  w.rtg.assign(traj.rtg.begin() + begin, traj.rtg.begin() + end);
  w.states.assign(traj.states.begin() + static_cast<ptrdiff_t>(begin) * traj.state_dim,
                  traj.states.begin() + static_cast<ptrdiff_t>(end) * traj.state_dim);
  w.actions.assign(traj.actions.begin() + static_cast<ptrdiff_t>(begin) * traj.action_dim,
                   traj.actions.begin() + static_cast<ptrdiff_t>(end) * traj.action_dim);
  w.timesteps.assign(traj.timesteps.begin() + begin, traj.timesteps.begin() + end);
  return w;
}

StepWindow sample_prompt(const TaskDataset& data, int kstar, uint64_t seed) {
  const auto& trajs = data.trajectories;
  if (trajs.empty()) {
    throw Error("sample_prompt: task " + std::to_string(data.spec.task_id) + " has no data");
  }
  if (kstar < 0) throw Error("sample_prompt: negative prompt length");
  if (kstar == 0) {
    StepWindow w;
    w.state_dim = data.spec.state_dim;
    w.action_dim = data.spec.action_dim;
    return w;
  }
  std::vector<size_t> order(trajs.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::vector<double> ret(trajs.size());
  for (size_t i = 0; i < trajs.size(); ++i) ret[i] = trajs[i].episode_return();
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return ret[a] > ret[b]; });
  order.resize((trajs.size() + 3) / 4);

  uint64_t total = 0;
  for (size_t i : order) {
    if (trajs[i].length() >= kstar) total += static_cast<uint64_t>(trajs[i].length() - kstar + 1);
  }
  if (total == 0) {
    throw Error("sample_prompt: no top-quartile trajectory has " + std::to_string(kstar) +
                " steps");
  }
  Rng rng(hash_key({seed, 0x9f0}));
  uint64_t pick = rng.below(total);
  for (size_t i : order) {
    if (trajs[i].length() < kstar) continue;
    const uint64_t n = static_cast<uint64_t>(trajs[i].length() - kstar + 1);
    if (pick < n) return window_of(trajs[i], static_cast<int>(pick), static_cast<int>(pick) + kstar);
    pick -= n;
  }
  throw Error("sample_prompt: internal window count mismatch");
}

StepWindow sample_segment(const Trajectory& traj, int context_K, Rng& rng) {
  if (traj.length() < 1) throw Error("sample_segment: empty trajectory");
  const int end = static_cast<int>(rng.below(static_cast<uint64_t>(traj.length()))) + 1;
  return window_of(traj, std::max(0, end - context_K), end);
}

// ---- storage ------------------------------------------------------------------

const TaskDataset& DatasetStore::task(int task_id) const {
  for (const auto& t : tasks) {
    if (t.spec.task_id == task_id) return t;
  }
  throw Error("dataset store: unknown task id " + std::to_string(task_id));
}

DatasetStore build_store(const std::vector<TaskSpec>& specs, const GenerationInfo& info) {
  DatasetStore store;
  store.info = info;
  for (const auto& spec : specs) {
    TaskDataset d;
    d.spec = spec;
    const ScoreRange range = score_range_oracle(spec, info.oracle_episodes, info.seed);
    d.spec.r_min = range.r_min;
    d.spec.r_max = range.r_max;
    d.trajectories = generate_dataset(spec, info.trajectories_per_task, info.noise, info.seed);
    double total = 0.0;
    for (const auto& t : d.trajectories) total += normalized_score(d.spec, t.episode_return());
    d.spec.difficulty = round9(total / static_cast<double>(d.trajectories.size()));
    store.tasks.push_back(std::move(d));
  }
  return store;
}

std::string trajectory_to_jsonl(const Trajectory& t) {
  std::string out = "{\"task_id\":" + std::to_string(t.task_id) + ",\"states\":";
  append_rows(out, t.states, t.state_dim);
  out += ",\"actions\":";
  append_rows(out, t.actions, t.action_dim);
  out += ",\"rewards\":";
  append_array(out, t.rewards, 0, t.rewards.size());
  out += ",\"rtg\":";
  append_array(out, t.rtg, 0, t.rtg.size());
  out += ",\"timesteps\":";
  append_array(out, t.timesteps, 0, t.timesteps.size());
  out += "}";
  return out;
}

Trajectory trajectory_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  Trajectory t;
  t.task_id = j.at("task_id").get<int>();
  auto read_rows = [](const nlohmann::json& rows, std::vector<float>& out, int& width) {
    width = rows.empty() ? 0 : static_cast<int>(rows[0].size());
    for (const auto& r : rows) {
      if (static_cast<int>(r.size()) != width) throw Error("dataset: ragged rows");
      for (const auto& v : r) out.push_back(v.get<float>());
    }
  };
  read_rows(j.at("states"), t.states, t.state_dim);
  read_rows(j.at("actions"), t.actions, t.action_dim);
  t.rewards = j.at("rewards").get<std::vector<float>>();
  t.rtg = j.at("rtg").get<std::vector<float>>();
  t.timesteps = j.at("timesteps").get<std::vector<int64_t>>();
  const size_t T = t.rewards.size();
  if (t.rtg.size() != T || t.timesteps.size() != T ||
      t.states.size() != T * static_cast<size_t>(t.state_dim) ||
      t.actions.size() != T * static_cast<size_t>(t.action_dim)) {
    throw Error("dataset: trajectory arrays of different lengths");
  }
  return t;
}

double round9(double v) { return std::stod(fmt9(v)); }

void save_store(const DatasetStore& store, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "datasets");
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (const auto& d : store.tasks) {
    std::string text;
    for (const auto& t : d.trajectories) text += trajectory_to_jsonl(t) + "\n";
    const std::string file = "datasets/task_" + std::to_string(d.spec.task_id) + ".jsonl";
    write_file(dir / file, text);
    nlohmann::ordered_json tj;
    tj["task_id"] = d.spec.task_id;
    tj["family"] = to_string(d.spec.family);
    tj["parameter"] = d.spec.parameter;
    tj["state_dim"] = d.spec.state_dim;
    tj["action_dim"] = d.spec.action_dim;
    tj["episode_len"] = d.spec.episode_len;
    tj["discount"] = d.spec.discount;
    tj["score_range"] = {{"r_min", d.spec.r_min}, {"r_max", d.spec.r_max}};
    tj["difficulty"] = d.spec.difficulty;
    tj["n_trajectories"] = d.trajectories.size();
    tj["dataset_file"] = file;
    tj["content_hash"] = "fnv1a64:" + hex64(fnv1a64(text));
    tasks.push_back(tj);
  }
  nlohmann::ordered_json m;
  m["format_version"] = 1;
  m["generation"] = {
      {"seed", store.info.seed},
      {"trajectories_per_task", store.info.trajectories_per_task},
      {"noise_schedule",
       {{"kind", "linear"}, {"start_std", store.info.noise.start_std},
        {"end_std", store.info.noise.end_std}}},
      {"behavior_policy", "pd_controller_plus_gaussian_noise"},
      {"controller_gains",
       {{"point_dir", kDirGain}, {"point_vel", kVelGain},
        {"point_reach", {{"kp", kReachKp}, {"kd", kReachKd}}}}},
      {"dt", kDt},
      {"initial_state_range", kInitRange},
  };
  m["score_range_provenance"] = {
      {"r_max", "noise-free pd controller, mean return"},
      {"r_min", "uniform random policy, mean return"},
      {"episodes", store.info.oracle_episodes},
  };
  m["difficulty_proxy"] = "mean normalized score of the task's behavior dataset";
  m["tasks"] = tasks;
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

DatasetStore load_store(const std::filesystem::path& dir) {
  const auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
  DatasetStore store;
  const auto& g = m.at("generation");
  store.info.seed = g.at("seed").get<uint64_t>();
  store.info.trajectories_per_task = g.at("trajectories_per_task").get<int>();
  store.info.noise.start_std = g.at("noise_schedule").at("start_std").get<double>();
  store.info.noise.end_std = g.at("noise_schedule").at("end_std").get<double>();
  store.info.oracle_episodes = m.at("score_range_provenance").at("episodes").get<int>();
  for (const auto& tj : m.at("tasks")) {
    TaskDataset d;
    d.spec = make_task(tj.at("task_id").get<int>(), parse_family(tj.at("family").get<std::string>()),
                       tj.at("parameter").get<std::vector<double>>(),
                       tj.at("episode_len").get<int>());
    d.spec.discount = tj.at("discount").get<double>();
    d.spec.r_min = tj.at("score_range").at("r_min").get<double>();
    d.spec.r_max = tj.at("score_range").at("r_max").get<double>();
    d.spec.difficulty = tj.at("difficulty").get<double>();
    const std::string file = tj.at("dataset_file").get<std::string>();
    const std::string text = read_file(dir / file);
    const std::string hash = "fnv1a64:" + hex64(fnv1a64(text));
    if (hash != tj.at("content_hash").get<std::string>()) {
      throw Error("dataset " + file + ": content hash mismatch");
    }
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      Trajectory t = trajectory_from_json(line);
      if (t.task_id != d.spec.task_id) {
        throw Error("dataset " + file + ": trajectory for task " + std::to_string(t.task_id));
      }
      d.trajectories.push_back(std::move(t));
    }
    store.tasks.push_back(std::move(d));
  }
  return store;
}

}  // namespace moedt
