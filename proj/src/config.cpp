#include "moedt/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "moedt/error.hpp"
#include "moedt/hash.hpp"

namespace moedt {

namespace {

using Json = nlohmann::json;
using Fields = std::map<std::string, std::function<void(const Json&)>>;

void read_object(const Json& j, const std::string& where, const Fields& fields) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    auto it = fields.find(key);
    const std::string path = where.empty() ? key : where + "." + key;
    if (it == fields.end()) throw ConfigError("config: unknown key '" + path + "'");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + path + "': " + e.what());
    }
  }
}

template <typename V>
std::function<void(const Json&)> set(V& target) {
  return [&target](const Json& v) { target = v.get<V>(); };
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  moe.validate();
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  need(suite.trajectories_per_task >= 1, "suite.trajectories_per_task must be >= 1");
  need(suite.spec.episode_len <= model.max_episode_len,
       "suite.episode_len exceeds model.max_episode_len");
  need(suite.subset >= 0, "suite.subset must be >= 0");
  need(grouping.kmeans_restarts >= 1, "grouping.kmeans_restarts must be >= 1");
  need(suite.spec.parameter_spread > 0.0 && suite.spec.parameter_spread <= 1.0,
       "suite.parameter_spread must be in (0, 1]");
  need(training.batch_size >= 1, "training.batch_size must be >= 1");
  need(training.lr > 0.0, "training.lr must be positive");
  need(training.steps_stage1 >= 0 && training.steps_stage2 >= 0 && training.steps_stage3 >= 0,
       "training steps must be >= 0");
  need(training.sim_log_interval >= 1, "training.sim_log_interval must be >= 1");
  need(training.grad_batches >= 1 && training.grad_batch_size >= 1, "gradient batches must be >= 1");
  need(training.early_stop.smoothing_window >= 1, "early_stop.smoothing_window must be >= 1");
  need(training.early_stop.patience >= 1, "early_stop.patience must be >= 1");
  need(grouping.method == "random" || grouping.method == "gradient",
       "grouping.method must be 'random' or 'gradient'");
  need(grouping.n_groups == moe.n_experts, "grouping.n_groups must equal moe.n_experts");
  need(evaluation.episodes >= 1, "evaluation.episodes must be >= 1");
  need(!evaluation.seeds.empty(), "evaluation.seeds must not be empty");
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["suite"] = {
      {"n_point_dir", suite.spec.n_point_dir},
      {"n_point_vel", suite.spec.n_point_vel},
      {"n_point_reach", suite.spec.n_point_reach},
      {"episode_len", suite.spec.episode_len},
      {"reach_radius", suite.spec.reach_radius},
      {"parameter_spread", suite.spec.parameter_spread},
      {"trajectories_per_task", suite.trajectories_per_task},
      {"noise_start_std", suite.noise.start_std},
      {"noise_end_std", suite.noise.end_std},
      {"oracle_episodes", suite.oracle_episodes},
      {"subset", suite.subset},
  };
  j["model"] = {
      {"n_layers", model.n_layers},
      {"n_heads", model.n_heads},
      {"hidden_dim", model.hidden_dim},
      {"ffn_dim", model.ffn_dim},
      {"context_K", model.context_K},
      {"prompt_Kstar", model.prompt_Kstar},
      {"max_state_dim", model.max_state_dim},
      {"max_action_dim", model.max_action_dim},
      {"dropout", model.dropout},
      {"max_episode_len", model.max_episode_len},
      {"activation", to_string(model.activation)},
      {"rtg_scale", model.rtg_scale},
  };
  j["moe"] = {
      {"n_experts", moe.n_experts},
      {"router_layers", moe.router_layers},
      {"router_hidden", moe.router_hidden},
  };
  j["training"] = {
      {"batch_size", training.batch_size},
      {"lr", training.lr},
      {"steps_stage1", training.steps_stage1},
      {"steps_stage2", training.steps_stage2},
      {"steps_stage3", training.steps_stage3},
      {"sim_log_interval", training.sim_log_interval},
      {"grad_batches", training.grad_batches},
      {"grad_batch_size", training.grad_batch_size},
      {"early_stop",
       {{"enabled", training.early_stop.enabled},
        {"smoothing_window", training.early_stop.smoothing_window},
        {"patience", training.early_stop.patience}}},
  };
  j["grouping"] = {
      {"method", grouping.method},
      {"n_groups", grouping.n_groups},
      {"kmeans_max_iters", grouping.kmeans_max_iters},
      {"kmeans_restarts", grouping.kmeans_restarts},
      {"l2_normalize", grouping.l2_normalize},
  };
  j["evaluation"] = {
      {"episodes", evaluation.episodes},
      {"seeds", evaluation.seeds},
      {"target_return", to_string(evaluation.target)},
  };
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  ExperimentConfig c;
  std::string activation = to_string(c.model.activation);
  std::string target = to_string(c.evaluation.target);
  read_object(j, "", {
      {"suite", [&](const Json& v) {
         read_object(v, "suite", {
             {"n_point_dir", set(c.suite.spec.n_point_dir)},
             {"n_point_vel", set(c.suite.spec.n_point_vel)},
             {"n_point_reach", set(c.suite.spec.n_point_reach)},
             {"episode_len", set(c.suite.spec.episode_len)},
             {"reach_radius", set(c.suite.spec.reach_radius)},
             {"parameter_spread", set(c.suite.spec.parameter_spread)},
             {"trajectories_per_task", set(c.suite.trajectories_per_task)},
             {"noise_start_std", set(c.suite.noise.start_std)},
             {"noise_end_std", set(c.suite.noise.end_std)},
             {"oracle_episodes", set(c.suite.oracle_episodes)},
             {"subset", set(c.suite.subset)},
         });
       }},
      {"model", [&](const Json& v) {
         read_object(v, "model", {
             {"n_layers", set(c.model.n_layers)},
             {"n_heads", set(c.model.n_heads)},
             {"hidden_dim", set(c.model.hidden_dim)},
             {"ffn_dim", set(c.model.ffn_dim)},
             {"context_K", set(c.model.context_K)},
             {"prompt_Kstar", set(c.model.prompt_Kstar)},
             {"max_state_dim", set(c.model.max_state_dim)},
             {"max_action_dim", set(c.model.max_action_dim)},
             {"dropout", set(c.model.dropout)},
             {"max_episode_len", set(c.model.max_episode_len)},
             {"activation", set(activation)},
             {"rtg_scale", set(c.model.rtg_scale)},
         });
       }},
      {"moe", [&](const Json& v) {
         read_object(v, "moe", {
             {"n_experts", set(c.moe.n_experts)},
             {"router_layers", set(c.moe.router_layers)},
             {"router_hidden", set(c.moe.router_hidden)},
         });
       }},
      {"training", [&](const Json& v) {
         read_object(v, "training", {
             {"batch_size", set(c.training.batch_size)},
             {"lr", set(c.training.lr)},
             {"steps_stage1", set(c.training.steps_stage1)},
             {"steps_stage2", set(c.training.steps_stage2)},
             {"steps_stage3", set(c.training.steps_stage3)},
             {"sim_log_interval", set(c.training.sim_log_interval)},
             {"grad_batches", set(c.training.grad_batches)},
             {"grad_batch_size", set(c.training.grad_batch_size)},
             {"early_stop", [&](const Json& e) {
                read_object(e, "training.early_stop", {
                    {"enabled", set(c.training.early_stop.enabled)},
                    {"smoothing_window", set(c.training.early_stop.smoothing_window)},
                    {"patience", set(c.training.early_stop.patience)},
                });
              }},
         });
       }},
      {"grouping", [&](const Json& v) {
         read_object(v, "grouping", {
             {"method", set(c.grouping.method)},
             {"n_groups", set(c.grouping.n_groups)},
             {"kmeans_max_iters", set(c.grouping.kmeans_max_iters)},
             {"kmeans_restarts", set(c.grouping.kmeans_restarts)},
             {"l2_normalize", set(c.grouping.l2_normalize)},
         });
       }},
      {"evaluation", [&](const Json& v) {
         read_object(v, "evaluation", {
             {"episodes", set(c.evaluation.episodes)},
             {"seeds", set(c.evaluation.seeds)},
             {"target_return", set(target)},
         });
       }},
      {"seed", set(c.seed)},
      {"output_dir", set(c.output_dir)},
  });
  c.model.activation = parse_activation(activation);
  c.evaluation.target = parse_target_return(target);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Json j;
  try {
    j = Json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const {
  // The output location does not change results.
  auto j = to_json();
  j.erase("output_dir");
  return hex64(fnv1a64(j.dump()));
}

}  // namespace moedt
