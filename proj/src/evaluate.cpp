#include "moedt/evaluate.hpp"

#include <algorithm>
#include <memory>

#include "moedt/error.hpp"
#include "moedt/rng.hpp"

namespace moedt {

TargetReturn parse_target_return(const std::string& text) {
  if (text == "r_max") return TargetReturn::r_max;
  if (text == "dataset_max") return TargetReturn::dataset_max;
  throw ConfigError("unknown target_return '" + text + "'");
}

std::string to_string(TargetReturn t) {
  return t == TargetReturn::r_max ? "r_max" : "dataset_max";
}

std::vector<TaskEval> evaluate_tasks(const BatchPolicy& policy, const DatasetStore& store,
                                     const std::vector<int>& task_ids, const EvalOptions& opts,
                                     uint64_t seed) {
  if (opts.episodes < 1) throw Error("evaluate: episodes must be >= 1");

  struct Episode {
    const TaskDataset* data;
    int index;
    StepWindow prompt;
    StepWindow history;
    std::vector<double> state;
    double target = 0.0;
    double total = 0.0;
  };
  std::vector<Episode> eps;
  for (int task : task_ids) {
    const TaskDataset& data = store.task(task);
    double target = data.spec.r_max;
    if (opts.target == TargetReturn::dataset_max) {
      if (data.trajectories.empty()) throw Error("evaluate: empty dataset for task " + std::to_string(task));
      target = data.trajectories[0].episode_return();
      for (const auto& t : data.trajectories) target = std::max(target, t.episode_return());
    }
    for (int e = 0; e < opts.episodes; ++e) {
      const uint64_t t = static_cast<uint64_t>(task), ue = static_cast<uint64_t>(e);
      Episode ep{&data, e, {}, {}, {}, target, 0.0};
      ep.prompt = sample_prompt(data, opts.prompt_Kstar, hash_key({seed, t, ue, 0xe1}));
      ep.history.state_dim = data.spec.state_dim;
      ep.history.action_dim = data.spec.action_dim;
      ep.state = initial_state(data.spec, hash_key({seed, t, ue, 0xe0}));
      eps.push_back(std::move(ep));
    }
  }

  int horizon = 0;
  for (const auto& ep : eps) horizon = std::max(horizon, ep.data->spec.episode_len);
  for (int step = 0; step < horizon; ++step) {
    std::vector<size_t> live;
    std::vector<EpisodeView> views;
    for (size_t i = 0; i < eps.size(); ++i) {
      Episode& ep = eps[i];
      if (step >= ep.data->spec.episode_len) continue;
      ep.history.rtg.push_back(static_cast<float>(ep.target));
      for (double s : ep.state) ep.history.states.push_back(static_cast<float>(s));
      ep.history.actions.insert(ep.history.actions.end(), static_cast<size_t>(ep.history.action_dim), 0.0f);
      ep.history.timesteps.push_back(step);
      live.push_back(i);
    }
    for (size_t i : live) views.push_back({&eps[i].data->spec, &eps[i].prompt, &eps[i].history});
    const auto actions = policy(views);
    if (actions.size() != live.size()) throw Error("evaluate: policy returned wrong batch size");
    for (size_t j = 0; j < live.size(); ++j) {
      Episode& ep = eps[live[j]];
      std::vector<double> a = actions[j];
      if (static_cast<int>(a.size()) != ep.history.action_dim) {
        throw ShapeError("evaluate: policy action has " + std::to_string(a.size()) + " dims");
      }
      for (double& x : a) x = std::clamp(x, -1.0, 1.0);
      const StepResult r = step_env(ep.data->spec, ep.state, a);
      const size_t off = ep.history.actions.size() - a.size();
      for (size_t d = 0; d < a.size(); ++d) ep.history.actions[off + d] = static_cast<float>(a[d]);
      ep.total += r.reward;
      ep.target -= r.reward;
      ep.state = r.next_state;
    }
  }

  std::vector<TaskEval> out;
  size_t i = 0;
  for (int task : task_ids) {
    TaskEval te;
    te.task_id = task;
    double score = 0.0, ret = 0.0;
    for (int e = 0; e < opts.episodes; ++e, ++i) {
      te.returns.push_back(eps[i].total);
      score += normalized_score(eps[i].data->spec, eps[i].total);
      ret += eps[i].total;
    }
    te.mean_score = score / opts.episodes;
    te.mean_return = ret / opts.episodes;
    out.push_back(std::move(te));
  }
  return out;
}

TaskEval evaluate_task(const BatchPolicy& policy, const TaskDataset& data,
                       const EvalOptions& opts, uint64_t seed) {
  DatasetStore one;
  one.tasks.push_back(data);
  return evaluate_tasks(policy, one, {data.spec.task_id}, opts, seed).front();
}

double mean_score(const std::vector<TaskEval>& evals) {
  if (evals.empty()) throw Error("mean_score: no tasks");
  double s = 0.0;
  for (const auto& e : evals) s += e.mean_score;
  return s / static_cast<double>(evals.size());
}

BatchPolicy controller_policy() {
  return [](std::span<const EpisodeView> views) {
    std::vector<std::vector<double>> out;
    for (const auto& v : views) {
      const auto& h = *v.history;
      const size_t off = h.states.size() - static_cast<size_t>(h.state_dim);
      std::vector<double> s(h.states.begin() + static_cast<ptrdiff_t>(off), h.states.end());
      out.push_back(controller_action(*v.task, s));
    }
    return out;
  };
}

BatchPolicy random_policy(uint64_t seed) {
  auto calls = std::make_shared<uint64_t>(0);
  return [seed, calls](std::span<const EpisodeView> views) {
    Rng rng(hash_key({seed, (*calls)++, 0x7a}));
    std::vector<std::vector<double>> out;
    for (const auto& v : views) {
      std::vector<double> a(static_cast<size_t>(v.task->action_dim));
      for (double& x : a) x = rng.uniform(-1.0, 1.0);
      out.push_back(std::move(a));
    }
    return out;
  };
}

BatchPolicy model_policy(const ParamSet<float>& params, const ModelConfig& cfg,
                         const MoEConfig& moe, const Routing& routing,
                         std::map<int, int> expert_of_task) {
  if (routing.kind == Routing::Kind::oracle && expert_of_task.empty()) {
    throw Error("oracle evaluation needs a task group map");
  }
  auto shared = std::make_shared<const ParamSet<float>>(params);
  return [shared, cfg, moe, routing, expert_of_task](std::span<const EpisodeView> views) {
    NoGradGuard guard;
    std::vector<TokenSequence> seqs;
    std::vector<int> experts;
    for (const auto& v : views) {
      const StepWindow& h = *v.history;
      const int end = h.length();
      StepWindow seg;
      seg.state_dim = h.state_dim;
      seg.action_dim = h.action_dim;
      const int begin = std::max(0, end - cfg.context_K);
      seg.rtg.assign(h.rtg.begin() + begin, h.rtg.end());
      seg.states.assign(h.states.begin() + static_cast<ptrdiff_t>(begin) * h.state_dim, h.states.end());
      seg.actions.assign(h.actions.begin() + static_cast<ptrdiff_t>(begin) * h.action_dim, h.actions.end());
      seg.timesteps.assign(h.timesteps.begin() + begin, h.timesteps.end());
      seqs.push_back(build_input(cfg, *v.prompt, seg));
      if (routing.kind == Routing::Kind::oracle) {
        auto it = expert_of_task.find(v.task->task_id);
        if (it == expert_of_task.end()) {
          throw Error("oracle evaluation: task " + std::to_string(v.task->task_id) + " has no group");
        }
        experts.push_back(it->second);
      }
    }
    ModelBatch batch = collate(cfg, seqs);
    batch.expert_per_sequence = experts;
    ForwardOptions opts;
    opts.routing = routing;
    const auto pred = forward(*shared, cfg, moe, batch, opts);
    const auto data = pred.data();
    std::vector<std::vector<double>> out;
    for (size_t b = 0; b < views.size(); ++b) {
      const size_t row = (b + 1) * static_cast<size_t>(batch.steps) - 1;
      std::vector<double> a(static_cast<size_t>(views[b].task->action_dim));
      for (size_t d = 0; d < a.size(); ++d) a[d] = data[row * cfg.max_action_dim + d];
      out.push_back(std::move(a));
    }
    return out;
  };
}

}  // namespace moedt
