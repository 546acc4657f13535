#include "moedt/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "moedt/batching.hpp"
#include "moedt/error.hpp"
#include "moedt/evaluate.hpp"
#include "moedt/optim.hpp"
#include "moedt/rng.hpp"

namespace moedt {

namespace {

struct LoopSpec {
  std::string stage;
  std::vector<int> tasks;
  Routing routing = Routing::backbone_only();
  int64_t steps = 0;
  int64_t step_offset = 0;
  std::optional<int> expert_id;
  uint64_t key = 0;
  // Similarity logging; empty sim_tasks disables it.
  GradientOptions sim;
  std::vector<int> sim_tasks;
  // Called at each logged sample; returning true ends the loop there.
  std::function<bool(int64_t, const std::optional<Similarity>&, const ParamSet<float>&)> on_sample;
};

// Runs spec.steps Adam updates on the trainable entries of `params`. A
// metrics row is written before update 0, every sim_log_interval updates,
// and after the last update; its loss is the mean over the updates since
// the previous row. Returns the number of updates performed.
int64_t train_loop(ParamSet<float>& params, const ExperimentConfig& cfg, const DatasetStore& store,
                   const LoopSpec& spec, MetricsWriter* metrics) {
  if (spec.steps <= 0) return 0;
  AdamState adam = AdamState::init(params, cfg.training.lr);
  const int64_t interval = cfg.training.sim_log_interval;
  double loss_sum = 0.0;
  int64_t loss_n = 0;
  for (int64_t s = 0;; ++s) {
    if (s % interval == 0 || s == spec.steps) {
      std::optional<Similarity> sim;
      if (!spec.sim_tasks.empty()) {
        sim = gradient_similarity(per_task_gradients(params, cfg.model, cfg.moe, store,
                                                     spec.sim_tasks, spec.sim,
                                                     hash_key({spec.key, static_cast<uint64_t>(s), 0x51})));
      }
      if (metrics) {
        MetricsRow row;
        row.step = spec.step_offset + s;
        row.stage = spec.stage;
        if (loss_n > 0) row.loss = loss_sum / static_cast<double>(loss_n);
        if (sim && sim->defined) {
          row.grad_similarity = sim->value;
          row.grad_conflict = sim->conflict();
        }
        row.expert_id = spec.expert_id;
        row.seed = cfg.seed;
        metrics->append(row);
      }
      loss_sum = 0.0;
      loss_n = 0;
      if (spec.on_sample && spec.on_sample(s, sim, params)) return s;
    }
    if (s == spec.steps) return s;

    std::vector<int> task_of_row;
    ModelBatch batch = sample_mixed_batch(cfg.model, store, spec.tasks, cfg.training.batch_size,
                                          hash_key({spec.key, static_cast<uint64_t>(s)}),
                                          &task_of_row);
    if (spec.routing.kind == Routing::Kind::oracle) {
      attach_experts(batch, task_of_row, spec.sim.expert_of_task);
    }
    ForwardOptions fwd;
    fwd.routing = spec.routing;
    fwd.training = true;
    fwd.dropout_seed = spec.key;
    fwd.step = s;
    const auto lg = forward_backward<float>(params, [&](const ParamSet<float>& p) {
      return dt_loss(forward(p, cfg.model, cfg.moe, batch, fwd), batch, cfg.model);
    });
    adam_step(params, lg.grads, adam);
    loss_sum += lg.loss;
    ++loss_n;
  }
}

void set_trainable(ParamSet<float>& params, const std::function<bool(const Component&)>& pred) {
  for (auto& [name, e] : params) e.trainable = pred(e.component);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

uint64_t backbone_seed(uint64_t seed) { return hash_key({seed, 0xb0}); }

}  // namespace

DatasetStore generate_data(const ExperimentConfig& cfg) {
  GenerationInfo info;
  info.seed = cfg.seed;
  info.trajectories_per_task = cfg.suite.trajectories_per_task;
  info.noise = cfg.suite.noise;
  info.oracle_episodes = cfg.suite.oracle_episodes;
  return build_store(make_suite(cfg.suite.spec), info);
}

std::vector<int> select_tasks(const ExperimentConfig& cfg, const DatasetStore& store) {
  std::vector<int> all;
  std::map<int, double> difficulty;
  std::map<int, Family> family;
  for (const auto& t : store.tasks) {
    all.push_back(t.spec.task_id);
    difficulty[t.spec.task_id] = t.spec.difficulty;
    family[t.spec.task_id] = t.spec.family;
  }
  if (cfg.suite.subset <= 0) return all;
  return task_subset_sampler(all, difficulty, family, cfg.suite.subset, hash_key({cfg.seed, 0x5b}))
      .tasks;
}

bool EarlyStopper::observe(int64_t step, const Similarity& s) {
  improved_ = false;
  if (!s.defined) return false;
  recent_.push_back(s.conflict());
  if (static_cast<int>(recent_.size()) > window_) recent_.erase(recent_.begin());
  last_smoothed_ = mean_of(recent_);
  if (best_step_ < 0 || last_smoothed_ > best_) {
    best_ = last_smoothed_;
    best_step_ = step;
    stale_ = 0;
    improved_ = true;
    return false;
  }
  return ++stale_ >= patience_;
}

nlohmann::ordered_json Stage1Result::summary() const {
  nlohmann::ordered_json j;
  j["selected_step"] = selected_step;
  j["final_step"] = final_step;
  j["early_stopped"] = early_stopped;
  j["similarity_at_selected"] =
      similarity_at_selected ? nlohmann::ordered_json(*similarity_at_selected) : nlohmann::ordered_json();
  nlohmann::ordered_json curve_j = nlohmann::ordered_json::array();
  for (const auto& c : curve) {
    curve_j.push_back({{"step", c.step},
                       {"similarity", c.similarity.defined ? nlohmann::ordered_json(c.similarity.value)
                                                           : nlohmann::ordered_json()},
                       {"smoothed_conflict", c.smoothed_conflict}});
  }
  j["curve"] = curve_j;
  return j;
}

Stage1Result run_stage1(const ExperimentConfig& cfg, const DatasetStore& store,
                        const std::vector<int>& tasks, uint64_t seed, MetricsWriter* metrics) {
  if (store.tasks.empty() || tasks.empty()) throw Error("stage 1: no datasets");
  Stage1Result r;
  ParamSet<float> params = init_backbone(cfg.model, backbone_seed(seed));
  r.selected = params;

  EarlyStopper stopper(cfg.training.early_stop.smoothing_window, cfg.training.early_stop.patience);
  LoopSpec spec;
  spec.stage = "1";
  spec.tasks = tasks;
  spec.steps = cfg.training.steps_stage1;
  spec.key = hash_key({seed, 1});
  spec.sim_tasks = tasks;
  spec.sim.scope = GradScope::all_backbone();
  spec.sim.batches_per_task = cfg.training.grad_batches;
  spec.sim.batch_size = cfg.training.grad_batch_size;
  spec.on_sample = [&](int64_t step, const std::optional<Similarity>& sim,
                       const ParamSet<float>& p) {
    const bool fire = stopper.observe(step, *sim);
    r.curve.push_back({step, *sim, stopper.last_smoothed()});
    if (stopper.improved()) {
      r.selected = p;
      r.selected_step = step;
      r.similarity_at_selected = sim->value;
    }
    return cfg.training.early_stop.enabled && fire;
  };
  r.final_step = train_loop(params, cfg, store, spec, metrics);
  r.early_stopped = r.final_step < cfg.training.steps_stage1;
  if (!cfg.training.early_stop.enabled || cfg.training.steps_stage1 == 0) {
    r.selected = params;
    r.selected_step = r.final_step;
    r.similarity_at_selected.reset();
    for (const auto& c : r.curve) {
      if (c.step == r.final_step && c.similarity.defined) r.similarity_at_selected = c.similarity.value;
    }
  }
  r.final = std::move(params);
  return r;
}

GroupAssignment group_tasks(const ExperimentConfig& cfg, const DatasetStore& store,
                            const std::vector<int>& tasks, const ParamSet<float>& backbone,
                            const std::string& method, uint64_t seed) {
  const int k = cfg.grouping.n_groups;
  if (method == "random") return random_grouping(tasks, k, hash_key({seed, 4}));
  if (method != "gradient") throw ConfigError("unknown grouping method '" + method + "'");
  GradientOptions opts;
  opts.scope = GradScope::all_backbone();
  opts.batches_per_task = cfg.training.grad_batches;
  opts.batch_size = cfg.training.grad_batch_size;
  const auto report = per_task_gradients(backbone, cfg.model, cfg.moe, store, tasks, opts,
                                         hash_key({seed, 4, 1}));
  return kmeans_grouping(tasks, agreement_vectors(report, cfg.grouping.l2_normalize), k,
                         hash_key({seed, 4, 2}), cfg.grouping.kmeans_max_iters,
                         cfg.grouping.kmeans_restarts);
}

Stage2Result run_stage2(const ExperimentConfig& cfg, const DatasetStore& store,
                        const ParamSet<float>& backbone, const GroupAssignment& groups,
                        uint64_t seed, MetricsWriter* metrics) {
  groups.validate();
  if (groups.n_groups != cfg.moe.n_experts) {
    throw Error("stage 2: " + std::to_string(groups.n_groups) + " groups for " +
                std::to_string(cfg.moe.n_experts) + " experts");
  }
  for (const auto& [name, e] : backbone) {
    if (e.component.kind != Component::Kind::backbone) {
      throw Error("stage 2: expected a backbone-only parameter set, found '" + name + "'");
    }
  }
  Stage2Result r;
  ParamSet<float> base = backbone;
  add_experts_function_preserving(base, cfg.model, cfg.moe.n_experts);
  r.params = base;

  const auto members = groups.groups();
  for (int j = 0; j < groups.n_groups; ++j) {
    ParamSet<float> job = base;
    set_trainable(job, [j](const Component& c) { return c == Component::expert_of(j); });
    std::vector<double> sims;
    LoopSpec spec;
    spec.stage = "2";
    spec.tasks = members[j];
    spec.routing = Routing::hard(j);
    spec.steps = cfg.training.steps_stage2;
    spec.step_offset = j * (cfg.training.steps_stage2 + 1);
    spec.expert_id = j;
    spec.key = hash_key({seed, 2, static_cast<uint64_t>(j)});
    spec.sim_tasks = members[j];
    spec.sim.scope = GradScope::expert_of(j);
    spec.sim.routing = Routing::hard(j);
    spec.sim.batches_per_task = cfg.training.grad_batches;
    spec.sim.batch_size = cfg.training.grad_batch_size;
    spec.on_sample = [&](int64_t, const std::optional<Similarity>& s, const ParamSet<float>&) {
      if (s && s->defined) sims.push_back(s->value);
      return false;
    };
    train_loop(job, cfg, store, spec, metrics);
    if (!sims.empty()) r.expert_similarity[j] = mean_of(sims);
    for (const auto& [name, e] : job) {
      if (e.component == Component::expert_of(j)) r.params.entry(name).tensor = e.tensor;
    }
  }
  for (auto& [name, e] : r.params) e.trainable = true;
  return r;
}

ParamSet<float> run_stage3(const ExperimentConfig& cfg, const DatasetStore& store,
                           const std::vector<int>& tasks, const ParamSet<float>& stage2,
                           uint64_t seed, MetricsWriter* metrics, const Stage3Options& opts) {
  if (count_experts(stage2) != cfg.moe.n_experts) {
    throw Error("stage 3: expected " + std::to_string(cfg.moe.n_experts) +
                " trained experts, found " + std::to_string(count_experts(stage2)));
  }
  ParamSet<float> params = stage2;
  if (!params.components().count(Component::router())) {
    add_router(params, cfg.model, cfg.moe, hash_key({seed, 33}));
  }
  const bool train_experts = !opts.freeze_experts;
  set_trainable(params, [train_experts](const Component& c) {
    return c.kind == Component::Kind::router ||
           (train_experts && c.kind == Component::Kind::expert);
  });
  LoopSpec spec;
  spec.stage = "3";
  spec.tasks = tasks;
  spec.routing = opts.routing;
  spec.steps = cfg.training.steps_stage3;
  spec.key = hash_key({seed, 3});
  train_loop(params, cfg, store, spec, metrics);
  for (auto& [name, e] : params) e.trainable = true;
  return params;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = mode;
  j["mean_normalized_score"] = mean;
  j["per_seed"] = per_seed;
  nlohmann::ordered_json pt = nlohmann::ordered_json::object();
  for (const auto& [t, s] : per_task) pt[std::to_string(t)] = s;
  j["per_task"] = pt;
  return j;
}

EvalReport evaluate_model(const ExperimentConfig& cfg, const DatasetStore& store,
                          const std::vector<int>& tasks, const ParamSet<float>& params,
                          const Routing& routing, const std::map<int, int>& expert_of_task,
                          MetricsWriter* metrics) {
  EvalReport r;
  r.mode = routing.str();
  const BatchPolicy policy = model_policy(params, cfg.model, cfg.moe, routing, expert_of_task);
  EvalOptions opts;
  opts.episodes = cfg.evaluation.episodes;
  opts.prompt_Kstar = cfg.model.prompt_Kstar;
  opts.target = cfg.evaluation.target;
  for (uint64_t s : cfg.evaluation.seeds) {
    const auto evals = evaluate_tasks(policy, store, tasks, opts, hash_key({s, 0xe7}));
    const double m = mean_score(evals);
    r.per_seed.push_back(m);
    for (const auto& e : evals) r.per_task[e.task_id] += e.mean_score / cfg.evaluation.seeds.size();
    if (metrics) {
      MetricsRow row;
      row.step = metrics->next_step("eval");
      row.stage = "eval";
      row.mean_normalized_score = m;
      row.seed = s;
      metrics->append(row);
    }
  }
  r.mean = mean_of(r.per_seed);
  return r;
}

std::map<int, int> expert_map(const GroupAssignment& groups) { return groups.group_of; }

ExperimentConfig small_config(const ExperimentConfig& cfg) {
  ExperimentConfig s = cfg;
  s.model.hidden_dim = cfg.model.hidden_dim / 2;
  s.model.ffn_dim = cfg.model.ffn_width() / 2;
  s.moe.router_hidden = cfg.moe.router_width(cfg.model) / 2;
  if (s.model.hidden_dim < 1 || s.model.hidden_dim % s.model.n_heads != 0) {
    throw ConfigError("small variant: halved hidden_dim " + std::to_string(s.model.hidden_dim) +
                      " is not divisible by n_heads");
  }
  s.validate();
  return s;
}

nlohmann::ordered_json VariantResult::to_json() const {
  nlohmann::ordered_json j;
  j["variant"] = variant;
  j["evaluation"] = eval.to_json();
  if (oracle) {
    j["oracle_evaluation"] = oracle->to_json();
    j["oracle_minus_dense"] = oracle->mean - eval.mean;
  }
  if (groups) j["groups"] = groups->to_json();
  j["expert_training_similarity"] =
      expert_similarity ? nlohmann::ordered_json(*expert_similarity) : nlohmann::ordered_json();
  j["reused_stage1"] = reused_stage1;
  return j;
}

VariantResult run_variant(const ExperimentConfig& cfg, const DatasetStore& store,
                          const std::vector<int>& tasks, const std::string& variant,
                          uint64_t seed, MetricsWriter* metrics, const Stage1Result* stage1) {
  VariantResult r;
  r.variant = variant;

  if (variant == "small") {
    const ExperimentConfig small = small_config(cfg);
    VariantResult inner = run_variant(small, store, tasks, "three_stage", seed, metrics, nullptr);
    inner.variant = variant;
    return inner;
  }

  if (variant == "e2e") {
    ParamSet<float> params = init_backbone(cfg.model, backbone_seed(seed));
    add_experts_random(params, cfg.model, cfg.moe.n_experts, hash_key({seed, 0xe2e, 1}));
    add_router(params, cfg.model, cfg.moe, hash_key({seed, 0xe2e, 2}));
    LoopSpec spec;
    spec.stage = "1";
    spec.tasks = tasks;
    spec.routing = Routing::dense();
    spec.steps = cfg.training.steps_stage1 + cfg.training.steps_stage2 + cfg.training.steps_stage3;
    spec.key = hash_key({seed, 0xe2e});
    train_loop(params, cfg, store, spec, metrics);
    r.eval = evaluate_model(cfg, store, tasks, params, Routing::dense(), {}, metrics);
    r.params = std::move(params);
    return r;
  }

  std::optional<Stage1Result> own;
  if (stage1) {
    r.reused_stage1 = true;
  } else {
    own = run_stage1(cfg, store, tasks, seed, metrics);
    stage1 = &*own;
  }

  if (variant == "no_grouping") {
    ParamSet<float> params = stage1->selected;
    add_experts_function_preserving(params, cfg.model, cfg.moe.n_experts);
    add_router(params, cfg.model, cfg.moe, hash_key({seed, 33}));
    set_trainable(params, [](const Component& c) { return c.kind != Component::Kind::backbone; });
    std::vector<double> sims;
    LoopSpec spec;
    spec.stage = "2";
    spec.tasks = tasks;
    spec.routing = Routing::dense();
    spec.steps = cfg.training.steps_stage2 + cfg.training.steps_stage3;
    spec.key = hash_key({seed, 0x9e});
    spec.sim_tasks = tasks;
    spec.sim.scope = GradScope::experts();
    spec.sim.routing = Routing::dense();
    spec.sim.batches_per_task = cfg.training.grad_batches;
    spec.sim.batch_size = cfg.training.grad_batch_size;
    spec.on_sample = [&](int64_t, const std::optional<Similarity>& s, const ParamSet<float>&) {
      if (s && s->defined) sims.push_back(s->value);
      return false;
    };
    train_loop(params, cfg, store, spec, metrics);
    if (!sims.empty()) r.expert_similarity = mean_of(sims);
    for (auto& [name, e] : params) e.trainable = true;
    r.eval = evaluate_model(cfg, store, tasks, params, Routing::dense(), {}, metrics);
    r.params = std::move(params);
    return r;
  }

  Stage3Options s3;
  Routing eval_routing = Routing::dense();
  const bool oracle = variant == "oracle_eval";
  if (variant.rfind("topk:", 0) == 0) {
    s3.routing = Routing::parse(variant);
    if (s3.routing.k < 1 || s3.routing.k > cfg.moe.n_experts) {
      throw ConfigError("variant " + variant + ": k outside [1, n_experts]");
    }
    eval_routing = s3.routing;
  } else if (variant == "no_expert_freeze") {
    s3.freeze_experts = false;
  } else if (variant != "three_stage" && !oracle) {
    throw ConfigError("unknown variant '" + variant + "'");
  }

  GroupAssignment groups =
      group_tasks(cfg, store, tasks, stage1->selected, cfg.grouping.method, seed);
  Stage2Result s2 = run_stage2(cfg, store, stage1->selected, groups, seed, metrics);
  if (!s2.expert_similarity.empty()) {
    double total = 0.0;
    for (const auto& [j, v] : s2.expert_similarity) total += v;
    r.expert_similarity = total / static_cast<double>(s2.expert_similarity.size());
  }
  ParamSet<float> params = run_stage3(cfg, store, tasks, s2.params, seed, metrics, s3);
  r.eval = evaluate_model(cfg, store, tasks, params, eval_routing, {}, metrics);
  if (oracle) {
    r.oracle = evaluate_model(cfg, store, tasks, params, Routing::oracle(), expert_map(groups), metrics);
  }
  r.groups = std::move(groups);
  r.params = std::move(params);
  return r;
}

}  // namespace moedt
