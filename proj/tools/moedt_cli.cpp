// Command-line driver for data generation, the three training stages,
// evaluation and ablations. Every subcommand reads and writes files under
// the output directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "moedt/checkpoint.hpp"
#include "moedt/pipeline.hpp"

namespace fs = std::filesystem;
using namespace moedt;

namespace {

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const ExperimentConfig& cfg) { return fs::path(cfg.output_dir); }
fs::path ckpt_path(const ExperimentConfig& cfg, const std::string& stage) {
  return out_dir(cfg) / "checkpoints" / ("stage" + stage + ".ckpt");
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << j.dump(2) << "\n";
  if (!out) throw Error("write failed for " + p.string());
}

nlohmann::ordered_json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return nlohmann::ordered_json::parse(ss.str());
}

ParamSet<float> load_stage(const ExperimentConfig& cfg, const std::string& stage) {
  const fs::path p = ckpt_path(cfg, stage);
  if (!fs::exists(p)) throw Error("missing " + p.string() + "; run the earlier stage first");
  Checkpoint ck = load_checkpoint(p);
  if (ck.meta.config_hash != cfg.hash()) {
    throw Error(p.string() + " was written under a different config (hash " + ck.meta.config_hash +
                ", current " + cfg.hash() + ")");
  }
  return std::move(ck.params);
}

void save_stage(const ExperimentConfig& cfg, const std::string& stage, const ParamSet<float>& p,
                int64_t step, const std::string& file_stage = "") {
  save_checkpoint(p, {cfg.hash(), stage, step}, ckpt_path(cfg, file_stage.empty() ? stage : file_stage));
}

GroupAssignment load_groups(const ExperimentConfig& cfg) {
  return GroupAssignment::from_json(read_json(out_dir(cfg) / "groups.json"));
}

void cmd_gen_data(const ExperimentConfig& cfg) {
  const DatasetStore store = generate_data(cfg);
  save_store(store, out_dir(cfg));
  std::printf("wrote %zu task datasets to %s\n", store.tasks.size(), out_dir(cfg).c_str());
}

void cmd_train_backbone(const ExperimentConfig& cfg) {
  const DatasetStore store = load_store(out_dir(cfg));
  const auto tasks = select_tasks(cfg, store);
  MetricsWriter metrics(out_dir(cfg) / "metrics.csv");
  const Stage1Result r = run_stage1(cfg, store, tasks, cfg.seed, &metrics);
  save_stage(cfg, "1", r.selected, r.selected_step);
  save_stage(cfg, "1", r.final, r.final_step, "1_final");
  auto summary = r.summary();
  summary["tasks"] = tasks;
  write_json(out_dir(cfg) / "stage1.json", summary);
  std::printf("stage 1: selected step %lld of %lld%s\n", static_cast<long long>(r.selected_step),
              static_cast<long long>(r.final_step), r.early_stopped ? " (early stop)" : "");
}

void cmd_group_tasks(const ExperimentConfig& cfg, const std::string& method) {
  const DatasetStore store = load_store(out_dir(cfg));
  const auto tasks = select_tasks(cfg, store);
  const GroupAssignment g =
      group_tasks(cfg, store, tasks, load_stage(cfg, "1"), method.empty() ? cfg.grouping.method : method, cfg.seed);
  write_json(out_dir(cfg) / "groups.json", g.to_json());
  std::printf("grouped %zu tasks into %d groups (%s)\n", tasks.size(), g.n_groups, g.method.c_str());
}

void cmd_train_experts(const ExperimentConfig& cfg) {
  const DatasetStore store = load_store(out_dir(cfg));
  MetricsWriter metrics(out_dir(cfg) / "metrics.csv");
  const Stage2Result r = run_stage2(cfg, store, load_stage(cfg, "1"), load_groups(cfg), cfg.seed, &metrics);
  save_stage(cfg, "2", r.params, cfg.training.steps_stage2);
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [e, s] : r.expert_similarity) j[std::to_string(e)] = s;
  write_json(out_dir(cfg) / "stage2.json", {{"expert_training_similarity", j}});
  std::printf("stage 2: trained %d experts\n", cfg.moe.n_experts);
}

void cmd_train_router(const ExperimentConfig& cfg) {
  const DatasetStore store = load_store(out_dir(cfg));
  const auto tasks = select_tasks(cfg, store);
  MetricsWriter metrics(out_dir(cfg) / "metrics.csv");
  const auto p = run_stage3(cfg, store, tasks, load_stage(cfg, "2"), cfg.seed, &metrics);
  save_stage(cfg, "3", p, cfg.training.steps_stage3);
  std::printf("stage 3: router trained\n");
}

void cmd_evaluate(const ExperimentConfig& cfg, const std::string& mode) {
  const DatasetStore store = load_store(out_dir(cfg));
  const auto tasks = select_tasks(cfg, store);
  const Routing routing = Routing::parse(mode);
  const bool backbone = routing.kind == Routing::Kind::backbone_only;
  const auto params = load_stage(cfg, backbone ? "1" : "3");
  std::map<int, int> experts;
  if (routing.kind == Routing::Kind::oracle) experts = expert_map(load_groups(cfg));
  // Backbone evaluation usually happens between stages, where eval rows
  // would break the stage ordering of metrics.csv; it goes to report.json only.
  std::optional<MetricsWriter> metrics;
  if (!backbone) metrics.emplace(out_dir(cfg) / "metrics.csv");
  const EvalReport r =
      evaluate_model(cfg, store, tasks, params, routing, experts, metrics ? &*metrics : nullptr);
  const fs::path rp = out_dir(cfg) / "report.json";
  nlohmann::ordered_json report = fs::exists(rp) ? read_json(rp) : nlohmann::ordered_json::object();
  report["config_hash"] = cfg.hash();
  report["evaluations"][r.mode] = r.to_json();
  write_json(rp, report);
  std::printf("%s: mean normalized score %.2f\n", r.mode.c_str(), r.mean);
}

void cmd_ablate(const ExperimentConfig& cfg, const std::string& variant) {
  const DatasetStore store = load_store(out_dir(cfg));
  const auto tasks = select_tasks(cfg, store);
  std::string dir_name = variant;
  for (char& c : dir_name) {
    if (c == ':') c = '_';
  }
  const fs::path dir = out_dir(cfg) / "ablations" / dir_name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  MetricsWriter metrics(dir / "metrics.csv");
  std::optional<Stage1Result> reuse;
  const bool has_stage1 = variant != "e2e" && variant != "small";
  if (has_stage1 && fs::exists(ckpt_path(cfg, "1"))) {
    reuse.emplace();
    reuse->selected = load_stage(cfg, "1");
  }
  const VariantResult r =
      run_variant(cfg, store, tasks, variant, cfg.seed, &metrics, reuse ? &*reuse : nullptr);
  save_checkpoint(r.params, {cfg.hash(), "ablation:" + variant, 0}, dir / "final.ckpt");
  write_json(dir / "report.json", r.to_json());
  std::printf("%s: mean normalized score %.2f%s\n", variant.c_str(), r.eval.mean,
              r.reused_stage1 ? " (stage-1 checkpoint reused)" : "");
}

void cmd_report(const ExperimentConfig& cfg) {
  const fs::path rp = out_dir(cfg) / "report.json";
  nlohmann::ordered_json report = fs::exists(rp) ? read_json(rp) : nlohmann::ordered_json::object();
  report["config_hash"] = cfg.hash();
  if (fs::exists(out_dir(cfg) / "stage1.json")) report["stage1"] = read_json(out_dir(cfg) / "stage1.json");
  nlohmann::ordered_json abl = nlohmann::ordered_json::object();
  const fs::path adir = out_dir(cfg) / "ablations";
  if (fs::exists(adir)) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(adir)) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      if (fs::exists(d / "report.json")) abl[d.filename().string()] = read_json(d / "report.json");
    }
  }
  report["ablations"] = abl;
  report["stage1_reuse"] =
      "ablation variants that include stage 1 reuse checkpoints/stage1.ckpt when present";
  write_json(rp, report);

  std::printf("%-22s %10s\n", "run", "score");
  if (report.contains("evaluations")) {
    for (const auto& [mode, e] : report["evaluations"].items()) {
      std::printf("%-22s %10.2f\n", mode.c_str(), e["mean_normalized_score"].get<double>());
    }
  }
  for (const auto& [name, a] : abl.items()) {
    std::printf("%-22s %10.2f\n", ("ablate " + name).c_str(),
                a["evaluation"]["mean_normalized_score"].get<double>());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moedt: mixture-of-experts decision transformer workbench"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "experiment config (JSON)");
    sub->add_option("--seed", common.seed, "override the config seed");
    sub->add_option("--out", common.out, "output directory (overrides output_dir)");
  };

  std::string method, mode = "dense", variant;
  auto* gen = app.add_subcommand("gen-data", "generate task datasets and manifest");
  auto* s1 = app.add_subcommand("train-backbone", "stage 1: train the backbone");
  auto* grp = app.add_subcommand("group-tasks", "partition tasks into expert groups");
  grp->add_option("--method", method, "random | gradient")->check(CLI::IsMember({"random", "gradient"}));
  auto* s2 = app.add_subcommand("train-experts", "stage 2: train one expert per group");
  auto* s3 = app.add_subcommand("train-router", "stage 3: train the router");
  auto* ev = app.add_subcommand("evaluate", "roll out the model on every task");
  ev->add_option("--mode", mode, "dense | topk:<k> | oracle | backbone");
  auto* ab = app.add_subcommand("ablate", "run one ablation variant");
  ab->add_option("--variant", variant,
                 "three_stage | e2e | no_grouping | no_expert_freeze | oracle_eval | topk:<k> | small")
      ->required();
  auto* rep = app.add_subcommand("report", "collect evaluation results into report.json");
  for (auto* sub : {gen, s1, grp, s2, s3, ev, ab, rep}) add_common(sub);

  CLI11_PARSE(app, argc, argv);
  try {
    const ExperimentConfig cfg = load_config(common);
    if (gen->parsed()) cmd_gen_data(cfg);
    if (s1->parsed()) cmd_train_backbone(cfg);
    if (grp->parsed()) cmd_group_tasks(cfg, method);
    if (s2->parsed()) cmd_train_experts(cfg);
    if (s3->parsed()) cmd_train_router(cfg);
    if (ev->parsed()) cmd_evaluate(cfg, mode);
    if (ab->parsed()) cmd_ablate(cfg, variant);
    if (rep->parsed()) cmd_report(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
