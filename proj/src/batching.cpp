#include "moedt/batching.hpp"

#include "moedt/error.hpp"
#include "moedt/rng.hpp"

namespace moedt {

TokenSequence sample_sequence(const ModelConfig& cfg, const TaskDataset& data, uint64_t key) {
  if (data.trajectories.empty()) {
    throw Error("task " + std::to_string(data.spec.task_id) + " has an empty dataset");
  }
  Rng rng(key);
  const StepWindow prompt = sample_prompt(data, cfg.prompt_Kstar, rng.next());
  const auto& traj = data.trajectories[rng.below(data.trajectories.size())];
  const StepWindow segment = sample_segment(traj, cfg.context_K, rng);
  return build_input(cfg, prompt, segment);
}

ModelBatch sample_task_batch(const ModelConfig& cfg, const DatasetStore& store, int task_id,
                             int batch_size, uint64_t key) {
  return sample_mixed_batch(cfg, store, {task_id}, batch_size, key);
}

ModelBatch sample_mixed_batch(const ModelConfig& cfg, const DatasetStore& store,
                              const std::vector<int>& task_ids, int batch_size, uint64_t key,
                              std::vector<int>* task_of_row) {
  if (task_ids.empty()) throw Error("sample batch: no tasks");
  if (batch_size < 1) throw Error("sample batch: batch_size must be >= 1");
  std::vector<TokenSequence> seqs;
  seqs.reserve(static_cast<size_t>(batch_size));
  if (task_of_row) task_of_row->clear();
  Rng rng(key);
  for (int b = 0; b < batch_size; ++b) {
    const int task = task_ids[rng.below(task_ids.size())];
    seqs.push_back(sample_sequence(cfg, store.task(task), rng.next()));
    if (task_of_row) task_of_row->push_back(task);
  }
  return collate(cfg, seqs);
}

void attach_experts(ModelBatch& batch, const std::vector<int>& task_of_row,
                    const std::map<int, int>& expert_of_task) {
  batch.expert_per_sequence.clear();
  for (int t : task_of_row) {
    auto it = expert_of_task.find(t);
    if (it == expert_of_task.end()) {
      throw Error("no expert assigned to task " + std::to_string(t));
    }
    batch.expert_per_sequence.push_back(it->second);
  }
}

}  // namespace moedt
