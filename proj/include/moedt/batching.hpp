#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "moedt/model.hpp"
#include "moedt/tasks.hpp"

namespace moedt {

// One training sequence: a prompt from the task's top quartile and a
// segment from a uniformly chosen trajectory.
TokenSequence sample_sequence(const ModelConfig& cfg, const TaskDataset& data, uint64_t key);

// Every sequence comes from `task_id`.
ModelBatch sample_task_batch(const ModelConfig& cfg, const DatasetStore& store, int task_id,
                             int batch_size, uint64_t key);

// Each sequence picks its task uniformly from `task_ids`, then a window.
// `task_of_row` (if given) receives the chosen task per sequence.
ModelBatch sample_mixed_batch(const ModelConfig& cfg, const DatasetStore& store,
                              const std::vector<int>& task_ids, int batch_size, uint64_t key,
                              std::vector<int>* task_of_row = nullptr);

// Fills batch.expert_per_sequence from a task -> expert map.
void attach_experts(ModelBatch& batch, const std::vector<int>& task_of_row,
                    const std::map<int, int>& expert_of_task);

}  // namespace moedt
