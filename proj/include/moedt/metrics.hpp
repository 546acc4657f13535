#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace moedt {

inline constexpr const char* kMetricsHeader =
    "step,stage,loss,grad_similarity,grad_conflict,expert_id,mean_normalized_score,seed";

struct MetricsRow {
  int64_t step = 0;
  std::string stage;  // "1", "2", "3" or "eval"
  std::optional<double> loss;
  std::optional<double> grad_similarity;
  std::optional<double> grad_conflict;
  std::optional<int> expert_id;
  std::optional<double> mean_normalized_score;
  uint64_t seed = 0;

  std::string csv() const;
};

// Appends rows to a CSV file. A new file gets the header; an existing file
// must already carry exactly this header. Rows must be strictly increasing
// in (stage, step), with stages ordered 1 < 2 < 3 < eval.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);

  void append(const MetricsRow& row);
  // First unused step number for `stage` given the rows so far.
  int64_t next_step(const std::string& stage) const;

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  int last_stage_ = -1;
  int64_t last_step_ = -1;
};

int stage_rank(const std::string& stage);

// Parses a metrics file back into rows; validates header and field count.
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

}  // namespace moedt
