#include "moedt/metrics.hpp"

#include <sstream>

#include "moedt/error.hpp"
#include "moedt/hash.hpp"

namespace moedt {

namespace {

template <typename V>
std::string cell(const std::optional<V>& v) {
  if (!v) return "";
  if constexpr (std::is_integral_v<V>) {
    return std::to_string(*v);
  } else {
    return fmt9(*v);
  }
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::optional<double> opt_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace

int stage_rank(const std::string& stage) {
  if (stage == "1") return 1;
  if (stage == "2") return 2;
  if (stage == "3") return 3;
  if (stage == "eval") return 4;
  throw Error("metrics: unknown stage '" + stage + "'");
}

std::string MetricsRow::csv() const {
  return std::to_string(step) + "," + stage + "," + cell(loss) + "," + cell(grad_similarity) +
         "," + cell(grad_conflict) + "," + cell(expert_id) + "," + cell(mean_normalized_score) +
         "," + std::to_string(seed);
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : path_(path) {
  bool fresh = true;
  if (std::filesystem::exists(path)) {
    const auto rows = read_metrics(path);
    fresh = std::filesystem::file_size(path) == 0;
    if (!rows.empty()) {
      last_stage_ = stage_rank(rows.back().stage);
      last_step_ = rows.back().step;
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::binary | std::ios::app);
  if (!out_) throw Error("cannot open metrics file " + path.string());
  if (fresh) {
    out_ << kMetricsHeader << "\n";
    out_.flush();
  }
}

void MetricsWriter::append(const MetricsRow& row) {
  const int rank = stage_rank(row.stage);
  if (row.step < 0) throw Error("metrics: negative step");
  if (rank == 4 && (row.loss || !row.mean_normalized_score)) {
    throw Error("metrics: eval rows carry a score and no loss");
  }
  if (rank != 4 && row.mean_normalized_score) throw Error("metrics: training rows carry no score");
  if (rank < last_stage_ || (rank == last_stage_ && row.step <= last_step_)) {
    throw Error("metrics: row (" + row.stage + ", " + std::to_string(row.step) +
                ") does not follow the previous row");
  }
  out_ << row.csv() << "\n";
  out_.flush();
  last_stage_ = rank;
  last_step_ = row.step;
}

int64_t MetricsWriter::next_step(const std::string& stage) const {
  return stage_rank(stage) == last_stage_ ? last_step_ + 1 : 0;
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open metrics file " + path.string());
  std::string line;
  std::vector<MetricsRow> rows;
  if (!std::getline(in, line)) return rows;
  if (line != kMetricsHeader) {
    throw Error("metrics: header of " + path.string() + " does not match the current schema");
  }
  while (std::getline(in, line)) {
    const auto f = split(line);
    if (f.size() != 8) throw Error("metrics: row with " + std::to_string(f.size()) + " fields");
    MetricsRow r;
    r.step = std::stoll(f[0]);
    r.stage = f[1];
    r.loss = opt_double(f[2]);
    r.grad_similarity = opt_double(f[3]);
    r.grad_conflict = opt_double(f[4]);
    if (!f[5].empty()) r.expert_id = std::stoi(f[5]);
    r.mean_normalized_score = opt_double(f[6]);
    r.seed = std::stoull(f[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace moedt
