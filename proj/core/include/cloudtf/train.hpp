#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "cloudtf/config.hpp"

namespace cloudtf {

/// Raised when a loss or gradient turns non-finite; a per-parameter gradient
/// norm dump has been written next to the metrics file.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::filesystem::path dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const std::filesystem::path& dump() const { return dump_; }

 private:
  std::filesystem::path dump_;
};

struct TrainResult {
  std::filesystem::path out_dir;
  std::size_t iterations = 0;
  double final_loss = 0.0;
  /// Metrics of the final evaluation, keyed by "<split>/<name>".
  std::map<std::string, double> metrics;
};

/// Trains cfg.task on its synthetic dataset. Writes metrics.jsonl,
/// config.txt and checkpoint.ctck into cfg.out_dir (created if needed).
TrainResult run_training(const TrainConfig& cfg);

/// Rebuilds the model of `cfg`, loads `checkpoint` and evaluates on the
/// synthetic test split.
std::map<std::string, double> run_evaluation(const TrainConfig& cfg, const std::filesystem::path& checkpoint);

}  // namespace cloudtf
