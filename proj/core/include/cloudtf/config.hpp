#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cloudtf/models.hpp"

namespace cloudtf {

/// Flat `key = value` text. Keys use dotted section names (model.g); `#`
/// starts a comment. Later assignments override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  /// Parses "key=value".
  void set_assignment(const std::string& assignment);
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_factor = 0.5;
  std::size_t decay_interval = 1000;
};

struct DataConfig {
  std::size_t points = 256;
  double noise = 0.01;
  std::size_t train_size = 64;
  std::size_t test_size = 16;
  /// Fraction of classification points that are background clutter.
  double clutter = 0.25;
  /// Generation targets (comma separated from {cube, sphere}).
  std::vector<std::string> shapes{"cube", "sphere"};
  /// Points kept in a completion input.
  std::size_t partial_points = 128;
};

struct TrainConfig {
  Task task = Task::segment;
  ModelConfig model;
  OptimConfig optim;
  DataConfig data;
  std::size_t batch_size = 4;
  std::size_t iterations = 500;
  std::size_t eval_interval = 100;
  std::size_t log_interval = 1;
  /// Iteration at which inpainting switches from EMD + Chamfer to Chamfer only
  /// (0 disables the second phase).
  std::size_t finetune_start = 0;
  /// Generation draws a fresh sphere sample every step unless this is set.
  bool fixed_sphere = true;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::filesystem::path out_dir;

  /// Desk-scale defaults for one task.
  static TrainConfig defaults(Task task);
  /// Applies one key; throws std::invalid_argument on unknown keys or bad values.
  void apply(const std::string& key, const std::string& value);
  void apply(const KeyValueConfig& kv);
  void validate() const;
  /// Canonical `key = value` text of every setting (round-trips through apply).
  std::string to_text() const;
  static std::vector<std::string> known_keys();
};

}  // namespace cloudtf
