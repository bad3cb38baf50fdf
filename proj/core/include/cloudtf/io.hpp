#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cloudtf/parameters.hpp"

namespace cloudtf::io {

/// Single point cloud in the CTPC format: "CTPC", u32 version, u32 n, u32 f,
/// u32 flags (bit 0: labels present), n rows of 3 + f doubles, then n i32
/// labels when flagged. All little-endian.
struct PointCloudFile {
  std::uint32_t n = 0;
  std::uint32_t f = 0;
  std::vector<double> rows;  // n * (3 + f)
  std::vector<std::int32_t> labels;
};

void write_point_cloud(const std::filesystem::path& path, const PointCloudFile& cloud);
PointCloudFile read_point_cloud(const std::filesystem::path& path);

/// Checkpoint: "CTCK", u32 version, u64 config length + config text, u32
/// tensor count, then per tensor u32 name length + name, u32 rank, u64 dims,
/// little-endian doubles.
void write_checkpoint(const std::filesystem::path& path, const std::string& config_text, const ParameterSet& params);
/// Copies stored values into the matching tensors of `params` and returns the
/// stored config text. Missing, extra, or reshaped tensors are errors.
std::string read_checkpoint(const std::filesystem::path& path, ParameterSet& params);
/// Config text stored in a checkpoint, without touching any model.
std::string read_checkpoint_config(const std::filesystem::path& path);

/// JSON-lines metrics file: one {"iter", "split", "name", "value"} object per
/// row, closed by a {"checksum", "rows"} line covering every earlier byte.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  ~MetricsWriter();
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;

  void write(std::size_t iter, const std::string& split, const std::string& name, double value);
  /// Writes the checksum line and closes the file.
  void close();

 private:
  std::ofstream out_;
  std::uint64_t hash_;
  std::size_t rows_ = 0;
  bool closed_ = false;
};

struct MetricsCheck {
  bool complete = false;
  std::size_t rows = 0;
  std::string error;
};

/// Verifies the trailing checksum line of a metrics file.
MetricsCheck verify_metrics(const std::filesystem::path& path);

std::uint64_t fnv1a64(const std::string& bytes, std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace cloudtf::io
