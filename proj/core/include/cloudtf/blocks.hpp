#pragma once

#include <string>
#include <vector>

#include "cloudtf/gridnn.hpp"
#include "cloudtf/raster.hpp"

namespace cloudtf {

/// How a head turns points into grid keys.
///  residual_se3: k = sigmoid(T(p + d(x)))  (learned residual + learned T)
///  linear:       k = sigmoid(BN(W x + b))  (positions ignored)
///  fixed_random: k = sigmoid(R p)          (R a frozen random rotation)
enum class KeyMode { residual_se3, linear, fixed_random };

std::string to_string(KeyMode mode);
KeyMode parse_key_mode(const std::string& name);

struct HeadConfig {
  int dims = 2;
  std::size_t w = 16;
  std::size_t channels = 16;
  KeyMode key_mode = KeyMode::residual_se3;
  raster::Aggregation aggregation = raster::Aggregation::max;
  bool anisotropic_scale = false;

  void validate() const;
};

struct BlockConfig {
  std::vector<HeadConfig> heads;
  std::size_t g = 64;
  nn::NormKind norm_kind = nn::NormKind::batch;
  bool gradient_balancing = true;
  std::size_t style_dim = 0;

  void validate() const;
};

/// Head counts and base grid/channel sizes of one cascade. Block i of a
/// cascade halves the grid sizes and doubles the channels i times.
struct HeadLayout {
  std::size_t heads_2d = 4;
  std::size_t heads_3d = 4;
  std::size_t w2d = 16;
  std::size_t w3d = 8;
  std::size_t c2d = 16;
  std::size_t c3d = 8;
  KeyMode key_mode = KeyMode::residual_se3;
  raster::Aggregation aggregation = raster::Aggregation::max;
  bool anisotropic_scale = false;
};

std::vector<BlockConfig> cascade_configs(const HeadLayout& layout, std::size_t g, nn::NormKind norm,
                                         bool gradient_balancing, std::size_t style_dim);

/// Predicts (0,1) grid keys for one head according to its KeyMode.
class KeyPredictor : public Module {
 public:
  KeyPredictor() = default;
  KeyPredictor(KeyMode mode, std::size_t feature_dim, int dims, bool anisotropic_scale, Rng& rng);
  Tensor forward(const PointCloudBatch& pc, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  KeyMode mode() const { return mode_; }
  raster::KeyParams& params() { return params_; }

 private:
  KeyMode mode_ = KeyMode::residual_se3;
  int dims_ = 2;
  raster::KeyParams params_;
  nn::Dense linear_;
  nn::Norm linear_norm_;
};

/// One cloud transform: keys, value affine + norm, rasterize, conv,
/// de-rasterize, norm + relu, affine lift back to g.
class CloudTransformHead : public Module {
 public:
  CloudTransformHead(const HeadConfig& cfg, std::size_t g, nn::NormKind norm, std::size_t style_dim,
                     bool gradient_balancing, Rng& rng);

  Tensor keys(const PointCloudBatch& pc, const ForwardContext& ctx);
  Tensor forward(const PointCloudBatch& pc, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;

  const HeadConfig& config() const { return cfg_; }
  bool gradient_balancing() const { return balancing_; }
  void set_gradient_balancing(bool on) { balancing_ = on; }
  /// Keys tensor of the most recent forward (gradient available after backward).
  const Tensor& last_keys() const { return last_keys_; }

  KeyPredictor& key_predictor() { return keys_; }
  nn::Dense& value_map() { return value_; }
  nn::Conv& conv() { return conv_; }
  nn::Dense& lift() { return lift_; }
  nn::Norm& value_norm() { return value_norm_; }
  nn::Norm& out_norm() { return out_norm_; }

 private:
  HeadConfig cfg_;
  bool balancing_;
  KeyPredictor keys_;
  nn::Dense value_;
  nn::Norm value_norm_;
  nn::Conv conv_;
  nn::Norm out_norm_;
  nn::Dense lift_;
  Tensor last_keys_;
};

/// Parallel heads summed, then norm + relu, plus the residual input.
class MhctBlock : public Module {
 public:
  MhctBlock(const BlockConfig& cfg, Rng& rng);

  PointCloudBatch forward(const PointCloudBatch& pc, const ForwardContext& ctx);
  /// Sum of the head outputs in fixed head order (before the block norm).
  Tensor head_sum(const PointCloudBatch& pc, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;

  const BlockConfig& config() const { return cfg_; }
  std::vector<CloudTransformHead>& heads() { return heads_; }
  nn::Norm& norm() { return norm_; }
  void set_gradient_balancing(bool on);

 private:
  BlockConfig cfg_;
  std::vector<CloudTransformHead> heads_;
  nn::Norm norm_;
};

/// Three MHCT blocks applied in sequence.
class Cmhct : public Module {
 public:
  Cmhct(const std::vector<BlockConfig>& stage, Rng& rng);
  PointCloudBatch forward(const PointCloudBatch& pc, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  std::vector<MhctBlock>& blocks() { return blocks_; }

 private:
  std::vector<MhctBlock> blocks_;
};

struct PoolConfig {
  std::size_t heads_2d = 2;
  std::size_t heads_3d = 2;
  std::size_t w2d = 8;
  std::size_t w3d = 8;
  std::size_t c2d = 8;
  std::size_t c3d = 8;
  std::size_t out_dim = 1024;
  KeyMode key_mode = KeyMode::residual_se3;
  bool anisotropic_scale = false;
  bool gradient_balancing = true;
  nn::NormKind norm_kind = nn::NormKind::batch;

  void validate() const;
};

/// Rasterization heads whose grids feed per-head mini-CNNs; head vectors are
/// concatenated and mapped densely to one global vector per cloud.
class CloudPool : public Module {
 public:
  CloudPool(const PoolConfig& cfg, std::size_t g, Rng& rng);
  Tensor forward(const PointCloudBatch& pc, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  std::size_t out_dim() const { return cfg_.out_dim; }

  struct Head {
    HeadConfig cfg;
    KeyPredictor keys;
    nn::Dense value;
    nn::Norm value_norm;
    nn::MiniCnn cnn;
  };
  std::vector<Head>& heads() { return heads_; }
  nn::Dense& output() { return out_; }

 private:
  PoolConfig cfg_;
  std::vector<Head> heads_;
  nn::Dense out_;
};

}  // namespace cloudtf
