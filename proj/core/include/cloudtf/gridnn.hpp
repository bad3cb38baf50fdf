#pragma once

#include <string>
#include <vector>

#include "cloudtf/parameters.hpp"
#include "cloudtf/tensor.hpp"

namespace cloudtf {

/// Per-call state threaded through every layer.
struct ForwardContext {
  bool training = true;
  Tensor style;  // [B, style_dim], adaptive normalization only
};

namespace nn {

/// Same-resolution convolution over a channel-last grid [B, w.., c_in].
/// weight is [k^dims, c_in, c_out] with offsets in row-major order.
struct ConvParams {
  int dims = 2;
  std::size_t kernel = 3;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  Tensor weight;
  Tensor bias;

  static ConvParams init(int dims, std::size_t c_in, std::size_t c_out, std::size_t kernel, Rng& rng);
  /// Centered-delta kernel mapping channel i to channel i, zero bias.
  static ConvParams identity(int dims, std::size_t channels, std::size_t kernel = 3);
};

Tensor conv_same(const Tensor& grid, const ConvParams& p);

enum class NormKind { batch, instance, adaptive_instance };

std::string to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& name);

struct NormParams {
  NormKind kind = NormKind::batch;
  std::size_t channels = 0;
  Tensor scale;          // [c], batch / instance
  Tensor shift;          // [c], batch / instance
  Tensor running_mean;   // [c], batch
  Tensor running_var;    // [c], batch
  double eps = 1e-5;
  double momentum = 0.9;

  static NormParams init(NormKind kind, std::size_t channels);
};

/// x is [B, ..., c]. Batch kind normalizes each channel over all leading axes
/// (running statistics in eval mode); instance kinds normalize each (sample,
/// channel) over the middle axes. Adaptive kind takes scale/shift from
/// `style` [B, 2c] (first c entries scale, last c shift).
Tensor normalize(const Tensor& x, NormParams& p, bool training, const Tensor& style = Tensor{});

/// 2x2(x2) max pooling with stride 2; odd extents are floored.
Tensor max_pool(const Tensor& grid);
/// Mean over all spatial positions: [B, w.., c] -> [B, c].
Tensor avg_pool_global(const Tensor& grid);

class Dense : public Module {
 public:
  Dense() = default;
  Dense(std::size_t d_in, std::size_t d_out, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  void collect(ParameterSet& out, const std::string& prefix) const override;
  std::size_t in_dim() const { return weight_.size(0); }
  std::size_t out_dim() const { return weight_.size(1); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
};

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);

class Conv : public Module {
 public:
  Conv() = default;
  Conv(int dims, std::size_t c_in, std::size_t c_out, std::size_t kernel, Rng& rng);
  Tensor forward(const Tensor& grid) const { return conv_same(grid, params_); }
  void collect(ParameterSet& out, const std::string& prefix) const override;
  ConvParams& params() { return params_; }
  const ConvParams& params() const { return params_; }

 private:
  ConvParams params_;
};

/// Normalization layer. The adaptive kind owns the affine map from the style
/// vector to per-channel scale/shift (initialized to scale 1, shift 0).
class Norm : public Module {
 public:
  Norm() = default;
  Norm(NormKind kind, std::size_t channels, std::size_t style_dim, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  NormParams& params() { return params_; }
  NormKind kind() const { return params_.kind; }

 private:
  NormParams params_;
  Dense style_map_;
};

/// conv -> norm -> relu -> conv -> norm, plus identity (or 1x1 conv) skip,
/// relu after the sum.
class ResBlock : public Module {
 public:
  ResBlock() = default;
  ResBlock(int dims, std::size_t c_in, std::size_t c_out, Rng& rng);
  Tensor forward(const Tensor& grid, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  Conv& conv1() { return conv1_; }
  Conv& conv2() { return conv2_; }
  Norm& norm2() { return norm2_; }
  bool has_projection() const { return has_skip_; }
  Conv& skip() { return skip_; }

 private:
  Conv conv1_, conv2_, skip_;
  Norm norm1_, norm2_;
  bool has_skip_ = false;
};

/// Res(c0,c1) - MaxPool - Res(c1,c2) - MaxPool - Res(c2,c3) - global AvgPool.
class MiniCnn : public Module {
 public:
  MiniCnn() = default;
  MiniCnn(int dims, std::vector<std::size_t> channels, Rng& rng);
  Tensor forward(const Tensor& grid, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  std::size_t out_dim() const { return channels_.back(); }
  std::vector<ResBlock>& blocks() { return blocks_; }
  /// Smallest grid the two stride-2 pools can reduce to at least one cell.
  static constexpr std::size_t min_grid = 4;

 private:
  std::vector<std::size_t> channels_;
  std::vector<ResBlock> blocks_;
};

}  // namespace nn
}  // namespace cloudtf
