#include "cloudtf/blocks.hpp"

#include <stdexcept>

#include "cloudtf/ops.hpp"

namespace cloudtf {

std::string to_string(KeyMode mode) {
  switch (mode) {
    case KeyMode::residual_se3: return "residual-se3";
    case KeyMode::linear: return "linear";
    case KeyMode::fixed_random: return "fixed-random";
  }
  return "?";
}

KeyMode parse_key_mode(const std::string& name) {
  if (name == "residual-se3" || name == "residual") return KeyMode::residual_se3;
  if (name == "linear") return KeyMode::linear;
  if (name == "fixed-random" || name == "fixed") return KeyMode::fixed_random;
  throw std::invalid_argument("unknown key mode '" + name + "' (expected residual-se3, linear, fixed-random)");
}

void HeadConfig::validate() const {
  if (dims != 2 && dims != 3) throw std::invalid_argument("head dims must be 2 or 3, got " + std::to_string(dims));
  if (w < 2) throw std::invalid_argument("head grid size must be >= 2, got " + std::to_string(w));
  if (channels < 1) throw std::invalid_argument("head channels must be >= 1");
}

void BlockConfig::validate() const {
  if (heads.empty()) throw std::invalid_argument("block needs at least one head");
  if (g < 1) throw std::invalid_argument("block width g must be >= 1");
  if (norm_kind == nn::NormKind::adaptive_instance && style_dim == 0) {
    throw std::invalid_argument("adaptive-instance block needs style_dim > 0");
  }
  for (const auto& h : heads) h.validate();
}

std::vector<BlockConfig> cascade_configs(const HeadLayout& layout, std::size_t g, nn::NormKind norm,
                                         bool gradient_balancing, std::size_t style_dim) {
  std::vector<BlockConfig> out;
  for (std::size_t i = 0; i < 3; ++i) {
    BlockConfig cfg;
    cfg.g = g;
    cfg.norm_kind = norm;
    cfg.gradient_balancing = gradient_balancing;
    cfg.style_dim = style_dim;
    auto add_heads = [&](std::size_t count, int dims, std::size_t w, std::size_t c) {
      for (std::size_t h = 0; h < count; ++h) {
        HeadConfig hc;
        hc.dims = dims;
        hc.w = std::max<std::size_t>(w >> i, 2);
        hc.channels = c << i;
        hc.key_mode = layout.key_mode;
        hc.aggregation = layout.aggregation;
        hc.anisotropic_scale = layout.anisotropic_scale;
        cfg.heads.push_back(hc);
      }
    };
    add_heads(layout.heads_2d, 2, layout.w2d, layout.c2d);
    add_heads(layout.heads_3d, 3, layout.w3d, layout.c3d);
    cfg.validate();
    out.push_back(std::move(cfg));
  }
  return out;
}

KeyPredictor::KeyPredictor(KeyMode mode, std::size_t feature_dim, int dims, bool anisotropic_scale, Rng& rng)
    : mode_(mode), dims_(dims) {
  switch (mode) {
    case KeyMode::residual_se3:
      params_ = raster::KeyParams::init(feature_dim, anisotropic_scale, rng);
      break;
    case KeyMode::linear:
      linear_ = nn::Dense(feature_dim, static_cast<std::size_t>(dims), rng);
      linear_norm_ = nn::Norm(nn::NormKind::batch, static_cast<std::size_t>(dims), 0, rng);
      break;
    case KeyMode::fixed_random:
      params_.transform_linear = Tensor({3, 3}, random_rotation(rng), false);
      break;
  }
}

Tensor KeyPredictor::forward(const PointCloudBatch& pc, const ForwardContext& ctx) {
  switch (mode_) {
    case KeyMode::residual_se3:
      return raster::compute_keys(pc, params_, dims_);
    case KeyMode::linear: {
      ForwardContext key_ctx{ctx.training, Tensor{}};
      return sigmoid(linear_norm_.forward(linear_.forward(pc.features), key_ctx));
    }
    case KeyMode::fixed_random: {
      Tensor t = affine(pc.positions, params_.transform_linear, Tensor{});
      if (dims_ == 2) t = slice(t, 2, 0, 2);
      return sigmoid(t);
    }
  }
  throw std::logic_error("KeyPredictor: bad mode");
}

void KeyPredictor::collect(ParameterSet& out, const std::string& prefix) const {
  switch (mode_) {
    case KeyMode::residual_se3:
      params_.collect(out, prefix);
      break;
    case KeyMode::linear:
      linear_.collect(out, join_name(prefix, "linear"));
      linear_norm_.collect(out, join_name(prefix, "norm"));
      break;
    case KeyMode::fixed_random:
      out.add(join_name(prefix, "rotation"), params_.transform_linear, false);
      break;
  }
}

CloudTransformHead::CloudTransformHead(const HeadConfig& cfg, std::size_t g, nn::NormKind norm, std::size_t style_dim,
                                       bool gradient_balancing, Rng& rng)
    : cfg_(cfg), balancing_(gradient_balancing) {
  cfg_.validate();
  keys_ = KeyPredictor(cfg.key_mode, g, cfg.dims, cfg.anisotropic_scale, rng);
  value_ = nn::Dense(g, cfg.channels, rng);
  value_norm_ = nn::Norm(norm, cfg.channels, style_dim, rng);
  conv_ = nn::Conv(cfg.dims, cfg.channels, cfg.channels, 3, rng);
  out_norm_ = nn::Norm(norm, cfg.channels, style_dim, rng);
  lift_ = nn::Dense(cfg.channels, g, rng);
}

Tensor CloudTransformHead::keys(const PointCloudBatch& pc, const ForwardContext& ctx) {
  return keys_.forward(pc, ctx);
}

Tensor CloudTransformHead::forward(const PointCloudBatch& pc, const ForwardContext& ctx) {
  if (pc.feature_dim() != value_.in_dim()) {
    throw std::invalid_argument("cloud transform: feature width " + std::to_string(pc.feature_dim()) +
                                " does not match head input " + std::to_string(value_.in_dim()));
  }
  last_keys_ = keys_.forward(pc, ctx);
  Tensor values = value_norm_.forward(value_.forward(pc.features), ctx);
  raster::Footprint fp = raster::make_footprint(last_keys_, cfg_.w);
  raster::GridMap grid = raster::rasterize(values, fp, {cfg_.aggregation, balancing_});
  Tensor conv = conv_.forward(grid.data);
  Tensor back = raster::derasterize(conv, fp, balancing_);
  return lift_.forward(relu(out_norm_.forward(back, ctx)));
}

void CloudTransformHead::collect(ParameterSet& out, const std::string& prefix) const {
  keys_.collect(out, join_name(prefix, "keys"));
  value_.collect(out, join_name(prefix, "value"));
  value_norm_.collect(out, join_name(prefix, "value_norm"));
  conv_.collect(out, join_name(prefix, "conv"));
  out_norm_.collect(out, join_name(prefix, "out_norm"));
  lift_.collect(out, join_name(prefix, "lift"));
}

MhctBlock::MhctBlock(const BlockConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  heads_.reserve(cfg.heads.size());
  for (const auto& h : cfg.heads) {
    heads_.emplace_back(h, cfg.g, cfg.norm_kind, cfg.style_dim, cfg.gradient_balancing, rng);
  }
  norm_ = nn::Norm(cfg.norm_kind, cfg.g, cfg.style_dim, rng);
}

Tensor MhctBlock::head_sum(const PointCloudBatch& pc, const ForwardContext& ctx) {
  if (pc.feature_dim() != cfg_.g) {
    throw std::invalid_argument("mhct: input feature width " + std::to_string(pc.feature_dim()) +
                                " != block width g=" + std::to_string(cfg_.g));
  }
  Tensor total = heads_[0].forward(pc, ctx);
  for (std::size_t h = 1; h < heads_.size(); ++h) total = add(total, heads_[h].forward(pc, ctx));
  return total;
}

PointCloudBatch MhctBlock::forward(const PointCloudBatch& pc, const ForwardContext& ctx) {
  Tensor branch = relu(norm_.forward(head_sum(pc, ctx), ctx));
  return pc.with_features(add(pc.features, branch));
}

void MhctBlock::collect(ParameterSet& out, const std::string& prefix) const {
  for (std::size_t h = 0; h < heads_.size(); ++h) heads_[h].collect(out, join_name(prefix, "head" + std::to_string(h)));
  norm_.collect(out, join_name(prefix, "norm"));
}

void MhctBlock::set_gradient_balancing(bool on) {
  cfg_.gradient_balancing = on;
  for (auto& h : heads_) h.set_gradient_balancing(on);
}

Cmhct::Cmhct(const std::vector<BlockConfig>& stage, Rng& rng) {
  if (stage.empty()) throw std::invalid_argument("cascade needs at least one block");
  for (const auto& cfg : stage) blocks_.emplace_back(cfg, rng);
}

PointCloudBatch Cmhct::forward(const PointCloudBatch& pc, const ForwardContext& ctx) {
  PointCloudBatch cur = pc;
  for (auto& b : blocks_) cur = b.forward(cur, ctx);
  return cur;
}

void Cmhct::collect(ParameterSet& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, join_name(prefix, "block" + std::to_string(i)));
}

void PoolConfig::validate() const {
  if (heads_2d + heads_3d == 0) throw std::invalid_argument("pool needs at least one head");
  if (out_dim < 1) throw std::invalid_argument("pool out_dim must be >= 1");
  auto check = [](std::size_t count, std::size_t w, const char* what) {
    if (count > 0 && w < nn::MiniCnn::min_grid) {
      throw std::invalid_argument(std::string("pool ") + what + " grid " + std::to_string(w) +
                                  " is too small for two stride-2 pools (need >= " +
                                  std::to_string(nn::MiniCnn::min_grid) + ")");
    }
  };
  check(heads_2d, w2d, "2D");
  check(heads_3d, w3d, "3D");
  if ((heads_2d > 0 && c2d < 1) || (heads_3d > 0 && c3d < 1)) throw std::invalid_argument("pool channels must be >= 1");
}

CloudPool::CloudPool(const PoolConfig& cfg, std::size_t g, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  std::size_t concat_width = 0;
  auto add_heads = [&](std::size_t count, int dims, std::size_t w, std::size_t c) {
    for (std::size_t h = 0; h < count; ++h) {
      Head head;
      head.cfg.dims = dims;
      head.cfg.w = w;
      head.cfg.channels = c;
      head.cfg.key_mode = cfg.key_mode;
      head.cfg.aggregation = raster::Aggregation::max;
      head.cfg.anisotropic_scale = cfg.anisotropic_scale;
      head.keys = KeyPredictor(cfg.key_mode, g, dims, cfg.anisotropic_scale, rng);
      head.value = nn::Dense(g, c, rng);
      head.value_norm = nn::Norm(cfg.norm_kind == nn::NormKind::adaptive_instance ? nn::NormKind::batch : cfg.norm_kind,
                                 c, 0, rng);
      // Widths follow the mini-CNN table: 2D grows to 4c, 3D to 2c.
      std::vector<std::size_t> widths = dims == 2 ? std::vector<std::size_t>{c, 2 * c, 4 * c, 4 * c}
                                                  : std::vector<std::size_t>{c, 2 * c, 2 * c, 2 * c};
      head.cnn = nn::MiniCnn(dims, widths, rng);
      concat_width += head.cnn.out_dim();
      heads_.push_back(std::move(head));
    }
  };
  add_heads(cfg.heads_2d, 2, cfg.w2d, cfg.c2d);
  add_heads(cfg.heads_3d, 3, cfg.w3d, cfg.c3d);
  out_ = nn::Dense(concat_width, cfg.out_dim, rng);
}

Tensor CloudPool::forward(const PointCloudBatch& pc, const ForwardContext& ctx) {
  std::vector<Tensor> vectors;
  vectors.reserve(heads_.size());
  for (auto& head : heads_) {
    Tensor keys = head.keys.forward(pc, ctx);
    Tensor values = head.value_norm.forward(head.value.forward(pc.features), ctx);
    raster::Footprint fp = raster::make_footprint(keys, head.cfg.w);
    raster::GridMap grid = raster::rasterize_max(values, fp, cfg_.gradient_balancing);
    vectors.push_back(head.cnn.forward(grid.data, ctx));
  }
  Tensor joined = vectors.size() == 1 ? vectors[0] : concat(vectors, 1);
  return out_.forward(joined);
}

void CloudPool::collect(ParameterSet& out, const std::string& prefix) const {
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    const std::string p = join_name(prefix, "head" + std::to_string(h));
    heads_[h].keys.collect(out, join_name(p, "keys"));
    heads_[h].value.collect(out, join_name(p, "value"));
    heads_[h].value_norm.collect(out, join_name(p, "value_norm"));
    heads_[h].cnn.collect(out, join_name(p, "cnn"));
  }
  out_.collect(out, join_name(prefix, "out"));
}

}  // namespace cloudtf
