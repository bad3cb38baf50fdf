#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cloudtf/blocks.hpp"

namespace cloudtf {

enum class Task { segment, classify, generate, inpaint };

std::string to_string(Task task);
/// Accepts the long names and the CLI short forms seg, cls, gen, inpaint.
Task parse_task(const std::string& name);

struct ModelConfig {
  Task task = Task::segment;
  std::size_t in_features = 6;
  std::size_t g = 64;
  std::size_t n_stages = 1;
  HeadLayout layout;
  nn::NormKind norm_kind = nn::NormKind::batch;
  bool gradient_balancing = true;
  int classes = 2;
  std::size_t mlp_hidden = 64;
  std::size_t style_dim = 64;
  PoolConfig pool;
  std::size_t out_points = 256;

  void validate() const;
};

/// Uniform samples on the unit sphere, [B, n, 3].
Tensor sample_sphere(std::size_t batch, std::size_t n, Rng& rng);

/// Point-wise lift to g followed by n_stages cascaded blocks.
class Backbone : public Module {
 public:
  Backbone() = default;
  Backbone(std::size_t in_features, const ModelConfig& cfg, nn::NormKind norm, bool lift_relu, Rng& rng);
  PointCloudBatch forward(const PointCloudBatch& pc, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  std::vector<Cmhct>& stages() { return stages_; }
  void set_gradient_balancing(bool on);

 private:
  nn::Dense lift_;
  bool lift_relu_ = true;
  std::vector<Cmhct> stages_;
};

class Segmenter : public Module {
 public:
  Segmenter(const ModelConfig& cfg, Rng& rng);
  /// Per-point logits [B, N, classes].
  Tensor forward(const PointCloudBatch& pc, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  Backbone& backbone() { return backbone_; }

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  nn::Dense head1_, head2_;
};

struct ClassifierOutput {
  Tensor class_logits;  // [B, K]
  Tensor fg_logits;     // [B, N, 2]
  Tensor class_vector;  // [B, pool.out_dim]
};

class Classifier : public Module {
 public:
  Classifier(const ModelConfig& cfg, Rng& rng);
  ClassifierOutput forward(const PointCloudBatch& pc, const ForwardContext& ctx);
  /// 0.5 * CE(class) + 0.5 * CE(foreground mask).
  Tensor loss(const ClassifierOutput& out, const std::vector<int>& class_labels, const std::vector<int>& fg_mask) const;
  void collect(ParameterSet& out, const std::string& prefix) const override;
  Backbone& backbone() { return backbone_; }
  CloudPool& pool() { return pool_; }

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  CloudPool pool_;
  nn::Dense class_out_;
  nn::Dense mask_feat_, mask_class_, mask_out_;
};

/// Style-conditioned point generator: sphere samples -> linear lift ->
/// adaptive-norm cascades -> two-layer MLP -> tanh.
class Generator : public Module {
 public:
  /// extra_flag adds one input feature (the inpainter's partial/sphere flag).
  Generator(const ModelConfig& cfg, Rng& rng, bool extra_flag = false);
  /// Generates from explicit input points [B, n, 3] (and flags [B, n, 1] when
  /// built with extra_flag).
  Tensor forward_from(const Tensor& input_points, const Tensor& flags, const Tensor& style, bool training);
  /// Samples n_out sphere points from rng and generates [B, n_out, 3].
  Tensor forward(const Tensor& style, std::size_t n_out, Rng& rng, bool training);
  /// Two passes with independent sphere noise and the same style; returns a
  /// random subset of n_target of the 2 * n_per_pass points, per sample.
  Tensor generate_points(const Tensor& style, std::size_t n_per_pass, std::size_t n_target, Rng& rng);
  void collect(ParameterSet& out, const std::string& prefix) const override;
  std::size_t style_dim() const { return cfg_.style_dim; }
  Backbone& backbone() { return backbone_; }

 private:
  ModelConfig cfg_;
  bool extra_flag_;
  Backbone backbone_;
  nn::Dense head1_, head2_;
};

/// Classifier-style encoder producing a style vector, and a flag-augmented
/// generator fed with the partial cloud plus sphere samples.
class Inpainter : public Module {
 public:
  Inpainter(const ModelConfig& cfg, Rng& rng);
  /// partial.positions [B, n_partial, 3]; returns [B, n_out, 3].
  Tensor forward(const PointCloudBatch& partial, std::size_t n_out, Rng& rng, bool training);
  Tensor encode(const PointCloudBatch& partial, const ForwardContext& ctx);
  void collect(ParameterSet& out, const std::string& prefix) const override;

 private:
  ModelConfig cfg_;
  Backbone encoder_;
  CloudPool pool_;
  nn::Dense to_style_;
  Generator generator_;
};

}  // namespace cloudtf
