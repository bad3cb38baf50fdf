#include "cloudtf/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cloudtf/losses.hpp"
#include "cloudtf/ops.hpp"

namespace cloudtf {

std::string to_string(Task task) {
  switch (task) {
    case Task::segment: return "segment";
    case Task::classify: return "classify";
    case Task::generate: return "generate";
    case Task::inpaint: return "inpaint";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  if (name == "segment" || name == "seg") return Task::segment;
  if (name == "classify" || name == "cls") return Task::classify;
  if (name == "generate" || name == "gen") return Task::generate;
  if (name == "inpaint") return Task::inpaint;
  throw std::invalid_argument("unknown task '" + name + "' (expected seg, cls, gen, inpaint)");
}

void ModelConfig::validate() const {
  if (n_stages < 1) throw std::invalid_argument("model: n_stages must be >= 1");
  if (g < 1) throw std::invalid_argument("model: g must be >= 1");
  if (in_features < 1) throw std::invalid_argument("model: in_features must be >= 1");
  if (mlp_hidden < 1) throw std::invalid_argument("model: mlp_hidden must be >= 1");
  if (layout.heads_2d + layout.heads_3d == 0) throw std::invalid_argument("model: layout has no heads");
  if ((task == Task::segment || task == Task::classify) && classes < 2) {
    throw std::invalid_argument("model: classes must be >= 2");
  }
  if ((task == Task::generate || task == Task::inpaint) && style_dim < 1) {
    throw std::invalid_argument("model: style_dim must be >= 1");
  }
  if (task == Task::classify || task == Task::inpaint) pool.validate();
  if ((task == Task::generate || task == Task::inpaint) && out_points < 1) {
    throw std::invalid_argument("model: out_points must be >= 1");
  }
}

Tensor sample_sphere(std::size_t batch, std::size_t n, Rng& rng) {
  std::vector<double> v(batch * n * 3);
  for (std::size_t i = 0; i < batch * n; ++i) {
    double x, y, z, r;
    do {
      x = normal(rng);
      y = normal(rng);
      z = normal(rng);
      r = std::sqrt(x * x + y * y + z * z);
    } while (r < 1e-12);
    v[3 * i] = x / r;
    v[3 * i + 1] = y / r;
    v[3 * i + 2] = z / r;
  }
  return Tensor({batch, n, 3}, std::move(v));
}

Backbone::Backbone(std::size_t in_features, const ModelConfig& cfg, nn::NormKind norm, bool lift_relu, Rng& rng)
    : lift_(in_features, cfg.g, rng), lift_relu_(lift_relu) {
  const std::size_t style = norm == nn::NormKind::adaptive_instance ? cfg.style_dim : 0;
  for (std::size_t s = 0; s < cfg.n_stages; ++s) {
    stages_.emplace_back(cascade_configs(cfg.layout, cfg.g, norm, cfg.gradient_balancing, style), rng);
  }
}

PointCloudBatch Backbone::forward(const PointCloudBatch& pc, const ForwardContext& ctx) {
  if (pc.feature_dim() != lift_.in_dim()) {
    throw std::invalid_argument("model: input feature width " + std::to_string(pc.feature_dim()) +
                                " does not match configured " + std::to_string(lift_.in_dim()));
  }
  Tensor h = lift_.forward(pc.features);
  if (lift_relu_) h = relu(h);
  PointCloudBatch cur = pc.with_features(h);
  for (auto& s : stages_) cur = s.forward(cur, ctx);
  return cur;
}

void Backbone::collect(ParameterSet& out, const std::string& prefix) const {
  lift_.collect(out, join_name(prefix, "lift"));
  for (std::size_t s = 0; s < stages_.size(); ++s) stages_[s].collect(out, join_name(prefix, "stage" + std::to_string(s)));
}

void Backbone::set_gradient_balancing(bool on) {
  for (auto& s : stages_)
    for (auto& b : s.blocks()) b.set_gradient_balancing(on);
}

Segmenter::Segmenter(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg),
      backbone_((cfg.validate(), cfg.in_features), cfg, nn::NormKind::batch, true, rng),
      head1_(cfg.g, cfg.mlp_hidden, rng),
      head2_(cfg.mlp_hidden, static_cast<std::size_t>(cfg.classes), rng) {}

Tensor Segmenter::forward(const PointCloudBatch& pc, const ForwardContext& ctx) {
  PointCloudBatch f = backbone_.forward(pc, ctx);
  return head2_.forward(relu(head1_.forward(f.features)));
}

void Segmenter::collect(ParameterSet& out, const std::string& prefix) const {
  backbone_.collect(out, join_name(prefix, "backbone"));
  head1_.collect(out, join_name(prefix, "mlp1"));
  head2_.collect(out, join_name(prefix, "mlp2"));
}

Classifier::Classifier(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg),
      backbone_((cfg.validate(), cfg.in_features), cfg, nn::NormKind::batch, true, rng),
      pool_(cfg.pool, cfg.g, rng),
      class_out_(cfg.pool.out_dim, static_cast<std::size_t>(cfg.classes), rng),
      mask_feat_(cfg.g, cfg.mlp_hidden, rng),
      mask_class_(cfg.pool.out_dim, cfg.mlp_hidden, rng, false),
      mask_out_(cfg.mlp_hidden, 2, rng) {}

ClassifierOutput Classifier::forward(const PointCloudBatch& pc, const ForwardContext& ctx) {
  PointCloudBatch f = backbone_.forward(pc, ctx);
  ClassifierOutput out;
  out.class_vector = pool_.forward(f, ctx);
  out.class_logits = class_out_.forward(out.class_vector);
  // Affine map of concat(point feature, k_class), split into its two blocks
  // so the broadcast class vector is projected once per cloud.
  const std::size_t n = f.points();
  Tensor per_cloud = repeat_axis(mask_class_.forward(out.class_vector), 1, n);
  Tensor hidden = relu(add(mask_feat_.forward(f.features), per_cloud));
  out.fg_logits = mask_out_.forward(hidden);
  return out;
}

Tensor Classifier::loss(const ClassifierOutput& out, const std::vector<int>& class_labels,
                        const std::vector<int>& fg_mask) const {
  return add(scale(cross_entropy(out.class_logits, class_labels), 0.5),
             scale(cross_entropy(out.fg_logits, fg_mask), 0.5));
}

void Classifier::collect(ParameterSet& out, const std::string& prefix) const {
  backbone_.collect(out, join_name(prefix, "backbone"));
  pool_.collect(out, join_name(prefix, "pool"));
  class_out_.collect(out, join_name(prefix, "class_out"));
  mask_feat_.collect(out, join_name(prefix, "mask_feat"));
  mask_class_.collect(out, join_name(prefix, "mask_class"));
  mask_out_.collect(out, join_name(prefix, "mask_out"));
}

Generator::Generator(const ModelConfig& cfg, Rng& rng, bool extra_flag)
    : cfg_(cfg),
      extra_flag_(extra_flag),
      backbone_((cfg.validate(), extra_flag ? 4 : 3), cfg, nn::NormKind::adaptive_instance, false, rng),
      head1_(cfg.g, cfg.mlp_hidden, rng),
      head2_(cfg.mlp_hidden, 3, rng) {}

Tensor Generator::forward_from(const Tensor& input_points, const Tensor& flags, const Tensor& style, bool training) {
  if (style.rank() != 2 || style.size(1) != cfg_.style_dim) {
    throw std::invalid_argument("generator: style must be [B, " + std::to_string(cfg_.style_dim) + "], got " +
                                shape_str(style.shape()));
  }
  if (input_points.rank() != 3 || input_points.size(0) != style.size(0)) {
    throw std::invalid_argument("generator: input points " + shape_str(input_points.shape()) +
                                " do not match style batch " + std::to_string(style.size(0)));
  }
  for (double v : style.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("generator: style vector is not finite");
  }
  PointCloudBatch pc;
  pc.positions = input_points;
  if (extra_flag_) {
    if (!flags.defined()) throw std::invalid_argument("generator: flag channel required");
    pc.features = concat({input_points, flags}, 2);
  } else {
    pc.features = input_points;
  }
  ForwardContext ctx{training, style};
  PointCloudBatch f = backbone_.forward(pc, ctx);
  return tanh(head2_.forward(relu(head1_.forward(f.features))));
}

Tensor Generator::forward(const Tensor& style, std::size_t n_out, Rng& rng, bool training) {
  if (style.rank() != 2) throw std::invalid_argument("generator: style must be [B, style_dim]");
  Tensor sphere = sample_sphere(style.size(0), n_out, rng);
  Tensor flags;
  if (extra_flag_) flags = Tensor({style.size(0), n_out, 1});
  return forward_from(sphere, flags, style, training);
}

Tensor Generator::generate_points(const Tensor& style, std::size_t n_per_pass, std::size_t n_target, Rng& rng) {
  if (n_target > 2 * n_per_pass) {
    throw std::invalid_argument("generate_points: cannot select " + std::to_string(n_target) + " of " +
                                std::to_string(2 * n_per_pass) + " points");
  }
  NoGradGuard guard;
  Tensor first = forward(style, n_per_pass, rng, false);
  Tensor second = forward(style, n_per_pass, rng, false);
  Tensor both = concat({first, second}, 1);
  const std::size_t batch = style.size(0), total = 2 * n_per_pass;
  std::vector<double> out;
  out.reserve(batch * n_target * 3);
  auto src = both.data();
  std::vector<std::size_t> order(total);
  for (std::size_t b = 0; b < batch; ++b) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < n_target; ++i) {
      const double* p = src.data() + (b * total + order[i]) * 3;
      out.insert(out.end(), p, p + 3);
    }
  }
  return Tensor({batch, n_target, 3}, std::move(out));
}

void Generator::collect(ParameterSet& out, const std::string& prefix) const {
  backbone_.collect(out, join_name(prefix, "backbone"));
  head1_.collect(out, join_name(prefix, "mlp1"));
  head2_.collect(out, join_name(prefix, "mlp2"));
}

Inpainter::Inpainter(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg),
      encoder_((cfg.validate(), cfg.in_features), cfg, nn::NormKind::batch, true, rng),
      pool_(cfg.pool, cfg.g, rng),
      to_style_(cfg.pool.out_dim, cfg.style_dim, rng),
      generator_(cfg, rng, true) {}

Tensor Inpainter::encode(const PointCloudBatch& partial, const ForwardContext& ctx) {
  PointCloudBatch f = encoder_.forward(partial, ctx);
  return to_style_.forward(pool_.forward(f, ctx));
}

Tensor Inpainter::forward(const PointCloudBatch& partial, std::size_t n_out, Rng& rng, bool training) {
  const std::size_t b = partial.batch(), n_partial = partial.points();
  if (n_partial == 0) throw std::invalid_argument("inpainter: empty partial cloud");
  if (n_out <= n_partial) {
    throw std::invalid_argument("inpainter: n_out " + std::to_string(n_out) + " must exceed the partial size " +
                                std::to_string(n_partial));
  }
  ForwardContext ctx{training, Tensor{}};
  Tensor style = encode(partial, ctx);
  const std::size_t n_sphere = n_out - n_partial;
  Tensor sphere = sample_sphere(b, n_sphere, rng);
  Tensor points = concat({partial.positions, sphere}, 1);
  std::vector<double> flag(b * n_out, 0.0);
  for (std::size_t s = 0; s < b; ++s)
    std::fill_n(flag.begin() + static_cast<std::ptrdiff_t>(s * n_out), n_partial, 1.0);
  return generator_.forward_from(points, Tensor({b, n_out, 1}, std::move(flag)), style, training);
}

void Inpainter::collect(ParameterSet& out, const std::string& prefix) const {
  encoder_.collect(out, join_name(prefix, "encoder"));
  pool_.collect(out, join_name(prefix, "pool"));
  to_style_.collect(out, join_name(prefix, "to_style"));
  generator_.collect(out, join_name(prefix, "generator"));
}

}  // namespace cloudtf
