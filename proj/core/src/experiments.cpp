#include "cloudtf/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "cloudtf/blocks.hpp"
#include "cloudtf/losses.hpp"
#include "cloudtf/models.hpp"
#include "cloudtf/ops.hpp"
#include "cloudtf/train.hpp"

namespace cloudtf::experiments {

GradScope parse_grad_scope(const std::string& name) {
  if (name == "op") return GradScope::op;
  if (name == "block") return GradScope::block;
  if (name == "model") return GradScope::model;
  if (name == "all") return GradScope::all;
  throw std::invalid_argument("unknown gradcheck scope '" + name + "' (expected op, block, model, all)");
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape), true);
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

// Generic scalar readout: sum(out * R) with a fixed random R.
Tensor project(const Tensor& out, const Tensor& r) { return sum(mul(out, r)); }

Tensor readout_for(const Tensor& out, Rng& rng) {
  Tensor r(out.shape());
  for (double& v : r.data()) v = uniform(rng, -1.0, 1.0);
  return r;
}

std::vector<NamedTensor> trainable(const Module& m, const std::string& prefix = "") {
  ParameterSet set;
  m.collect(set, prefix);
  std::vector<NamedTensor> out;
  for (const auto& p : set.items())
    if (p.trainable) out.push_back(p);
  return out;
}

PointCloudBatch random_cloud(std::size_t b, std::size_t n, std::size_t f, Rng& rng) {
  PointCloudBatch pc;
  pc.positions = random_tensor({b, n, 3}, rng, -1.0, 1.0);
  pc.features = random_tensor({b, n, f}, rng);
  return pc;
}

using Builder = std::function<GradcheckProblem(std::uint64_t)>;

// Element-wise or reduction op on freshly drawn inputs.
Builder op_builder(std::vector<Shape> shapes, std::function<Tensor(const std::vector<Tensor>&)> f,
                   double lo = -2.0, double hi = 2.0) {
  return [=](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> in;
    for (const auto& s : shapes) in.push_back(random_tensor(s, rng, lo, hi));
    Tensor r;
    {
      NoGradGuard guard;
      r = readout_for(f(in), rng);
    }
    GradcheckProblem p;
    p.loss = [in, f, r] { return project(f(in), r); };
    for (std::size_t i = 0; i < in.size(); ++i) p.inputs.push_back({"x" + std::to_string(i), in[i], true});
    return p;
  };
}

Builder raster_builder(int dims, std::size_t w, raster::Aggregation agg) {
  return [=](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t b = 2, n = 6, c = 3;
    Tensor values = random_tensor({b, n, c}, rng);
    Tensor keys = random_tensor({b, n, static_cast<std::size_t>(dims)}, rng, 0.02, 0.98);
    auto f = [=] {
      raster::Footprint fp = raster::make_footprint(keys, w);
      return raster::rasterize(values, fp, {agg, false}).data;
    };
    Tensor r;
    {
      NoGradGuard guard;
      r = readout_for(f(), rng);
    }
    GradcheckProblem p;
    p.loss = [f, r] { return project(f(), r); };
    p.inputs = {{"values", values, true}, {"keys", keys, true}};
    return p;
  };
}

Builder deraster_builder(int dims, std::size_t w) {
  return [=](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t b = 2, n = 6, c = 3;
    Shape gs{b};
    for (int a = 0; a < dims; ++a) gs.push_back(w);
    gs.push_back(c);
    Tensor grid = random_tensor(gs, rng);
    Tensor keys = random_tensor({b, n, static_cast<std::size_t>(dims)}, rng, 0.02, 0.98);
    auto f = [=] { return raster::derasterize(grid, raster::make_footprint(keys, w), false); };
    Tensor r;
    {
      NoGradGuard guard;
      r = readout_for(f(), rng);
    }
    GradcheckProblem p;
    p.loss = [f, r] { return project(f(), r); };
    p.inputs = {{"grid", grid, true}, {"keys", keys, true}};
    return p;
  };
}

// Wraps a module built from the seed. `forward` maps (module, cloud) to a tensor.
template <typename M>
Builder module_builder(std::function<std::shared_ptr<M>(Rng&)> make, std::size_t b, std::size_t n, std::size_t f,
                       std::function<Tensor(M&, const PointCloudBatch&)> forward, bool probe_inputs = true) {
  return [=](std::uint64_t seed) {
    Rng rng(seed);
    auto m = make(rng);
    auto pc = std::make_shared<PointCloudBatch>(random_cloud(b, n, f, rng));
    Tensor r;
    {
      NoGradGuard guard;
      r = readout_for(forward(*m, *pc), rng);
    }
    GradcheckProblem p;
    p.loss = [m, pc, forward, r] { return project(forward(*m, *pc), r); };
    p.inputs = trainable(*m);
    if (probe_inputs) {
      p.inputs.push_back({"input.features", pc->features, true});
      p.inputs.push_back({"input.positions", pc->positions, true});
    }
    return p;
  };
}

ModelConfig tiny_model(Task task) {
  ModelConfig c;
  c.task = task;
  c.g = 8;
  c.n_stages = 1;
  c.layout.heads_2d = 1;
  c.layout.heads_3d = 1;
  c.layout.w2d = 8;
  c.layout.w3d = 4;
  c.layout.c2d = 2;
  c.layout.c3d = 2;
  c.gradient_balancing = false;
  c.mlp_hidden = 8;
  c.style_dim = 4;
  c.pool.heads_2d = 1;
  c.pool.heads_3d = 1;
  c.pool.w2d = 8;
  c.pool.w3d = 8;
  c.pool.c2d = 2;
  c.pool.c3d = 2;
  c.pool.out_dim = 8;
  c.pool.gradient_balancing = false;
  c.out_points = 12;
  switch (task) {
    case Task::segment: c.in_features = 6; c.classes = 3; break;
    case Task::classify: c.in_features = 3; c.classes = 3; break;
    case Task::generate: c.in_features = 3; break;
    case Task::inpaint: c.in_features = 3; break;
  }
  return c;
}

HeadConfig tiny_head(int dims, std::size_t w, raster::Aggregation agg = raster::Aggregation::max,
                     KeyMode mode = KeyMode::residual_se3) {
  HeadConfig h;
  h.dims = dims;
  h.w = w;
  h.channels = 3;
  h.aggregation = agg;
  h.key_mode = mode;
  return h;
}

Builder head_builder(HeadConfig h, nn::NormKind norm = nn::NormKind::batch) {
  const std::size_t g = 6, style = norm == nn::NormKind::adaptive_instance ? 4 : 0;
  return [=](std::uint64_t seed) {
    Rng rng(seed);
    auto head = std::make_shared<CloudTransformHead>(h, g, norm, style, false, rng);
    auto pc = std::make_shared<PointCloudBatch>(random_cloud(2, 8, g, rng));
    Tensor s = random_tensor({2, style == 0 ? 1 : style}, rng);
    auto fwd = [head, pc, s, style] { return head->forward(*pc, {true, style ? s : Tensor{}}); };
    Tensor r;
    {
      NoGradGuard guard;
      r = readout_for(fwd(), rng);
    }
    GradcheckProblem p;
    p.loss = [fwd, r] { return project(fwd(), r); };
    p.inputs = trainable(*head);
    p.inputs.push_back({"input.features", pc->features, true});
    p.inputs.push_back({"input.positions", pc->positions, true});
    if (style) p.inputs.push_back({"style", s, true});
    return p;
  };
}

struct Target {
  std::string scope;
  Builder build;
  std::size_t max_entries = 0;
};

const std::map<std::string, Target>& registry() {
  using raster::Aggregation;
  static const std::map<std::string, Target> table = [] {
    std::map<std::string, Target> t;
    auto op = [&](const std::string& name, Builder b) { t[name] = {"op", std::move(b), 0}; };
    op("add", op_builder({{2, 3}, {2, 3}}, [](const auto& x) { return add(x[0], x[1]); }));
    op("sub", op_builder({{2, 3}, {3}}, [](const auto& x) { return sub(x[0], x[1]); }));
    op("mul", op_builder({{2, 3}, {2, 3}}, [](const auto& x) { return mul(x[0], x[1]); }));
    op("mul_broadcast", op_builder({{2, 4, 3}, {3}}, [](const auto& x) { return mul(x[0], x[1]); }));
    op("scale", op_builder({{5}}, [](const auto& x) { return scale(x[0], -1.5); }));
    op("matmul", op_builder({{3, 4}, {4, 2}}, [](const auto& x) { return matmul(x[0], x[1]); }));
    op("affine", op_builder({{2, 3, 4}, {4, 5}, {5}}, [](const auto& x) { return affine(x[0], x[1], x[2]); }));
    op("relu", op_builder({{4, 4}}, [](const auto& x) { return relu(x[0]); }));
    op("sigmoid", op_builder({{6}}, [](const auto& x) { return sigmoid(x[0]); }));
    op("tanh", op_builder({{6}}, [](const auto& x) { return tanh(x[0]); }));
    op("exp", op_builder({{6}}, [](const auto& x) { return exp(x[0]); }));
    op("sum", op_builder({{3, 2}}, [](const auto& x) { return sum(x[0]); }));
    op("mean", op_builder({{3, 2}}, [](const auto& x) { return mean(x[0]); }));
    op("max_reduce", op_builder({{7}}, [](const auto& x) { return max_reduce(x[0]); }));
    op("max_reduce_axis", op_builder({{3, 4, 2}}, [](const auto& x) { return max_reduce(x[0], 1); }));
    op("sum_axis", op_builder({{3, 4, 2}}, [](const auto& x) { return sum_axis(x[0], 1); }));
    op("reshape", op_builder({{2, 6}}, [](const auto& x) { return reshape(x[0], {3, 4}); }));
    op("concat", op_builder({{2, 3}, {2, 2}}, [](const auto& x) { return concat({x[0], x[1]}, 1); }));
    op("slice", op_builder({{4, 3}}, [](const auto& x) { return slice(x[0], 0, 1, 3); }));
    op("repeat_axis", op_builder({{2, 1, 3}}, [](const auto& x) { return repeat_axis(x[0], 1, 4); }));
    op("compute_keys", [](std::uint64_t seed) {
      Rng rng(seed);
      auto kp = std::make_shared<raster::KeyParams>(raster::KeyParams::init(4, false, rng));
      auto pc = std::make_shared<PointCloudBatch>(random_cloud(1, 8, 4, rng));
      Tensor r = readout_for(Tensor({1, 8, 2}), rng);
      GradcheckProblem p;
      p.loss = [kp, pc, r] { return project(raster::compute_keys(*pc, *kp, 2), r); };
      ParameterSet set;
      kp->collect(set, "keys");
      p.inputs = set.items();
      p.inputs.push_back({"input.features", pc->features, true});
      p.inputs.push_back({"input.positions", pc->positions, true});
      return p;
    });
    op("compute_keys_scaled", [](std::uint64_t seed) {
      Rng rng(seed);
      auto kp = std::make_shared<raster::KeyParams>(raster::KeyParams::init(4, true, rng));
      for (double& v : kp->log_scale.data()) v = uniform(rng, -0.5, 0.5);
      auto pc = std::make_shared<PointCloudBatch>(random_cloud(1, 8, 4, rng));
      Tensor r = readout_for(Tensor({1, 8, 3}), rng);
      GradcheckProblem p;
      p.loss = [kp, pc, r] { return project(raster::compute_keys(*pc, *kp, 3), r); };
      ParameterSet set;
      kp->collect(set, "keys");
      p.inputs = set.items();
      p.inputs.push_back({"input.features", pc->features, true});
      return p;
    });
    op("rasterize_max_2d", raster_builder(2, 5, Aggregation::max));
    op("rasterize_max_3d", raster_builder(3, 4, Aggregation::max));
    op("rasterize_sum_2d", raster_builder(2, 5, Aggregation::sum));
    op("rasterize_sum_3d", raster_builder(3, 4, Aggregation::sum));
    op("rasterize_mean_2d", raster_builder(2, 5, Aggregation::mean));
    op("rasterize_mean_3d", raster_builder(3, 4, Aggregation::mean));
    op("derasterize_2d", deraster_builder(2, 5));
    op("derasterize_3d", deraster_builder(3, 4));
    auto conv = [](int dims, std::size_t k) {
      return [=](std::uint64_t seed) {
        Rng rng(seed);
        auto params = std::make_shared<nn::ConvParams>(nn::ConvParams::init(dims, 2, 3, k, rng));
        Shape gs{2};
        for (int a = 0; a < dims; ++a) gs.push_back(4);
        gs.push_back(2);
        Tensor grid = random_tensor(gs, rng);
        Tensor r;
        {
          NoGradGuard guard;
          r = readout_for(nn::conv_same(grid, *params), rng);
        }
        GradcheckProblem p;
        p.loss = [params, grid, r] { return project(nn::conv_same(grid, *params), r); };
        p.inputs = {{"grid", grid, true}, {"weight", params->weight, true}, {"bias", params->bias, true}};
        return p;
      };
    };
    op("conv_2d", conv(2, 3));
    op("conv_3d", conv(3, 3));
    op("conv_1x1", conv(2, 1));
    auto norm = [](nn::NormKind kind) {
      return [=](std::uint64_t seed) {
        Rng rng(seed);
        auto layer = std::make_shared<nn::Norm>(kind, 3, 4, rng);
        Tensor x = random_tensor({2, 5, 3}, rng);
        Tensor style = random_tensor({2, 4}, rng);
        auto fwd = [layer, x, style] { return layer->forward(x, {true, style}); };
        Tensor r;
        {
          NoGradGuard guard;
          r = readout_for(fwd(), rng);
        }
        GradcheckProblem p;
        p.loss = [fwd, r] { return project(fwd(), r); };
        p.inputs = trainable(*layer, "norm");
        p.inputs.push_back({"x", x, true});
        if (kind == nn::NormKind::adaptive_instance) p.inputs.push_back({"style", style, true});
        return p;
      };
    };
    op("norm_batch", norm(nn::NormKind::batch));
    op("norm_instance", norm(nn::NormKind::instance));
    op("norm_adaptive", norm(nn::NormKind::adaptive_instance));
    op("max_pool_2d", op_builder({{1, 4, 5, 2}}, [](const auto& x) { return nn::max_pool(x[0]); }));
    op("max_pool_3d", op_builder({{1, 4, 4, 4, 2}}, [](const auto& x) { return nn::max_pool(x[0]); }));
    op("avg_pool_global", op_builder({{2, 3, 3, 2}}, [](const auto& x) { return nn::avg_pool_global(x[0]); }));
    op("dense", op_builder({{2, 4, 3}, {3, 5}, {5}}, [](const auto& x) { return nn::dense(x[0], x[1], x[2]); }));
    op("cross_entropy", [](std::uint64_t seed) {
      Rng rng(seed);
      Tensor logits = random_tensor({2, 3, 4}, rng);
      std::vector<int> labels{0, 3, -1, 2, 1, 1};
      GradcheckProblem p;
      p.loss = [logits, labels] { return cross_entropy(logits, labels); };
      p.inputs = {{"logits", logits, true}};
      return p;
    });
    op("chamfer", op_builder({{5, 3}, {5, 3}}, [](const auto& x) { return chamfer(x[0], x[1]); }, -1.0, 1.0));
    op("emd_exact", op_builder({{2, 5, 3}, {2, 5, 3}}, [](const auto& x) { return emd_exact(x[0], x[1]); }, -1.0, 1.0));

    auto block = [&](const std::string& name, Builder b, std::size_t entries = 16) {
      t[name] = {"block", std::move(b), entries};
    };
    block("cloud_transform_2d", head_builder(tiny_head(2, 4)));
    block("cloud_transform_3d", head_builder(tiny_head(3, 4)));
    block("cloud_transform_sum", head_builder(tiny_head(2, 4, Aggregation::sum)));
    block("cloud_transform_mean", head_builder(tiny_head(3, 4, Aggregation::mean)));
    block("cloud_transform_linear_keys", head_builder(tiny_head(2, 4, Aggregation::max, KeyMode::linear)));
    block("cloud_transform_fixed_keys", head_builder(tiny_head(2, 4, Aggregation::max, KeyMode::fixed_random)));
    block("cloud_transform_instance", head_builder(tiny_head(2, 4), nn::NormKind::instance));
    block("cloud_transform_adaptive", head_builder(tiny_head(3, 4), nn::NormKind::adaptive_instance));
    block("resblock", [](std::uint64_t seed) {
      Rng rng(seed);
      auto m = std::make_shared<nn::ResBlock>(2, 2, 3, rng);
      Tensor grid = random_tensor({2, 4, 4, 2}, rng);
      Tensor r;
      {
        NoGradGuard guard;
        r = readout_for(m->forward(grid, {true, {}}), rng);
      }
      GradcheckProblem p;
      p.loss = [m, grid, r] { return project(m->forward(grid, {true, {}}), r); };
      p.inputs = trainable(*m);
      p.inputs.push_back({"grid", grid, true});
      return p;
    });
    block("mini_cnn", [](std::uint64_t seed) {
      Rng rng(seed);
      auto m = std::make_shared<nn::MiniCnn>(3, std::vector<std::size_t>{2, 2, 3, 3}, rng);
      Tensor grid = random_tensor({2, 4, 4, 4, 2}, rng);
      Tensor r;
      {
        NoGradGuard guard;
        r = readout_for(m->forward(grid, {true, {}}), rng);
      }
      GradcheckProblem p;
      p.loss = [m, grid, r] { return project(m->forward(grid, {true, {}}), r); };
      p.inputs = trainable(*m);
      p.inputs.push_back({"grid", grid, true});
      return p;
    });
    block("mhct", module_builder<MhctBlock>(
                      [](Rng& rng) {
                        BlockConfig cfg;
                        cfg.g = 6;
                        cfg.gradient_balancing = false;
                        cfg.heads = {tiny_head(2, 4), tiny_head(2, 8), tiny_head(3, 4), tiny_head(3, 4)};
                        return std::make_shared<MhctBlock>(cfg, rng);
                      },
                      2, 8, 6,
                      [](MhctBlock& m, const PointCloudBatch& pc) { return m.forward(pc, {true, {}}).features; }));
    block("cmhct", module_builder<Cmhct>(
                       [](Rng& rng) {
                         HeadLayout layout;
                         layout.heads_2d = 1;
                         layout.heads_3d = 1;
                         layout.w2d = 8;
                         layout.w3d = 4;
                         layout.c2d = 2;
                         layout.c3d = 2;
                         return std::make_shared<Cmhct>(cascade_configs(layout, 6, nn::NormKind::batch, false, 0), rng);
                       },
                       2, 8, 6, [](Cmhct& m, const PointCloudBatch& pc) { return m.forward(pc, {true, {}}).features; }));
    block("mh_cloud_pool", module_builder<CloudPool>(
                               [](Rng& rng) {
                                 PoolConfig cfg;
                                 cfg.heads_2d = 1;
                                 cfg.heads_3d = 1;
                                 cfg.w2d = 8;
                                 cfg.w3d = 8;
                                 cfg.c2d = 2;
                                 cfg.c3d = 2;
                                 cfg.out_dim = 6;
                                 cfg.gradient_balancing = false;
                                 return std::make_shared<CloudPool>(cfg, 6, rng);
                               },
                               2, 12, 6, [](CloudPool& m, const PointCloudBatch& pc) { return m.forward(pc, {true, {}}); }));

    auto model = [&](const std::string& name, Builder b) { t[name] = {"model", std::move(b), 6}; };
    model("segmenter", module_builder<Segmenter>(
                           [](Rng& rng) { return std::make_shared<Segmenter>(tiny_model(Task::segment), rng); }, 2, 10,
                           6, [](Segmenter& m, const PointCloudBatch& pc) { return m.forward(pc, {true, {}}); }));
    model("classifier", [](std::uint64_t seed) {
      Rng rng(seed);
      auto m = std::make_shared<Classifier>(tiny_model(Task::classify), rng);
      auto pc = std::make_shared<PointCloudBatch>(random_cloud(4, 10, 3, rng));
      std::vector<int> cls{0, 2, 1, 0};
      std::vector<int> mask(40);
      for (auto& v : mask) v = static_cast<int>(rng() % 2);
      GradcheckProblem p;
      p.loss = [m, pc, cls, mask] { return m->loss(m->forward(*pc, {true, {}}), cls, mask); };
      p.inputs = trainable(*m);
      p.inputs.push_back({"input.features", pc->features, true});
      return p;
    });
    model("generator", [](std::uint64_t seed) {
      Rng rng(seed);
      auto m = std::make_shared<Generator>(tiny_model(Task::generate), rng);
      Tensor sphere = sample_sphere(2, 10, rng);
      Tensor style = random_tensor({2, 4}, rng);
      Tensor r;
      {
        NoGradGuard guard;
        r = readout_for(m->forward_from(sphere, {}, style, true), rng);
      }
      GradcheckProblem p;
      p.loss = [m, sphere, style, r] { return project(m->forward_from(sphere, {}, style, true), r); };
      p.inputs = trainable(*m);
      p.inputs.push_back({"style", style, true});
      return p;
    });
    model("inpainter", [](std::uint64_t seed) {
      Rng rng(seed);
      auto m = std::make_shared<Inpainter>(tiny_model(Task::inpaint), rng);
      PointCloudBatch partial;
      partial.positions = random_tensor({2, 6, 3}, rng, -0.7, 0.7);
      partial.features = partial.positions;
      auto pc = std::make_shared<PointCloudBatch>(partial);
      const std::uint64_t noise_seed = seed * 7919 + 1;
      Tensor r = readout_for(Tensor({2, 12, 3}), rng);
      GradcheckProblem p;
      p.loss = [m, pc, r, noise_seed] {
        Rng noise(noise_seed);
        return project(m->forward(*pc, 12, noise, true), r);
      };
      p.inputs = trainable(*m);
      return p;
    });
    return t;
  }();
  return table;
}

std::string describe(const GradcheckEntry& e) {
  std::ostringstream os;
  os.precision(6);
  os << e.name << "[" << e.index << "] analytic " << e.analytic << " numeric " << e.numeric;
  return os.str();
}

}  // namespace

std::vector<std::string> gradcheck_targets(GradScope scope) {
  std::vector<std::string> order = {
      "add", "sub", "mul", "mul_broadcast", "scale", "matmul", "affine", "relu", "sigmoid", "tanh", "exp", "sum",
      "mean", "max_reduce", "max_reduce_axis", "sum_axis", "reshape", "concat", "slice", "repeat_axis",
      "compute_keys", "compute_keys_scaled", "rasterize_max_2d", "rasterize_max_3d", "rasterize_sum_2d",
      "rasterize_sum_3d", "rasterize_mean_2d", "rasterize_mean_3d", "derasterize_2d", "derasterize_3d", "conv_2d",
      "conv_3d", "conv_1x1", "norm_batch", "norm_instance", "norm_adaptive", "max_pool_2d", "max_pool_3d",
      "avg_pool_global", "dense", "cross_entropy", "chamfer", "emd_exact", "cloud_transform_2d",
      "cloud_transform_3d", "cloud_transform_sum", "cloud_transform_mean", "cloud_transform_linear_keys",
      "cloud_transform_fixed_keys", "cloud_transform_instance", "cloud_transform_adaptive", "resblock", "mini_cnn",
      "mhct", "cmhct", "mh_cloud_pool", "segmenter", "classifier", "generator", "inpainter"};
  const auto& reg = registry();
  std::vector<std::string> out;
  for (const auto& name : order) {
    const std::string& s = reg.at(name).scope;
    if (scope == GradScope::all || (scope == GradScope::op && s == "op") ||
        (scope == GradScope::block && s == "block") || (scope == GradScope::model && s == "model")) {
      out.push_back(name);
    }
  }
  return out;
}

GradcheckRow run_gradcheck_target(const std::string& target, std::uint64_t seed, const GradcheckOptions& options) {
  const auto& reg = registry();
  auto it = reg.find(target);
  if (it == reg.end()) throw std::invalid_argument("unknown gradcheck target '" + target + "'");
  GradcheckOptions opts = options;
  if (opts.max_entries_per_tensor == 0) opts.max_entries_per_tensor = it->second.max_entries;
  opts.seed = seed;
  const ResampledResult res = gradcheck_resampled(it->second.build, seed, opts);
  GradcheckRow row;
  row.scope = it->second.scope;
  row.target = target;
  row.entries = res.result.entries;
  row.straddling = res.result.straddling;
  row.attempts = res.attempts;
  row.max_rel_error = res.result.max_rel_error;
  row.kink_margin = res.result.kink_margin;
  row.worst = describe(res.result.worst);
  row.passed = res.result.passed;
  return row;
}

std::vector<GradcheckRow> run_gradcheck(GradScope scope, std::uint64_t seed, const GradcheckOptions& options) {
  std::vector<GradcheckRow> rows;
  for (const auto& name : gradcheck_targets(scope)) rows.push_back(run_gradcheck_target(name, seed, options));
  return rows;
}

DepthReport run_depth_stability(const DepthOptions& o) {
  if (o.depth < 1) throw std::invalid_argument("depth-stability: depth must be >= 1");
  Rng rng(o.seed);
  HeadConfig hc;
  hc.dims = 2;
  hc.w = o.w;
  hc.channels = o.channels;
  std::vector<CloudTransformHead> chain;
  chain.reserve(o.depth);
  for (std::size_t l = 0; l < o.depth; ++l) chain.emplace_back(hc, o.g, nn::NormKind::batch, 0, o.balancing, rng);
  PointCloudBatch pc = random_cloud(o.batch, o.points, o.g, rng);
  pc.features.set_requires_grad(false);
  pc.positions.set_requires_grad(false);

  ForwardContext ctx{true, {}};
  Tensor x = pc.features;
  for (auto& head : chain) x = head.forward(pc.with_features(x), ctx);
  Tensor r = readout_for(x, rng);
  backward(project(x, r));

  DepthReport rep;
  for (std::size_t l = 0; l < o.depth; ++l) {
    const Tensor& k = chain[l].last_keys();
    double sq = 0.0;
    if (k.has_grad())
      for (double g : k.grad()) sq += g * g;
    rep.rows.push_back({l, std::sqrt(sq / static_cast<double>(k.numel())), 0.0});
  }
  rep.min_ratio = std::numeric_limits<double>::infinity();
  rep.max_ratio = 0.0;
  for (std::size_t l = 0; l + 1 < rep.rows.size(); ++l) {
    rep.rows[l].ratio = rep.rows[l].key_grad_rms / rep.rows[l + 1].key_grad_rms;
    rep.min_ratio = std::min(rep.min_ratio, rep.rows[l].ratio);
    rep.max_ratio = std::max(rep.max_ratio, rep.rows[l].ratio);
  }
  if (rep.rows.size() == 1) rep.min_ratio = rep.max_ratio = 1.0;
  rep.cumulative = rep.rows.front().key_grad_rms / rep.rows.back().key_grad_rms;
  return rep;
}

std::vector<AblationVariant> ablation_suite(const std::string& suite) {
  if (suite == "aggregation") {
    return {{"max", {{"model.aggregation", "max"}}},
            {"sum", {{"model.aggregation", "sum"}}},
            {"mean", {{"model.aggregation", "mean"}}}};
  }
  if (suite == "keys") {
    return {{"residual-se3", {{"model.key_mode", "residual-se3"}}},
            {"residual-se3+scales", {{"model.key_mode", "residual-se3"}, {"model.anisotropic_scale", "true"}}},
            {"linear", {{"model.key_mode", "linear"}}},
            {"fixed-random", {{"model.key_mode", "fixed-random"}}}};
  }
  if (suite == "heads") {
    return {{"multi-head", {}}, {"single-head", {{"model.heads_2d", "1"}, {"model.heads_3d", "1"}}}};
  }
  if (suite == "depth") {
    return {{"stages=2", {{"model.stages", "2"}}}, {"stages=1", {{"model.stages", "1"}}}};
  }
  throw std::invalid_argument("unknown ablation suite '" + suite + "' (expected aggregation, keys, heads, depth)");
}

std::vector<AblationRow> run_ablation(const std::string& suite, const TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds, const std::string& metric) {
  if (seeds.empty()) throw std::invalid_argument("ablation: no seeds");
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_suite(suite)) {
    AblationRow row;
    row.variant = v.name;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      for (const auto& [k, val] : v.overrides) cfg.apply(k, val);
      cfg.seed = seed;
      cfg.seed_set = true;
      cfg.out_dir = base.out_dir / (v.name + "_seed" + std::to_string(seed));
      const TrainResult res = run_training(cfg);
      auto it = res.metrics.find(metric);
      if (it == res.metrics.end()) throw std::invalid_argument("ablation: run did not report metric '" + metric + "'");
      row.per_seed.push_back(it->second);
    }
    double s = 0.0;
    for (double x : row.per_seed) s += x;
    row.mean = s / static_cast<double>(row.per_seed.size());
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) { return a.mean > b.mean; });
  return rows;
}

}  // namespace cloudtf::experiments
