#include "cloudtf/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <sstream>

#include "cloudtf/io.hpp"
#include "cloudtf/losses.hpp"
#include "cloudtf/ops.hpp"
#include "cloudtf/optim.hpp"
#include "cloudtf/synthetic.hpp"

namespace cloudtf {

namespace {

using Metrics = std::map<std::string, double>;

// Independent streams so that data, model init and sphere noise do not shift
// when one of them changes its consumption.
Rng stream(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  return Rng(seq);
}

class Runner {
 public:
  virtual ~Runner() = default;
  virtual ParameterSet parameters() const = 0;
  /// Forward pass of one training batch; returns the scalar loss and may add
  /// per-batch training metrics.
  virtual Tensor train_loss(std::size_t iter, Metrics& batch_metrics) = 0;
  virtual Metrics evaluate() = 0;
};

// Cycles over a fixed training pool in a reshuffled order every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t pool, std::size_t batch, Rng rng) : pool_(pool), batch_(batch), rng_(rng) {}
  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        order_.resize(pool_);
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t pool_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

template <typename T>
std::vector<T> pick(const std::vector<T>& pool, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  for (auto i : idx) out.push_back(pool[i]);
  return out;
}

class SegmentRunner : public Runner {
 public:
  explicit SegmentRunner(const TrainConfig& cfg)
      : cfg_(cfg), init_rng_(stream(cfg.seed, 1)), model_(cfg.model, init_rng_),
        sampler_(cfg.data.train_size, cfg.batch_size, stream(cfg.seed, 3)) {
    synth::TwoSurfaceParams p;
    p.points = cfg.data.points;
    p.noise = cfg.data.noise;
    Rng data = stream(cfg.seed, 2);
    for (std::size_t i = 0; i < cfg.data.train_size; ++i) train_.push_back(synth::two_surface(p, data));
    for (std::size_t i = 0; i < cfg.data.test_size; ++i) test_.push_back(synth::two_surface(p, data));
  }

  ParameterSet parameters() const override { return model_.parameters(); }

  Tensor train_loss(std::size_t, Metrics& m) override {
    PointCloudBatch pc = synth::stack(pick(train_, sampler_.next()));
    Tensor logits = model_.forward(pc, {true, {}});
    m["accuracy"] = accuracy(argmax_labels(logits), pc.labels);
    return cross_entropy(logits, pc.labels);
  }

  Metrics evaluate() override {
    NoGradGuard guard;
    std::vector<int> pred, truth;
    for (std::size_t i = 0; i < test_.size(); i += cfg_.batch_size) {
      std::vector<synth::Sample> chunk(test_.begin() + static_cast<std::ptrdiff_t>(i),
                                       test_.begin() + static_cast<std::ptrdiff_t>(std::min(test_.size(), i + cfg_.batch_size)));
      PointCloudBatch pc = synth::stack(chunk);
      auto p = argmax_labels(model_.forward(pc, {false, {}}));
      pred.insert(pred.end(), p.begin(), p.end());
      truth.insert(truth.end(), pc.labels.begin(), pc.labels.end());
    }
    return {{"accuracy", accuracy(pred, truth)}, {"miou", miou(pred, truth, cfg_.model.classes)}};
  }

 private:
  TrainConfig cfg_;
  Rng init_rng_;
  Segmenter model_;
  BatchSampler sampler_;
  std::vector<synth::Sample> train_, test_;
};

class ClassifyRunner : public Runner {
 public:
  explicit ClassifyRunner(const TrainConfig& cfg)
      : cfg_(cfg), init_rng_(stream(cfg.seed, 1)), model_(cfg.model, init_rng_),
        sampler_(cfg.data.train_size, cfg.batch_size, stream(cfg.seed, 3)) {
    synth::PrimitiveParams p;
    p.points = cfg.data.points;
    p.noise = cfg.data.noise;
    p.clutter = cfg.data.clutter;
    p.classes = cfg.model.classes;
    Rng data = stream(cfg.seed, 2);
    for (std::size_t i = 0; i < cfg.data.train_size; ++i) train_.push_back(synth::primitive_cloud(p, data));
    for (std::size_t i = 0; i < cfg.data.test_size; ++i) test_.push_back(synth::primitive_cloud(p, data));
  }

  ParameterSet parameters() const override { return model_.parameters(); }

  Tensor train_loss(std::size_t, Metrics& m) override {
    auto batch = pick(train_, sampler_.next());
    PointCloudBatch pc = synth::stack(batch);
    std::vector<int> cls;
    for (const auto& s : batch) cls.push_back(s.class_label);
    ClassifierOutput out = model_.forward(pc, {true, {}});
    m["class_accuracy"] = accuracy(argmax_labels(out.class_logits), cls);
    m["mask_accuracy"] = accuracy(argmax_labels(out.fg_logits), pc.fg_mask);
    return model_.loss(out, cls, pc.fg_mask);
  }

  Metrics evaluate() override {
    NoGradGuard guard;
    std::vector<int> pred, truth, mpred, mtruth;
    for (std::size_t i = 0; i < test_.size(); i += cfg_.batch_size) {
      std::vector<synth::Sample> chunk(test_.begin() + static_cast<std::ptrdiff_t>(i),
                                       test_.begin() + static_cast<std::ptrdiff_t>(std::min(test_.size(), i + cfg_.batch_size)));
      PointCloudBatch pc = synth::stack(chunk);
      ClassifierOutput out = model_.forward(pc, {false, {}});
      auto p = argmax_labels(out.class_logits);
      pred.insert(pred.end(), p.begin(), p.end());
      for (const auto& s : chunk) truth.push_back(s.class_label);
      auto mp = argmax_labels(out.fg_logits);
      mpred.insert(mpred.end(), mp.begin(), mp.end());
      mtruth.insert(mtruth.end(), pc.fg_mask.begin(), pc.fg_mask.end());
    }
    return {{"class_accuracy", accuracy(pred, truth)},
            {"mean_class_accuracy", mean_class_accuracy(pred, truth, cfg_.model.classes)},
            {"mask_accuracy", accuracy(mpred, mtruth)}};
  }

 private:
  TrainConfig cfg_;
  Rng init_rng_;
  Classifier model_;
  BatchSampler sampler_;
  std::vector<synth::Sample> train_, test_;
};

/// Fixed style vector per target shape, shared by training and evaluation.
Tensor style_vectors(std::size_t count, std::size_t dim, std::uint64_t seed) {
  Rng rng = stream(seed, 4);
  std::vector<double> v(count * dim);
  for (double& x : v) x = normal(rng);
  return Tensor({count, dim}, std::move(v));
}

class GenerateRunner : public Runner {
 public:
  explicit GenerateRunner(const TrainConfig& cfg)
      : cfg_(cfg), init_rng_(stream(cfg.seed, 1)), model_(cfg.model, init_rng_), noise_(stream(cfg.seed, 5)) {
    if (cfg.data.shapes.empty()) throw std::invalid_argument("generate: data.shapes is empty");
    Rng data = stream(cfg.seed, 2);
    std::vector<std::vector<double>> targets;
    for (const auto& s : cfg.data.shapes) targets.push_back(synth::target_shape(s, cfg.model.out_points, data));
    targets_ = synth::stack_points(targets);
    styles_ = style_vectors(cfg.data.shapes.size(), cfg.model.style_dim, cfg.seed);
    Rng sphere = stream(cfg.seed, 6);
    sphere_ = sample_sphere(cfg.data.shapes.size(), cfg.model.out_points, sphere);
  }

  ParameterSet parameters() const override { return model_.parameters(); }

  Tensor train_loss(std::size_t, Metrics& m) override {
    Tensor input = cfg_.fixed_sphere ? sphere_ : sample_sphere(targets_.size(0), cfg_.model.out_points, noise_);
    Tensor out = model_.forward_from(input, {}, styles_, true);
    Tensor emd = emd_exact(out, targets_);
    Tensor ch = chamfer(out, targets_);
    m["emd"] = emd.item();
    m["chamfer"] = ch.item();
    return add(emd, ch);
  }

  Metrics evaluate() override {
    NoGradGuard guard;
    Tensor out = model_.forward_from(sphere_, {}, styles_, false);
    Metrics m;
    double max_abs = 0.0;
    for (double v : out.data()) max_abs = std::max(max_abs, std::abs(v));
    m["max_abs_coord"] = max_abs;
    const std::size_t n = cfg_.model.out_points;
    for (std::size_t s = 0; s < cfg_.data.shapes.size(); ++s) {
      Tensor a = slice(out, 0, s, s + 1);
      Tensor b = slice(targets_, 0, s, s + 1);
      const std::string& name = cfg_.data.shapes[s];
      m["emd_" + name] = emd_exact(a, b).item();
      m["chamfer_" + name] = chamfer(a, b).item();
      m["fscore_" + name] = fscore(reshape(a, {n, 3}), reshape(b, {n, 3}));
    }
    return m;
  }

 private:
  TrainConfig cfg_;
  Rng init_rng_;
  Generator model_;
  Rng noise_;
  Tensor targets_, styles_, sphere_;
};

class InpaintRunner : public Runner {
 public:
  explicit InpaintRunner(const TrainConfig& cfg)
      : cfg_(cfg), init_rng_(stream(cfg.seed, 1)), model_(cfg.model, init_rng_), noise_(stream(cfg.seed, 5)),
        sampler_(cfg.data.train_size, cfg.batch_size, stream(cfg.seed, 3)) {
    if (cfg.data.shapes.empty()) throw std::invalid_argument("inpaint: data.shapes is empty");
    Rng data = stream(cfg.seed, 2);
    auto make = [&](std::size_t i) {
      const std::string& shape = cfg.data.shapes[i % cfg.data.shapes.size()];
      return synth::cutaway(shape, cfg.model.out_points, cfg.data.partial_points, 0.5, data);
    };
    for (std::size_t i = 0; i < cfg.data.train_size; ++i) train_.push_back(make(i));
    for (std::size_t i = 0; i < cfg.data.test_size; ++i) test_.push_back(make(i));
  }

  ParameterSet parameters() const override { return model_.parameters(); }

  Tensor train_loss(std::size_t iter, Metrics& m) override {
    auto batch = pick(train_, sampler_.next());
    auto [partial, complete] = tensors(batch);
    Tensor out = model_.forward(partial, cfg_.model.out_points, noise_, true);
    Tensor ch = chamfer(out, complete);
    m["chamfer"] = ch.item();
    if (cfg_.finetune_start > 0 && iter >= cfg_.finetune_start) return ch;
    Tensor emd = emd_exact(out, complete);
    m["emd"] = emd.item();
    return add(emd, ch);
  }

  Metrics evaluate() override {
    NoGradGuard guard;
    Metrics m;
    auto eval_split = [&](const std::vector<synth::CompletionPair>& items, const std::string& prefix) {
      Rng noise = stream(cfg_.seed, 7);
      double ch = 0.0, emd = 0.0, fs = 0.0;
      for (const auto& item : items) {
        auto [partial, complete] = tensors({item});
        Tensor out = model_.forward(partial, cfg_.model.out_points, noise, false);
        ch += chamfer(out, complete).item();
        emd += emd_exact(out, complete).item();
        fs += fscore(reshape(out, {cfg_.model.out_points, 3}), reshape(complete, {cfg_.model.out_points, 3}));
      }
      const double k = static_cast<double>(items.size());
      m[prefix + "chamfer"] = ch / k;
      m[prefix + "emd"] = emd / k;
      m[prefix + "fscore"] = fs / k;
    };
    eval_split(train_, "train_item_");
    eval_split(test_, "");
    return m;
  }

 private:
  std::pair<PointCloudBatch, Tensor> tensors(const std::vector<synth::CompletionPair>& items) const {
    std::vector<std::vector<double>> partial, complete;
    for (const auto& it : items) {
      partial.push_back(it.partial);
      complete.push_back(it.complete);
    }
    PointCloudBatch pc;
    pc.positions = synth::stack_points(partial);
    pc.features = pc.positions;
    return {pc, synth::stack_points(complete)};
  }

  TrainConfig cfg_;
  Rng init_rng_;
  Inpainter model_;
  Rng noise_;
  BatchSampler sampler_;
  std::vector<synth::CompletionPair> train_, test_;
};

std::unique_ptr<Runner> make_runner(const TrainConfig& cfg) {
  switch (cfg.task) {
    case Task::segment: return std::make_unique<SegmentRunner>(cfg);
    case Task::classify: return std::make_unique<ClassifyRunner>(cfg);
    case Task::generate: return std::make_unique<GenerateRunner>(cfg);
    case Task::inpaint: return std::make_unique<InpaintRunner>(cfg);
  }
  throw std::logic_error("make_runner: bad task");
}

std::filesystem::path dump_grad_norms(const std::filesystem::path& dir, std::size_t iter, double loss,
                                      const ParameterSet& params) {
  const auto path = dir / "nan_dump.txt";
  std::ofstream out(path);
  out << "iteration " << iter << " loss " << loss << "\n";
  out << std::setprecision(9);
  for (const auto& p : params.items()) {
    if (!p.trainable) continue;
    double sq = 0.0;
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
    out << p.name << " " << std::sqrt(sq) << "\n";
  }
  return path;
}

}  // namespace

TrainResult run_training(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.out_dir.empty()) throw std::invalid_argument("run_training: out_dir is required");
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream echo(cfg.out_dir / "config.txt");
    echo << cfg.to_text();
  }

  auto runner = make_runner(cfg);
  ParameterSet params = runner->parameters();
  Adam adam(params, {cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps});
  io::MetricsWriter metrics(cfg.out_dir / "metrics.jsonl");

  TrainResult result;
  result.out_dir = cfg.out_dir;
  auto log_eval = [&](std::size_t iter) {
    Metrics m = runner->evaluate();
    for (const auto& [name, value] : m) {
      metrics.write(iter, "test", name, value);
      result.metrics["test/" + name] = value;
    }
  };

  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    const double lr = step_decay_lr(cfg.optim.lr, cfg.optim.decay_factor, cfg.optim.decay_interval, iter);
    adam.zero_grad();
    Metrics batch;
    Tensor loss = runner->train_loss(iter, batch);
    const double value = loss.item();
    if (std::isfinite(value)) backward(loss);
    else Tape::active().clear();
    bool finite = std::isfinite(value);
    for (const auto& p : params.items()) {
      if (!finite) break;
      if (!p.trainable || !p.tensor.has_grad()) continue;
      for (double g : p.tensor.grad()) {
        if (!std::isfinite(g)) {
          finite = false;
          break;
        }
      }
    }
    if (!finite) {
      metrics.write(iter, "train", "loss", value);
      metrics.close();
      const auto dump = dump_grad_norms(cfg.out_dir, iter, value, params);
      throw TrainingDiverged("non-finite loss or gradient at iteration " + std::to_string(iter) +
                                 "; gradient norms written to " + dump.string(),
                             dump);
    }
    adam.step(lr);
    result.final_loss = value;
    if (iter % cfg.log_interval == 0 || iter + 1 == cfg.iterations) {
      metrics.write(iter, "train", "loss", value);
      metrics.write(iter, "train", "lr", lr);
      for (const auto& [name, v] : batch) metrics.write(iter, "train", name, v);
    }
    if (cfg.eval_interval > 0 && (iter + 1) % cfg.eval_interval == 0 && iter + 1 != cfg.iterations) log_eval(iter + 1);
  }
  log_eval(cfg.iterations);
  metrics.close();
  io::write_checkpoint(cfg.out_dir / "checkpoint.ctck", cfg.to_text(), params);
  result.iterations = cfg.iterations;
  return result;
}

std::map<std::string, double> run_evaluation(const TrainConfig& cfg, const std::filesystem::path& checkpoint) {
  cfg.validate();
  auto runner = make_runner(cfg);
  ParameterSet params = runner->parameters();
  io::read_checkpoint(checkpoint, params);
  return runner->evaluate();
}

}  // namespace cloudtf
