#include "cloudtf/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace cloudtf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config: " + key + " expects an unsigned integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config: " + key + " expects true/false, got '" + v + "'");
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define SIZE_FIELD(name, member)                                                            \
  Field {                                                                                   \
    name, [](TrainConfig& c, const std::string& v) { c.member = to_size(name, v); },        \
        [](const TrainConfig& c) { return std::to_string(c.member); }                       \
  }
#define DOUBLE_FIELD(name, member)                                                          \
  Field {                                                                                   \
    name, [](TrainConfig& c, const std::string& v) { c.member = to_double(name, v); },      \
        [](const TrainConfig& c) { return fmt_double(c.member); }                           \
  }
#define BOOL_FIELD(name, member)                                                            \
  Field {                                                                                   \
    name, [](TrainConfig& c, const std::string& v) { c.member = to_bool(name, v); },        \
        [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }       \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"task", [](TrainConfig& c, const std::string& v) { c.task = parse_task(v); c.model.task = c.task; },
            [](const TrainConfig& c) { return to_string(c.task); }},
      Field{"seed",
            [](TrainConfig& c, const std::string& v) {
              c.seed = to_u64("seed", v);
              c.seed_set = true;
            },
            [](const TrainConfig& c) { return std::to_string(c.seed); }},
      Field{"out_dir", [](TrainConfig& c, const std::string& v) { c.out_dir = v; },
            [](const TrainConfig& c) { return c.out_dir.string(); }},
      SIZE_FIELD("train.iterations", iterations),
      SIZE_FIELD("train.batch_size", batch_size),
      SIZE_FIELD("train.eval_interval", eval_interval),
      SIZE_FIELD("train.log_interval", log_interval),
      SIZE_FIELD("train.finetune_start", finetune_start),
      BOOL_FIELD("train.fixed_sphere", fixed_sphere),
      DOUBLE_FIELD("optim.lr", optim.lr),
      DOUBLE_FIELD("optim.beta1", optim.beta1),
      DOUBLE_FIELD("optim.beta2", optim.beta2),
      DOUBLE_FIELD("optim.eps", optim.eps),
      DOUBLE_FIELD("optim.decay_factor", optim.decay_factor),
      SIZE_FIELD("optim.decay_interval", optim.decay_interval),
      SIZE_FIELD("model.g", model.g),
      SIZE_FIELD("model.stages", model.n_stages),
      SIZE_FIELD("model.heads_2d", model.layout.heads_2d),
      SIZE_FIELD("model.heads_3d", model.layout.heads_3d),
      SIZE_FIELD("model.w2d", model.layout.w2d),
      SIZE_FIELD("model.w3d", model.layout.w3d),
      SIZE_FIELD("model.c2d", model.layout.c2d),
      SIZE_FIELD("model.c3d", model.layout.c3d),
      Field{"model.key_mode", [](TrainConfig& c, const std::string& v) { c.model.layout.key_mode = parse_key_mode(v); },
            [](const TrainConfig& c) { return to_string(c.model.layout.key_mode); }},
      Field{"model.aggregation",
            [](TrainConfig& c, const std::string& v) { c.model.layout.aggregation = raster::parse_aggregation(v); },
            [](const TrainConfig& c) { return raster::to_string(c.model.layout.aggregation); }},
      BOOL_FIELD("model.anisotropic_scale", model.layout.anisotropic_scale),
      Field{"model.gradient_balancing",
            [](TrainConfig& c, const std::string& v) {
              c.model.gradient_balancing = to_bool("model.gradient_balancing", v);
              c.model.pool.gradient_balancing = c.model.gradient_balancing;
            },
            [](const TrainConfig& c) { return std::string(c.model.gradient_balancing ? "true" : "false"); }},
      Field{"model.classes",
            [](TrainConfig& c, const std::string& v) { c.model.classes = static_cast<int>(to_size("model.classes", v)); },
            [](const TrainConfig& c) { return std::to_string(c.model.classes); }},
      SIZE_FIELD("model.mlp_hidden", model.mlp_hidden),
      SIZE_FIELD("model.style_dim", model.style_dim),
      SIZE_FIELD("model.out_points", model.out_points),
      SIZE_FIELD("pool.heads_2d", model.pool.heads_2d),
      SIZE_FIELD("pool.heads_3d", model.pool.heads_3d),
      SIZE_FIELD("pool.w2d", model.pool.w2d),
      SIZE_FIELD("pool.w3d", model.pool.w3d),
      SIZE_FIELD("pool.c2d", model.pool.c2d),
      SIZE_FIELD("pool.c3d", model.pool.c3d),
      SIZE_FIELD("pool.out_dim", model.pool.out_dim),
      SIZE_FIELD("data.points", data.points),
      DOUBLE_FIELD("data.noise", data.noise),
      SIZE_FIELD("data.train_size", data.train_size),
      SIZE_FIELD("data.test_size", data.test_size),
      DOUBLE_FIELD("data.clutter", data.clutter),
      Field{"data.shapes", [](TrainConfig& c, const std::string& v) { c.data.shapes = split_list(v); },
            [](const TrainConfig& c) {
              std::string s;
              for (const auto& x : c.data.shapes) s += (s.empty() ? "" : ",") + x;
              return s;
            }},
      SIZE_FIELD("data.partial_points", data.partial_points),
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty key");
    cfg.set(key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) { entries_.emplace_back(key, value); }

void KeyValueConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

TrainConfig TrainConfig::defaults(Task task) {
  TrainConfig c;
  c.task = task;
  c.model.task = task;
  switch (task) {
    case Task::segment:
      c.model.in_features = 6;
      c.model.classes = 2;
      c.iterations = 400;
      break;
    case Task::classify:
      c.model.in_features = 3;
      c.model.classes = 3;
      // 64 clouds overfit within a few hundred steps; the larger pool keeps
      // the class head honest on held-out clutter.
      c.data.train_size = 2048;
      c.data.test_size = 128;
      c.iterations = 1500;
      c.eval_interval = 500;
      break;
    case Task::generate:
      c.model.in_features = 3;
      c.model.out_points = 128;
      c.data.points = 128;
      c.batch_size = 2;
      c.iterations = 800;
      c.optim.lr = 1e-3;
      break;
    case Task::inpaint:
      c.model.in_features = 3;
      c.model.out_points = 128;
      c.data.points = 128;
      c.data.partial_points = 64;
      c.batch_size = 2;
      c.iterations = 400;
      break;
  }
  return c;
}

void TrainConfig::apply(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

void TrainConfig::apply(const KeyValueConfig& kv) {
  for (const auto& [k, v] : kv.entries()) apply(k, v);
}

void TrainConfig::validate() const {
  if (!(optim.lr > 0.0)) throw std::invalid_argument("config: optim.lr must be > 0");
  if (iterations < 1) throw std::invalid_argument("config: train.iterations must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: train.batch_size must be >= 1");
  if (optim.decay_interval < 1) throw std::invalid_argument("config: optim.decay_interval must be >= 1");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw std::invalid_argument("config: Adam betas must lie in [0, 1)");
  }
  if (data.points < 1) throw std::invalid_argument("config: data.points must be >= 1");
  if (data.train_size < 1 || data.test_size < 1) throw std::invalid_argument("config: data sizes must be >= 1");
  if (model.task != task) throw std::invalid_argument("config: model task does not match task");
  model.validate();
  if (task == Task::inpaint && data.partial_points >= model.out_points) {
    throw std::invalid_argument("config: data.partial_points must be smaller than model.out_points");
  }
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

std::vector<std::string> TrainConfig::known_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.emplace_back(f.key);
  return keys;
}

}  // namespace cloudtf
