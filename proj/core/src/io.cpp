#include "cloudtf/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cloudtf::io {

namespace {

template <typename T>
void put(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  static_assert(sizeof(T) == sizeof(U));
  const U bits = std::bit_cast<U>(value);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(bytes, sizeof(U));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw std::runtime_error("truncated file while reading " + what);
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

void expect_magic(std::istream& in, const char* magic, const std::filesystem::path& path) {
  char buf[4];
  if (!in.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
    throw std::runtime_error(path.string() + ": not a " + std::string(magic, 4) + " file");
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

constexpr std::uint32_t kVersion = 1;

}  // namespace

void write_point_cloud(const std::filesystem::path& path, const PointCloudFile& cloud) {
  if (cloud.rows.size() != static_cast<std::size_t>(cloud.n) * (3 + cloud.f)) {
    throw std::invalid_argument("write_point_cloud: row data does not match n and f");
  }
  if (!cloud.labels.empty() && cloud.labels.size() != cloud.n) {
    throw std::invalid_argument("write_point_cloud: label count does not match n");
  }
  auto out = open_out(path);
  out.write("CTPC", 4);
  put(out, kVersion);
  put(out, cloud.n);
  put(out, cloud.f);
  put(out, static_cast<std::uint32_t>(cloud.labels.empty() ? 0 : 1));
  for (double v : cloud.rows) put(out, v);
  for (std::int32_t l : cloud.labels) put(out, l);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

PointCloudFile read_point_cloud(const std::filesystem::path& path) {
  auto in = open_in(path);
  expect_magic(in, "CTPC", path);
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVersion) throw std::runtime_error(path.string() + ": unsupported CTPC version " + std::to_string(version));
  PointCloudFile cloud;
  cloud.n = get<std::uint32_t>(in, "n");
  cloud.f = get<std::uint32_t>(in, "f");
  const auto flags = get<std::uint32_t>(in, "flags");
  cloud.rows.resize(static_cast<std::size_t>(cloud.n) * (3 + cloud.f));
  for (double& v : cloud.rows) v = get<double>(in, "point rows");
  if (flags & 1u) {
    cloud.labels.resize(cloud.n);
    for (auto& l : cloud.labels) l = get<std::int32_t>(in, "labels");
  }
  return cloud;
}

void write_checkpoint(const std::filesystem::path& path, const std::string& config_text, const ParameterSet& params) {
  auto out = open_out(path);
  out.write("CTCK", 4);
  put(out, kVersion);
  put(out, static_cast<std::uint64_t>(config_text.size()));
  out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  put(out, static_cast<std::uint32_t>(params.items().size()));
  for (const auto& p : params.items()) {
    put(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) put(out, static_cast<std::uint64_t>(d));
    for (double v : p.tensor.data()) put(out, v);
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace {

std::string read_config_echo(std::istream& in, const std::filesystem::path& path) {
  expect_magic(in, "CTCK", path);
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVersion) throw std::runtime_error(path.string() + ": unsupported CTCK version " + std::to_string(version));
  const auto cfg_len = get<std::uint64_t>(in, "config length");
  std::string config(cfg_len, '\0');
  if (!in.read(config.data(), static_cast<std::streamsize>(cfg_len))) throw std::runtime_error("truncated config echo");
  return config;
}

}  // namespace

std::string read_checkpoint_config(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_config_echo(in, path);
}

std::string read_checkpoint(const std::filesystem::path& path, ParameterSet& params) {
  auto in = open_in(path);
  std::string config = read_config_echo(in, path);
  const auto count = get<std::uint32_t>(in, "tensor count");
  if (count != params.items().size()) {
    throw std::runtime_error(path.string() + ": checkpoint holds " + std::to_string(count) + " tensors, model has " +
                             std::to_string(params.items().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw std::runtime_error("truncated tensor name");
    const auto rank = get<std::uint32_t>(in, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(in, "dims"));
    const NamedTensor* target = params.find(name);
    if (!target) throw std::runtime_error(path.string() + ": unknown tensor '" + name + "'");
    if (target->tensor.shape() != shape) {
      throw std::runtime_error(path.string() + ": tensor '" + name + "' has shape " + shape_str(shape) +
                               ", model expects " + shape_str(target->tensor.shape()));
    }
    Tensor t = target->tensor;
    for (double& v : t.data()) v = get<double>(in, "tensor data");
  }
  return config;
}

std::uint64_t fnv1a64(const std::string& bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path)
    : out_(path, std::ios::binary | std::ios::trunc), hash_(0xcbf29ce484222325ull) {
  if (!out_) throw std::runtime_error("cannot write metrics file " + path.string());
}

MetricsWriter::~MetricsWriter() {
  if (!closed_) {
    try {
      close();
    } catch (...) {
    }
  }
}

void MetricsWriter::write(std::size_t iter, const std::string& split, const std::string& name, double value) {
  if (closed_) throw std::logic_error("MetricsWriter: write after close");
  nlohmann::ordered_json row;
  row["iter"] = iter;
  row["split"] = split;
  row["name"] = name;
  if (std::isfinite(value)) {
    row["value"] = value;
  } else {
    row["value"] = nullptr;
  }
  const std::string line = row.dump() + "\n";
  hash_ = fnv1a64(line, hash_);
  out_ << line;
  out_.flush();
  ++rows_;
}

void MetricsWriter::close() {
  if (closed_) return;
  nlohmann::ordered_json tail;
  std::ostringstream hex;
  hex << std::hex << hash_;
  tail["checksum"] = "fnv1a64:" + hex.str();
  tail["rows"] = rows_;
  out_ << tail.dump() << "\n";
  out_.close();
  closed_ = true;
}

MetricsCheck verify_metrics(const std::filesystem::path& path) {
  MetricsCheck check;
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    check.error = "cannot read " + path.string();
    return check;
  }
  std::uint64_t h = 0xcbf29ce484222325ull;
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.rfind("{\"checksum\"", 0) == 0) {
      try {
        const auto tail = nlohmann::json::parse(line);
        std::ostringstream hex;
        hex << std::hex << h;
        if (tail.at("checksum").get<std::string>() != "fnv1a64:" + hex.str()) {
          check.error = "checksum mismatch";
        } else if (tail.at("rows").get<std::size_t>() != rows) {
          check.error = "row count mismatch";
        } else if (std::getline(in, line)) {
          check.error = "data after checksum line";
        } else {
          check.complete = true;
        }
      } catch (const std::exception& e) {
        check.error = std::string("bad checksum line: ") + e.what();
      }
      check.rows = rows;
      return check;
    }
    h = fnv1a64(line + "\n", h);
    ++rows;
  }
  check.rows = rows;
  check.error = "missing checksum line (truncated file?)";
  return check;
}

}  // namespace cloudtf::io
