#include "cloudtf/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cloudtf::synth {

namespace {

constexpr double kPi = std::numbers::pi;

void rotate(std::vector<double>& pts, const std::vector<double>& r) {
  for (std::size_t i = 0; i < pts.size(); i += 3) {
    const double x = pts[i], y = pts[i + 1], z = pts[i + 2];
    pts[i] = x * r[0] + y * r[3] + z * r[6];
    pts[i + 1] = x * r[1] + y * r[4] + z * r[7];
    pts[i + 2] = x * r[2] + y * r[5] + z * r[8];
  }
}

void unit_normal(Rng& rng, double& x, double& y, double& z) {
  double r;
  do {
    x = normal(rng);
    y = normal(rng);
    z = normal(rng);
    r = std::sqrt(x * x + y * y + z * z);
  } while (r < 1e-12);
  x /= r;
  y /= r;
  z /= r;
}

}  // namespace

int two_surface_rule(double x, double z, double phase, const TwoSurfaceParams& p) {
  return z > p.amplitude * std::sin(p.frequency * x + phase) ? 1 : 0;
}

Sample two_surface(const TwoSurfaceParams& p, Rng& rng) {
  if (p.points < 1) throw std::invalid_argument("two_surface: points must be >= 1");
  if (p.noise < 0.0 || p.separation <= 0.0) throw std::invalid_argument("two_surface: bad noise or separation");
  Sample s;
  s.feature_dim = 6;
  s.positions.resize(p.points * 3);
  s.features.resize(p.points * 6);
  s.labels.resize(p.points);
  const double phase = uniform(rng, 0.0, 2.0 * kPi);
  for (std::size_t i = 0; i < p.points; ++i) {
    const int label = uniform(rng, 0.0, 1.0) < 0.5 ? 0 : 1;
    const double x = uniform(rng, -1.0, 1.0);
    const double y = uniform(rng, -1.0, 1.0);
    const double base = p.amplitude * std::sin(p.frequency * x + phase);
    const double z = base + (label == 1 ? 0.5 : -0.5) * p.separation + p.noise * normal(rng);
    const double gray = uniform(rng, 0.2, 0.8);
    s.positions[3 * i] = x;
    s.positions[3 * i + 1] = y;
    s.positions[3 * i + 2] = z;
    double* f = s.features.data() + 6 * i;
    f[0] = x;
    f[1] = y;
    f[2] = z;
    f[3] = f[4] = f[5] = gray;
    s.labels[i] = label;
  }
  return s;
}

std::string to_string(Primitive p) {
  switch (p) {
    case Primitive::sphere: return "sphere";
    case Primitive::cube: return "cube";
    case Primitive::torus: return "torus";
  }
  return "?";
}

std::vector<double> primitive_surface(Primitive kind, std::size_t n, Rng& rng) {
  std::vector<double> pts(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0.0, y = 0.0, z = 0.0;
    switch (kind) {
      case Primitive::sphere:
        unit_normal(rng, x, y, z);
        break;
      case Primitive::cube: {
        // Uniform over the six faces of [-1, 1]^3 scaled to match the sphere.
        const auto face = static_cast<int>(uniform(rng, 0.0, 6.0));
        const double a = uniform(rng, -1.0, 1.0), b = uniform(rng, -1.0, 1.0);
        const double s = (face % 2 == 0) ? 1.0 : -1.0;
        const double k = 0.8;
        if (face / 2 == 0) {
          x = s * k, y = a * k, z = b * k;
        } else if (face / 2 == 1) {
          x = a * k, y = s * k, z = b * k;
        } else {
          x = a * k, y = b * k, z = s * k;
        }
        break;
      }
      case Primitive::torus: {
        // Area-weighted sampling of a torus with radii R = 0.7, r = 0.3.
        const double big = 0.7, small = 0.3;
        double u, v;
        do {
          u = uniform(rng, 0.0, 2.0 * kPi);
          v = uniform(rng, 0.0, 2.0 * kPi);
        } while (uniform(rng, 0.0, big + small) > big + small * std::cos(v));
        x = (big + small * std::cos(v)) * std::cos(u);
        y = (big + small * std::cos(v)) * std::sin(u);
        z = small * std::sin(v);
        break;
      }
    }
    pts[3 * i] = x;
    pts[3 * i + 1] = y;
    pts[3 * i + 2] = z;
  }
  return pts;
}

Sample primitive_cloud(const PrimitiveParams& p, Rng& rng) {
  if (p.points < 2) throw std::invalid_argument("primitive_cloud: points must be >= 2");
  if (p.clutter < 0.0 || p.clutter >= 1.0) throw std::invalid_argument("primitive_cloud: clutter must be in [0, 1)");
  if (p.classes < 1 || p.classes > 3) throw std::invalid_argument("primitive_cloud: classes must be in [1, 3]");
  Sample s;
  s.feature_dim = 3;
  s.class_label = static_cast<int>(uniform(rng, 0.0, static_cast<double>(p.classes)));
  s.class_label = std::min(s.class_label, p.classes - 1);
  const auto n_bg = static_cast<std::size_t>(std::round(p.clutter * static_cast<double>(p.points)));
  const std::size_t n_fg = p.points - n_bg;
  std::vector<double> fg = primitive_surface(static_cast<Primitive>(s.class_label), n_fg, rng);
  rotate(fg, random_rotation(rng));
  const double scale = uniform(rng, 0.55, 0.8);
  for (double& v : fg) v = v * scale + p.noise * normal(rng);
  s.positions.resize(p.points * 3);
  s.fg_mask.assign(p.points, 0);
  // Foreground and clutter points are interleaved in a random order.
  std::vector<int> is_fg(p.points, 0);
  std::fill_n(is_fg.begin(), n_fg, 1);
  std::shuffle(is_fg.begin(), is_fg.end(), rng);
  std::size_t next_fg = 0;
  for (std::size_t i = 0; i < p.points; ++i) {
    if (is_fg[i]) {
      std::copy_n(fg.begin() + static_cast<std::ptrdiff_t>(3 * next_fg), 3, s.positions.begin() + static_cast<std::ptrdiff_t>(3 * i));
      ++next_fg;
      s.fg_mask[i] = 1;
    } else {
      for (int d = 0; d < 3; ++d) s.positions[3 * i + d] = uniform(rng, -1.0, 1.0);
    }
  }
  s.features = s.positions;
  return s;
}

std::vector<double> target_shape(const std::string& name, std::size_t n, Rng& rng) {
  std::vector<double> pts;
  if (name == "cube") {
    pts = primitive_surface(Primitive::cube, n, rng);
    for (double& v : pts) v *= 0.7 / 0.8;
  } else if (name == "sphere") {
    pts = primitive_surface(Primitive::sphere, n, rng);
    for (double& v : pts) v *= 0.7;
  } else if (name == "torus") {
    pts = primitive_surface(Primitive::torus, n, rng);
  } else {
    throw std::invalid_argument("unknown target shape '" + name + "' (expected cube, sphere, torus)");
  }
  return pts;
}

CompletionPair cutaway(const std::string& shape, std::size_t complete_points, std::size_t partial_points, double cut,
                       Rng& rng) {
  if (partial_points < 1 || partial_points >= complete_points) {
    throw std::invalid_argument("cutaway: need 1 <= partial_points < complete_points");
  }
  CompletionPair pair;
  pair.complete = target_shape(shape, complete_points, rng);
  // Draw kept-region points until the partial cloud is full.
  for (std::size_t guard = 0; pair.partial.size() < partial_points * 3; ++guard) {
    if (guard > 1000) throw std::runtime_error("cutaway: cut leaves too few points");
    const std::vector<double> extra = target_shape(shape, complete_points, rng);
    for (std::size_t i = 0; i < extra.size() && pair.partial.size() < partial_points * 3; i += 3) {
      if (extra[i] <= cut) pair.partial.insert(pair.partial.end(), extra.begin() + static_cast<std::ptrdiff_t>(i),
                                               extra.begin() + static_cast<std::ptrdiff_t>(i + 3));
    }
  }
  return pair;
}

PointCloudBatch stack(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("stack: no samples");
  const std::size_t n = samples[0].points(), f = samples[0].feature_dim;
  std::vector<double> pos, feat;
  PointCloudBatch pc;
  for (const auto& s : samples) {
    if (s.points() != n || s.feature_dim != f) throw std::invalid_argument("stack: samples differ in size");
    pos.insert(pos.end(), s.positions.begin(), s.positions.end());
    feat.insert(feat.end(), s.features.begin(), s.features.end());
    pc.labels.insert(pc.labels.end(), s.labels.begin(), s.labels.end());
    pc.fg_mask.insert(pc.fg_mask.end(), s.fg_mask.begin(), s.fg_mask.end());
  }
  pc.positions = Tensor({samples.size(), n, 3}, std::move(pos));
  pc.features = Tensor({samples.size(), n, f}, std::move(feat));
  pc.validate();
  return pc;
}

Tensor stack_points(const std::vector<std::vector<double>>& clouds) {
  if (clouds.empty()) throw std::invalid_argument("stack_points: no clouds");
  const std::size_t n = clouds[0].size() / 3;
  std::vector<double> all;
  for (const auto& c : clouds) {
    if (c.size() != n * 3) throw std::invalid_argument("stack_points: clouds differ in size");
    all.insert(all.end(), c.begin(), c.end());
  }
  return Tensor({clouds.size(), n, 3}, std::move(all));
}

}  // namespace cloudtf::synth
