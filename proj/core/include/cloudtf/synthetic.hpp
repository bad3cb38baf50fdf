#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cloudtf/raster.hpp"

namespace cloudtf::synth {

/// One labelled cloud in plain arrays (n points).
struct Sample {
  std::vector<double> positions;  // n * 3
  std::vector<double> features;   // n * f
  std::size_t feature_dim = 0;
  std::vector<int> labels;        // per point (segmentation) or empty
  std::vector<int> fg_mask;       // per point (classification) or empty
  int class_label = -1;           // per cloud (classification)
  std::size_t points() const { return positions.size() / 3; }
};

/// Two interleaved noisy sheets z = A sin(omega x + phi) +- d/2 over
/// [-1, 1]^2 with a random phase per cloud; label 1 for the upper sheet.
/// Features are xyz plus an uninformative gray color triple.
struct TwoSurfaceParams {
  std::size_t points = 256;
  double noise = 0.01;
  double amplitude = 0.3;
  double frequency = 3.0;
  double separation = 0.4;
};
Sample two_surface(const TwoSurfaceParams& p, Rng& rng);
/// Label implied by the generating rule for a noiseless point.
int two_surface_rule(double x, double z, double phase, const TwoSurfaceParams& p);

enum class Primitive { sphere = 0, cube = 1, torus = 2 };
std::string to_string(Primitive p);

/// Surface points of a primitive (unit-ish extent, centered at the origin).
std::vector<double> primitive_surface(Primitive kind, std::size_t n, Rng& rng);

/// One primitive, randomly rotated and scaled, plus uniform clutter in the
/// [-1, 1]^3 box with fg_mask = 0. Features are xyz.
struct PrimitiveParams {
  std::size_t points = 256;
  double clutter = 0.25;
  double noise = 0.01;
  int classes = 3;
};
Sample primitive_cloud(const PrimitiveParams& p, Rng& rng);

/// Target shapes for generation, scaled into [-0.7, 0.7]^3.
std::vector<double> target_shape(const std::string& name, std::size_t n, Rng& rng);

/// Completion pair: full shape surface and the points left after removing the
/// half-space x > cut (first `partial_points` of them).
struct CompletionPair {
  std::vector<double> partial;   // partial_points * 3
  std::vector<double> complete;  // complete_points * 3
};
CompletionPair cutaway(const std::string& shape, std::size_t complete_points, std::size_t partial_points,
                       double cut, Rng& rng);

/// Stacks samples (equal point counts) into a batch.
PointCloudBatch stack(const std::vector<Sample>& samples);
Tensor stack_points(const std::vector<std::vector<double>>& clouds);

}  // namespace cloudtf::synth
