#pragma once

#include <string>
#include <vector>

#include "cloudtf/tensor.hpp"

namespace cloudtf {

/// Mean of -log softmax(logits)[label] over all rows of logits [..., K] whose
/// label differs from ignore_index.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, int ignore_index = -1);

/// Chamfer distance between clouds a [B, n, 3] and b [B, m, 3] (or unbatched
/// [n, 3] / [m, 3]): mean over a of the squared distance to the nearest point
/// of b plus the same with roles swapped, averaged over the batch.
Tensor chamfer(const Tensor& a, const Tensor& b);

/// Exact earth mover distance: mean L2 distance under the optimal perfect
/// matching (equal sizes, n <= 512), averaged over the batch. The gradient
/// holds the matching fixed.
Tensor emd_exact(const Tensor& a, const Tensor& b);

/// Optimal assignment for a square cost matrix (row-major n x n). Returns for
/// each row the matched column.
std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n);

/// F-score of point sets a [n, 3] and b [m, 3] at distance threshold tau.
double fscore_at(const Tensor& a, const Tensor& b, double tau);
/// F-score with tau = 0.01 * bounding-box diagonal of the ground truth `truth`.
double fscore(const Tensor& pred, const Tensor& truth);
double bbox_diagonal(const Tensor& points);

/// Per-row argmax of logits [..., K].
std::vector<int> argmax_labels(const Tensor& logits);

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth);
double mean_class_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, int classes);
/// Mean over classes present in pred or truth of TP / (TP + FP + FN).
double miou(const std::vector<int>& pred, const std::vector<int>& truth, int classes);

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::size_t support = 0;
};

}  // namespace cloudtf
