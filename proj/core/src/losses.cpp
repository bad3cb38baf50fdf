#include "cloudtf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace cloudtf {

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, int ignore_index) {
  if (logits.rank() < 1) throw std::invalid_argument("cross_entropy: logits must have a class axis");
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  if (labels.size() != rows) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(rows) + " rows of " + shape_str(logits.shape()));
  }
  auto x = logits.data();
  std::vector<double> probs(logits.numel());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y == ignore_index) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " at row " + std::to_string(r) +
                              " outside [0, " + std::to_string(k) + ")");
    }
    const double* row = x.data() + r * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    const double log_z = m + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - log_z);
    total += log_z - row[y];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every label is ignored");
  const double inv = 1.0 / static_cast<double>(count);
  return Tape::active().record(
      "cross_entropy", Tensor::scalar(total * inv), {logits},
      [probs = std::move(probs), labels, ignore_index, k, rows, inv](std::span<const double> g) {
        std::vector<double> gx(rows * k, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          if (labels[r] == ignore_index) continue;
          for (std::size_t j = 0; j < k; ++j) gx[r * k + j] = g[0] * inv * probs[r * k + j];
          gx[r * k + static_cast<std::size_t>(labels[r])] -= g[0] * inv;
        }
        return std::vector<std::vector<double>>{std::move(gx)};
      });
}

namespace {

struct CloudView {
  std::size_t batch, n;
};

CloudView cloud_view(const char* op, const Tensor& t) {
  if (t.rank() == 2 && t.size(1) == 3) return {1, t.size(0)};
  if (t.rank() == 3 && t.size(2) == 3) return {t.size(0), t.size(1)};
  throw std::invalid_argument(std::string(op) + ": expected [n, 3] or [B, n, 3], got " + shape_str(t.shape()));
}

double sq_dist(const double* p, const double* q) {
  const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
  return dx * dx + dy * dy + dz * dz;
}

// For each point of a, index of the nearest point of b (lowest index on ties).
void nearest(const double* a, std::size_t n, const double* b, std::size_t m, std::vector<std::size_t>& idx,
             std::vector<double>& dist, double& margin) {
  idx.assign(n, 0);
  dist.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity(), second = best;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = sq_dist(a + 3 * i, b + 3 * j);
      if (d < best) {
        second = best;
        best = d;
        arg = j;
      } else {
        second = std::min(second, d);
      }
    }
    idx[i] = arg;
    dist[i] = best;
    margin = std::min(margin, second - best);
  }
}

}  // namespace

Tensor chamfer(const Tensor& a, const Tensor& b) {
  const CloudView va = cloud_view("chamfer", a), vb = cloud_view("chamfer", b);
  if (va.batch != vb.batch) throw std::invalid_argument("chamfer: batch sizes differ");
  if (va.n == 0 || vb.n == 0) throw std::invalid_argument("chamfer: empty cloud");
  const std::size_t batch = va.batch, n = va.n, m = vb.n;
  auto pa = a.data();
  auto pb = b.data();
  std::vector<std::size_t> ab(batch * n), ba(batch * m);
  double total = 0.0;
  std::vector<std::size_t> idx;
  std::vector<double> dist;
  // Smallest gap between nearest and second-nearest squared distance.
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < batch; ++s) {
    nearest(pa.data() + s * n * 3, n, pb.data() + s * m * 3, m, idx, dist, margin);
    std::copy(idx.begin(), idx.end(), ab.begin() + static_cast<std::ptrdiff_t>(s * n));
    for (double d : dist) total += d / static_cast<double>(n);
    nearest(pb.data() + s * m * 3, m, pa.data() + s * n * 3, n, idx, dist, margin);
    std::copy(idx.begin(), idx.end(), ba.begin() + static_cast<std::ptrdiff_t>(s * m));
    for (double d : dist) total += d / static_cast<double>(m);
  }
  if (kink_tracking()) {
    report_kink_margin(margin);
    report_kink_choices(ab);
    report_kink_choices(ba);
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  return Tape::active().record(
      "chamfer", Tensor::scalar(total * inv_b), {a, b},
      [a, b, ab = std::move(ab), ba = std::move(ba), batch, n, m, inv_b](std::span<const double> g) {
        auto pa = a.data();
        auto pb = b.data();
        std::vector<double> ga(batch * n * 3, 0.0), gb(batch * m * 3, 0.0);
        const double sa = 2.0 * g[0] * inv_b / static_cast<double>(n);
        const double sb = 2.0 * g[0] * inv_b / static_cast<double>(m);
        for (std::size_t s = 0; s < batch; ++s) {
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ai = s * n + i, bj = s * m + ab[ai];
            for (std::size_t d = 0; d < 3; ++d) {
              const double diff = pa[ai * 3 + d] - pb[bj * 3 + d];
              ga[ai * 3 + d] += sa * diff;
              gb[bj * 3 + d] -= sa * diff;
            }
          }
          for (std::size_t j = 0; j < m; ++j) {
            const std::size_t bj = s * m + j, ai = s * n + ba[bj];
            for (std::size_t d = 0; d < 3; ++d) {
              const double diff = pb[bj * 3 + d] - pa[ai * 3 + d];
              gb[bj * 3 + d] += sb * diff;
              ga[ai * 3 + d] -= sb * diff;
            }
          }
        }
        return std::vector<std::vector<double>>{std::move(ga), std::move(gb)};
      });
}

std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw std::invalid_argument("solve_assignment: cost is not n x n");
  // Shortest augmenting paths with row/column potentials (1-based internally).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[match[j] - 1] = j - 1;
  return row_to_col;
}

Tensor emd_exact(const Tensor& a, const Tensor& b) {
  const CloudView va = cloud_view("emd_exact", a), vb = cloud_view("emd_exact", b);
  if (va.batch != vb.batch || va.n != vb.n) {
    throw std::invalid_argument("emd_exact: cloud sizes differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t batch = va.batch, n = va.n;
  if (n == 0) throw std::invalid_argument("emd_exact: empty cloud");
  if (n > 512) throw std::invalid_argument("emd_exact: n = " + std::to_string(n) + " exceeds the exact limit 512");
  auto pa = a.data();
  auto pb = b.data();
  std::vector<std::size_t> matching(batch * n);
  double total = 0.0;
  std::vector<double> cost(n * n);
  for (std::size_t s = 0; s < batch; ++s) {
    const double* ca = pa.data() + s * n * 3;
    const double* cb = pb.data() + s * n * 3;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = std::sqrt(sq_dist(ca + 3 * i, cb + 3 * j));
    const auto m = solve_assignment(cost, n);
    for (std::size_t i = 0; i < n; ++i) {
      matching[s * n + i] = m[i];
      total += cost[i * n + m[i]];
    }
  }
  if (kink_tracking()) report_kink_choices(matching);
  const double scale = 1.0 / static_cast<double>(batch * n);
  return Tape::active().record(
      "emd_exact", Tensor::scalar(total * scale), {a, b},
      [a, b, matching = std::move(matching), batch, n, scale](std::span<const double> g) {
        auto pa = a.data();
        auto pb = b.data();
        std::vector<double> ga(batch * n * 3, 0.0), gb(batch * n * 3, 0.0);
        for (std::size_t s = 0; s < batch; ++s) {
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ai = s * n + i, bj = s * n + matching[ai];
            const double d = std::sqrt(sq_dist(pa.data() + ai * 3, pb.data() + bj * 3));
            if (d == 0.0) continue;
            for (std::size_t k = 0; k < 3; ++k) {
              const double unit = (pa[ai * 3 + k] - pb[bj * 3 + k]) / d;
              ga[ai * 3 + k] += g[0] * scale * unit;
              gb[bj * 3 + k] -= g[0] * scale * unit;
            }
          }
        }
        return std::vector<std::vector<double>>{std::move(ga), std::move(gb)};
      });
}

double fscore_at(const Tensor& a, const Tensor& b, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("fscore_at: tau must be > 0");
  const CloudView va = cloud_view("fscore_at", a), vb = cloud_view("fscore_at", b);
  const std::size_t n = va.batch * va.n, m = vb.batch * vb.n;
  if (n == 0 || m == 0) throw std::invalid_argument("fscore_at: empty cloud");
  std::vector<std::size_t> idx;
  std::vector<double> dist;
  const double tau2 = tau * tau;
  double ignored = 0.0;
  nearest(a.data().data(), n, b.data().data(), m, idx, dist, ignored);
  const double precision =
      static_cast<double>(std::count_if(dist.begin(), dist.end(), [&](double d) { return d <= tau2; })) / n;
  nearest(b.data().data(), m, a.data().data(), n, idx, dist, ignored);
  const double recall =
      static_cast<double>(std::count_if(dist.begin(), dist.end(), [&](double d) { return d <= tau2; })) / m;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double bbox_diagonal(const Tensor& points) {
  cloud_view("bbox_diagonal", points);
  auto p = points.data();
  double lo[3], hi[3];
  for (int d = 0; d < 3; ++d) {
    lo[d] = std::numeric_limits<double>::infinity();
    hi[d] = -lo[d];
  }
  for (std::size_t i = 0; i < p.size(); i += 3) {
    for (std::size_t d = 0; d < 3; ++d) {
      lo[d] = std::min(lo[d], p[i + d]);
      hi[d] = std::max(hi[d], p[i + d]);
    }
  }
  double s = 0.0;
  for (int d = 0; d < 3; ++d) s += (hi[d] - lo[d]) * (hi[d] - lo[d]);
  return std::sqrt(s);
}

double fscore(const Tensor& pred, const Tensor& truth) {
  const double diag = bbox_diagonal(truth);
  if (!(diag > 0.0)) throw std::invalid_argument("fscore: ground truth has a degenerate bounding box");
  return fscore_at(pred, truth, 0.01 * diag);
}

std::vector<int> argmax_labels(const Tensor& logits) {
  const std::size_t k = logits.shape().back();
  auto x = logits.data();
  std::vector<int> out(logits.numel() / k);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* row = x.data() + r * k;
    out[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

namespace {

void check_labels(const char* op, const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
  if (pred.size() != truth.size()) throw std::invalid_argument(std::string(op) + ": prediction/label count mismatch");
  if (pred.empty()) throw std::invalid_argument(std::string(op) + ": no labels");
  if (classes < 1) throw std::invalid_argument(std::string(op) + ": class count must be >= 1");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= classes || truth[i] < 0 || truth[i] >= classes) {
      throw std::out_of_range(std::string(op) + ": label out of range at index " + std::to_string(i));
    }
  }
}

}  // namespace

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double mean_class_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
  check_labels("mean_class_accuracy", pred, truth, classes);
  std::vector<std::size_t> hit(classes, 0), total(classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++total[truth[i]];
    hit[truth[i]] += pred[i] == truth[i];
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    if (total[c] == 0) continue;
    sum += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    ++present;
  }
  return sum / present;
}

double miou(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
  check_labels("miou", pred, truth, classes);
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == truth[i]) {
      ++tp[pred[i]];
    } else {
      ++fp[pred[i]];
      ++fn[truth[i]];
    }
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    sum += static_cast<double>(tp[c]) / static_cast<double>(denom);
    ++present;
  }
  return sum / present;
}

}  // namespace cloudtf
