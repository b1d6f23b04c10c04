/*
 * Copyright 2026 The bevtune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "bevtune/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "bevtune/errors.hpp"
#include "bevtune/losses.hpp"

namespace bevtune::matching {

double classification_cost(std::span<const double> class_probs, int gt_class) {
  if (gt_class < 0 || static_cast<std::size_t>(gt_class) >= class_probs.size())
    throw std::out_of_range("classification_cost: gt class index out of range");
  return 1.0 - class_probs[gt_class];
}

double regression_cost(const geom::Box2D& pred, const geom::Box2D& gt,
                       const Normalization& norm) {
  const double pixel = std::abs(pred.x - gt.x) + std::abs(pred.y - gt.y) +
                       std::abs(pred.w - gt.w) + std::abs(pred.h - gt.h);
  return pixel / norm.image_height + std::abs(pred.depth - gt.depth) / norm.max_depth;
}

double iou_cost(const geom::Box2D& pred, const geom::Box2D& gt) {
  return losses::giou_loss(pred, gt);
}

CostMatrix build_cost_matrix(std::span<const Prediction2D> preds,
                             std::span<const GroundTruth2D> gts,
                             const CostWeights& w, const Normalization& norm) {
  if (preds.empty() || gts.empty())
    throw std::invalid_argument("build_cost_matrix: predictions and ground truth must be nonempty");
  CostMatrix cost(static_cast<int>(preds.size()), static_cast<int>(gts.size()));
  for (int i = 0; i < cost.rows(); ++i) {
    for (int j = 0; j < cost.cols(); ++j) {
      cost.at(i, j) = w.cls * classification_cost(preds[i].class_probs, gts[j].class_id) +
                      w.reg * regression_cost(preds[i].box, gts[j].box, norm) +
                      w.iou * iou_cost(preds[i].box, gts[j].box);
    }
  }
  return cost;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Potentials-based shortest-augmenting-path solver; requires r <= c.
// Returns the assigned column of each row.
std::vector<int> assign_rows(const std::vector<double>& a, int r, int c) {
  std::vector<double> u(r + 1, 0.0), v(c + 1, 0.0);
  std::vector<int> p(c + 1, 0), way(c + 1, 0);
  for (int i = 1; i <= r; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(c + 1, kInf);
    std::vector<char> used(c + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= c; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * c + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= c; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(r, -1);
  for (int j = 1; j <= c; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// One optimal set of pairs over the given row/column subsets, sorted by row.
std::vector<std::pair<int, int>> optimal_pairs(const CostMatrix& cost,
                                               const std::vector<int>& rows,
                                               const std::vector<int>& cols) {
  const int r = static_cast<int>(rows.size());
  const int c = static_cast<int>(cols.size());
  std::vector<std::pair<int, int>> pairs;
  if (r == 0 || c == 0) return pairs;

  if (r <= c) {
    std::vector<double> a(static_cast<std::size_t>(r) * c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) a[static_cast<std::size_t>(i) * c + j] = cost.at(rows[i], cols[j]);
    const auto row_to_col = assign_rows(a, r, c);
    for (int i = 0; i < r; ++i) pairs.emplace_back(rows[i], cols[row_to_col[i]]);
  } else {
    std::vector<double> a(static_cast<std::size_t>(c) * r);
    for (int j = 0; j < c; ++j)
      for (int i = 0; i < r; ++i) a[static_cast<std::size_t>(j) * r + i] = cost.at(rows[i], cols[j]);
    const auto col_to_row = assign_rows(a, c, r);
    for (int j = 0; j < c; ++j) pairs.emplace_back(rows[col_to_row[j]], cols[j]);
    std::sort(pairs.begin(), pairs.end());
  }
  return pairs;
}

// Canonical total: matched entries summed left to right in pair-list order.
// Both solvers report totals this way, so equal pair lists give bitwise
// equal totals.
double list_total(const CostMatrix& cost, const std::vector<std::pair<int, int>>& pairs) {
  double t = 0.0;
  for (const auto& [i, j] : pairs) t += cost.at(i, j);
  return t;
}

Assignment finalize(const CostMatrix& cost, std::vector<std::pair<int, int>> pairs) {
  Assignment out;
  out.pairs = std::move(pairs);
  out.total_cost = list_total(cost, out.pairs);
  std::vector<char> row_used(cost.rows(), 0), col_used(cost.cols(), 0);
  for (const auto& [i, j] : out.pairs) {
    row_used[i] = 1;
    col_used[j] = 1;
  }
  for (int i = 0; i < cost.rows(); ++i)
    if (!row_used[i]) out.unmatched_preds.push_back(i);
  for (int j = 0; j < cost.cols(); ++j)
    if (!col_used[j]) out.unmatched_gts.push_back(j);
  return out;
}

void check_finite(const CostMatrix& cost) {
  for (int i = 0; i < cost.rows(); ++i)
    for (int j = 0; j < cost.cols(); ++j)
      if (!std::isfinite(cost.at(i, j)))
        throw std::invalid_argument("assignment: cost matrix has non-finite entries");
}

}  // namespace

/*
 * The solver below returns the lexicographically smallest pair list among
 * minimum-cost assignments. Pairs are fixed one position at a time: for each
 * candidate (i, j), an optimal completion over the remaining rows/columns is
 * solved and the candidate's full-list total is compared against the best
 * total established at position 0. Candidates are scanned in ascending
 * (i, j) order, so the first one achieving that total is the lexicographic
 * choice. Totals are always recomputed in pair-list order from the raw
 * matrix; with integer-valued costs every comparison is exact, and with
 * continuous costs optima are unique in practice. Should a tie survive at
 * float precision anyway, the candidate with the smallest completed total
 * (first among equals) is taken, which keeps the result deterministic.
 */
Assignment hungarian(const CostMatrix& cost) {
  check_finite(cost);
  const int n = cost.rows(), m = cost.cols();
  const int k = std::min(n, m);

  std::vector<std::pair<int, int>> fixed;
  std::vector<char> used_col(m, 0);
  int last_i = -1;
  double target = 0.0;

  for (int pos = 0; pos < k; ++pos) {
    const int remaining = k - pos - 1;
    int best_i = -1, best_j = -1;
    double best_total = kInf;
    bool accepted = false;

    for (int i = last_i + 1; i <= n - 1 - remaining && !accepted; ++i) {
      std::vector<int> rows_avail;
      for (int r = i + 1; r < n; ++r) rows_avail.push_back(r);
      for (int j = 0; j < m && !accepted; ++j) {
        if (used_col[j]) continue;
        std::vector<int> cols_avail;
        for (int cidx = 0; cidx < m; ++cidx)
          if (!used_col[cidx] && cidx != j) cols_avail.push_back(cidx);

        auto full = fixed;
        full.emplace_back(i, j);
        const auto completion = optimal_pairs(cost, rows_avail, cols_avail);
        full.insert(full.end(), completion.begin(), completion.end());
        const double total = list_total(cost, full);

        if (pos > 0 && total == target) {
          best_i = i;
          best_j = j;
          accepted = true;
          break;
        }
        if (total < best_total) {
          best_total = total;
          best_i = i;
          best_j = j;
        }
      }
    }

    if (pos == 0) target = best_total;
    fixed.emplace_back(best_i, best_j);
    used_col[best_j] = 1;
    last_i = best_i;
  }
  return finalize(cost, std::move(fixed));
}

Assignment brute_force_assignment(const CostMatrix& cost) {
  check_finite(cost);
  const int n = cost.rows(), m = cost.cols();
  const int k = std::min(n, m);
  if (k > 8)
    throw SizeLimit("brute_force_assignment: min(rows, cols) > 8");

  std::vector<std::pair<int, int>> best, cur;
  double best_total = kInf;
  std::vector<char> used_col(m, 0);

  // Enumerates complete pair lists in lexicographic order; strict improvement
  // keeps the first (smallest) list among equal totals. Partial totals
  // accumulate left to right, matching the canonical summation.
  auto rec = [&](auto&& self, int pos, int min_i, double partial) -> void {
    if (pos == k) {
      if (partial < best_total) {
        best_total = partial;
        best = cur;
      }
      return;
    }
    const int remaining = k - pos - 1;
    for (int i = min_i; i <= n - 1 - remaining; ++i) {
      for (int j = 0; j < m; ++j) {
        if (used_col[j]) continue;
        used_col[j] = 1;
        cur.emplace_back(i, j);
        self(self, pos + 1, i + 1, partial + cost.at(i, j));
        cur.pop_back();
        used_col[j] = 0;
      }
    }
  };
  if (k > 0) rec(rec, 0, 0, 0.0);
  return finalize(cost, std::move(best));
}

}  // namespace bevtune::matching
