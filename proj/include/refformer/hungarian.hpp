#pragma once

// Minimum-cost bipartite assignment (Kuhn-Munkres with potentials, O(n^2 m))
// with a deterministic lexicographic tie-break among optimal assignments.

#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "refformer/tensor.hpp"

namespace refformer {

/// Dense row-major cost matrix.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
};

struct MatchAssignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col), rows ascending
  double total_cost = 0.0;
};

namespace detail {

/// Optimal cost and row->col map (-1 for unassigned rows) over the given
/// row/column subsets.
inline std::pair<double, std::vector<long>> solve_assignment(const CostMatrix& c, const std::vector<std::size_t>& rows,
                                                             const std::vector<std::size_t>& cols) {
  const bool transposed = rows.size() > cols.size();
  const auto& r_ids = transposed ? cols : rows;
  const auto& c_ids = transposed ? rows : cols;
  const std::size_t n = r_ids.size(), m = c_ids.size();
  std::vector<long> result(rows.size(), -1);
  if (n == 0) return {0.0, result};
  auto cost = [&](std::size_t i, std::size_t j) {
    return transposed ? c(c_ids[j - 1], r_ids[i - 1]) : c(r_ids[i - 1], c_ids[j - 1]);
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
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
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const std::size_t i = p[j];
    total += cost(i, j);
    if (transposed)
      result[j - 1] = static_cast<long>(i - 1);
    else
      result[i - 1] = static_cast<long>(j - 1);
  }
  // result is indexed by position in `rows`; map column positions to ids.
  for (long& r : result)
    if (r >= 0) r = static_cast<long>(cols[static_cast<std::size_t>(r)]);
  return {total, result};
}

inline bool same_cost(double a, double b) { return std::abs(a - b) <= 1e-9 * (1.0 + std::abs(b)); }

}  // namespace detail

/// Minimum-total-cost injective assignment of min(rows, cols) pairs. Among
/// optimal assignments the lexicographically smallest sorted pair list wins.
inline MatchAssignment hungarian_assign(const CostMatrix& cost) {
  if (cost.rows == 0 || cost.cols == 0 || cost.values.size() != cost.rows * cost.cols)
    throw ContractError("hungarian_assign: empty or malformed cost matrix");
  for (double v : cost.values)
    if (!std::isfinite(v)) throw ContractError("hungarian_assign: non-finite cost entry");

  std::vector<std::size_t> rows, cols;
  for (std::size_t i = 0; i < cost.rows; ++i) rows.push_back(i);
  for (std::size_t j = 0; j < cost.cols; ++j) cols.push_back(j);
  const double optimum = detail::solve_assignment(cost, rows, cols).first;

  MatchAssignment out;
  double fixed = 0.0;
  std::vector<std::size_t> free_rows = rows, free_cols = cols;
  while (!free_rows.empty() && !free_cols.empty()) {
    const std::size_t r = free_rows.front();
    std::vector<std::size_t> rest_rows(free_rows.begin() + 1, free_rows.end());
    bool placed = false;
    for (std::size_t k = 0; k < free_cols.size() && !placed; ++k) {
      std::vector<std::size_t> rest_cols = free_cols;
      rest_cols.erase(rest_cols.begin() + static_cast<long>(k));
      const double sub = detail::solve_assignment(cost, rest_rows, rest_cols).first;
      const double total = fixed + cost(r, free_cols[k]) + sub;
      if (detail::same_cost(total, optimum)) {
        fixed += cost(r, free_cols[k]);
        out.pairs.emplace_back(r, free_cols[k]);
        free_cols = std::move(rest_cols);
        placed = true;
      }
    }
    if (!placed) {
      // Row r stays unmatched; only possible when rows outnumber columns.
      if (rest_rows.size() < free_cols.size())
        throw ContractError("hungarian_assign: tie-break lost the optimum (tolerance too tight)");
    }
    free_rows = std::move(rest_rows);
  }
  out.total_cost = 0.0;
  for (const auto& [r, c] : out.pairs) out.total_cost += cost(r, c);
  return out;
}

}  // namespace refformer
