#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <limits>
#include <vector>

#include "ddspme/error.hpp"

namespace ddspme {

struct Assignment {
  std::vector<int> row_to_col;  // row i is matched to column row_to_col[i]
  double cost = 0.0;
};

// Square linear assignment by shortest augmenting paths with dual potentials
// (Jonker-Volgenant style). Duals start from column minima with a greedy
// matching, which resolves most rows at once when the cost matrix is close to
// diagonal, as it is between successive Picard iterates.
inline Assignment solve_assignment(const Eigen::MatrixXd& cost) {
  const Eigen::Index n = cost.rows();
  require(cost.cols() == n, "solve_assignment: cost matrix must be square");
  require(n > 0, "solve_assignment: empty cost matrix");
  require(cost.allFinite(), "solve_assignment: cost matrix has non-finite entries");
  const auto nn = static_cast<std::size_t>(n);
  constexpr double inf = std::numeric_limits<double>::infinity();

  std::vector<double> u(nn, 0.0), v(nn);
  std::vector<int> row_to_col(nn, -1), col_to_row(nn, -1);

  // Column reduction and greedy tight matching.
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index imin = 0;
    v[static_cast<std::size_t>(j)] = cost.col(j).minCoeff(&imin);
    if (row_to_col[static_cast<std::size_t>(imin)] < 0) {
      row_to_col[static_cast<std::size_t>(imin)] = static_cast<int>(j);
      col_to_row[static_cast<std::size_t>(j)] = static_cast<int>(imin);
    }
  }

  std::vector<double> dist(nn);
  std::vector<int> pred(nn), remaining(nn);
  std::vector<char> row_seen(nn), col_done(nn);

  for (std::size_t start = 0; start < nn; ++start) {
    if (row_to_col[start] >= 0) continue;
    std::fill(dist.begin(), dist.end(), inf);
    std::fill(row_seen.begin(), row_seen.end(), 0);
    std::fill(col_done.begin(), col_done.end(), 0);
    std::size_t n_remaining = nn;
    for (std::size_t j = 0; j < nn; ++j) remaining[j] = static_cast<int>(nn - 1 - j);

    double min_val = 0.0;
    int sink = -1;
    std::size_t i = start;
    while (sink < 0) {
      row_seen[i] = 1;
      std::size_t best_idx = 0;
      double best = inf;
      for (std::size_t idx = 0; idx < n_remaining; ++idx) {
        const auto j = static_cast<std::size_t>(remaining[idx]);
        const double r = min_val + cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - u[i] - v[j];
        if (r < dist[j]) {
          pred[j] = static_cast<int>(i);
          dist[j] = r;
        }
        if (dist[j] < best || (dist[j] == best && col_to_row[j] < 0)) {
          best = dist[j];
          best_idx = idx;
        }
      }
      if (best == inf) throw Error("solve_assignment: infeasible problem");
      min_val = best;
      const auto j = static_cast<std::size_t>(remaining[best_idx]);
      col_done[j] = 1;
      remaining[best_idx] = remaining[--n_remaining];
      if (col_to_row[j] < 0) {
        sink = static_cast<int>(j);
      } else {
        i = static_cast<std::size_t>(col_to_row[j]);
      }
    }

    u[start] += min_val;
    for (std::size_t r = 0; r < nn; ++r) {
      if (row_seen[r] && r != start) u[r] += min_val - dist[static_cast<std::size_t>(row_to_col[r])];
    }
    for (std::size_t j = 0; j < nn; ++j) {
      if (col_done[j]) v[j] -= min_val - dist[j];
    }

    auto j = static_cast<std::size_t>(sink);
    for (;;) {
      const auto r = static_cast<std::size_t>(pred[j]);
      col_to_row[j] = static_cast<int>(r);
      const int prev = row_to_col[r];
      row_to_col[r] = static_cast<int>(j);
      if (r == start) break;
      j = static_cast<std::size_t>(prev);
    }
  }

  Assignment out;
  out.row_to_col = std::move(row_to_col);
  for (std::size_t r = 0; r < nn; ++r) {
    out.cost += cost(static_cast<Eigen::Index>(r), out.row_to_col[r]);
  }
  return out;
}

}  // namespace ddspme
