#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the code under test except to read plain values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rdetect/hidden.hpp"
#include "rdetect/rng.hpp"

namespace oracle {

using Path = std::vector<std::pair<int, int>>;

/// Every monotone path from (0,0) to (rows-1, cols-1) with unit right, down
/// and diagonal moves, by explicit recursion.
inline std::vector<Path> enumerate_paths(int rows, int cols) {
  std::vector<Path> out;
  Path cur{{0, 0}};
  std::function<void(int, int)> walk = [&](int p, int q) {
    if (p == rows - 1 && q == cols - 1) {
      out.push_back(cur);
      return;
    }
    const int moves[3][2] = {{1, 0}, {0, 1}, {1, 1}};
    for (const auto& m : moves) {
      const int np = p + m[0], nq = q + m[1];
      if (np >= rows || nq >= cols) continue;
      cur.emplace_back(np, nq);
      walk(np, nq);
      cur.pop_back();
    }
  };
  walk(0, 0);
  return out;
}

inline double path_cost(const Eigen::MatrixXd& costs, const Path& path) {
  double s = 0.0;
  for (auto [p, q] : path) s += costs(p, q);
  return s;
}

inline Eigen::MatrixXd squared_costs(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd d(a.cols(), b.cols());
  for (Eigen::Index p = 0; p < a.cols(); ++p)
    for (Eigen::Index q = 0; q < b.cols(); ++q) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.rows(); ++k) {
        const double diff = a(k, p) - b(k, q);
        s += diff * diff;
      }
      d(p, q) = s;
    }
  return d;
}

/// Minimum path cost over all enumerated alignments.
inline double min_path_cost(const Eigen::MatrixXd& costs) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& path : enumerate_paths(static_cast<int>(costs.rows()), static_cast<int>(costs.cols())))
    best = std::min(best, path_cost(costs, path));
  return best;
}

/// -gamma * log sum_paths exp(-cost / gamma), evaluated with a shifted
/// log-sum-exp over the enumerated paths.
inline double soft_path_cost(const Eigen::MatrixXd& costs, double gamma) {
  std::vector<double> c;
  for (const auto& path : enumerate_paths(static_cast<int>(costs.rows()), static_cast<int>(costs.cols())))
    c.push_back(path_cost(costs, path));
  const double lo = *std::min_element(c.begin(), c.end());
  double z = 0.0;
  for (double v : c) z += std::exp(-(v - lo) / gamma);
  return lo - gamma * std::log(z);
}

/// Central difference derivative of f with respect to every entry of
/// `params`, perturbing in place and restoring.
inline std::vector<double> central_differences(std::span<double> params, const std::function<double()>& f,
                                               double h = 1e-5) {
  std::vector<double> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double up = f();
    params[i] = keep - h;
    const double down = f();
    params[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true value
/// is zero from dividing by round-off.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

inline Eigen::MatrixXd random_matrix(rdetect::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rdetect::uniform(rng, -scale, scale);
  return m;
}

inline rdetect::HiddenSequence random_sequence(rdetect::Rng& rng, int dim, int length) {
  return rdetect::HiddenSequence{random_matrix(rng, dim, length)};
}

/// Repeats column t of `h` counts[t] times (each count >= 1).
inline rdetect::HiddenSequence stretch(const rdetect::HiddenSequence& h, const std::vector<int>& counts) {
  int total = 0;
  for (int c : counts) total += c;
  rdetect::HiddenSequence out{Eigen::MatrixXd(h.dim(), total)};
  int col = 0;
  for (int t = 0; t < h.length(); ++t)
    for (int r = 0; r < counts[static_cast<std::size_t>(t)]; ++r) out.states.col(col++) = h.states.col(t);
  return out;
}

}  // namespace oracle
