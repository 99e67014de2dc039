#include "rdetect/distance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rdetect/error.hpp"

namespace rdetect::distance {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(const HiddenSequence& a, const HiddenSequence& b) {
  if (a.length() < 1 || b.length() < 1) throw InvalidArgument("DTW needs non-empty sequences");
  if (a.dim() != b.dim())
    throw InvalidArgument("hidden dims differ: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
}

bool in_band(int p, int q, int rows, int cols, std::optional<int> band) {
  if (!band) return true;
  // Compare against the diagonal of the rectangular grid.
  const double expected = rows > 1 ? static_cast<double>(p) * (cols - 1) / (rows - 1) : 0.0;
  return std::abs(q - expected) <= *band;
}

void enumerate(const Eigen::MatrixXd& d, int p, int q, double acc, Path& current, double& best, Path& best_path) {
  const int rows = static_cast<int>(d.rows());
  const int cols = static_cast<int>(d.cols());
  if (p == rows - 1 && q == cols - 1) {
    if (acc < best) {
      best = acc;
      best_path = current;
    }
    return;
  }
  const std::pair<int, int> moves[3] = {{p + 1, q + 1}, {p + 1, q}, {p, q + 1}};
  for (auto [np, nq] : moves) {
    if (np >= rows || nq >= cols) continue;
    current.emplace_back(np, nq);
    enumerate(d, np, nq, acc + d(np, nq), current, best, best_path);
    current.pop_back();
  }
}

}  // namespace

double squared_distance(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

Eigen::MatrixXd pairwise_costs(const HiddenSequence& a, const HiddenSequence& b) {
  check_pair(a, b);
  Eigen::MatrixXd d(a.length(), b.length());
  for (int p = 0; p < a.length(); ++p)
    for (int q = 0; q < b.length(); ++q) d(p, q) = squared_distance(a.states.col(p), b.states.col(q));
  return d;
}

DtwResult dtw_from_costs(const Eigen::MatrixXd& d, std::optional<int> band) {
  const int rows = static_cast<int>(d.rows());
  const int cols = static_cast<int>(d.cols());
  if (rows < 1 || cols < 1) throw InvalidArgument("DTW needs a non-empty cost matrix");
  DtwResult r;
  auto& c = r.cumulative;
  c = Eigen::MatrixXd::Constant(rows, cols, kInf);
  for (int p = 0; p < rows; ++p) {
    for (int q = 0; q < cols; ++q) {
      if (!in_band(p, q, rows, cols, band)) continue;
      if (p == 0 && q == 0) {
        c(p, q) = d(p, q);
        continue;
      }
      double best = kInf;
      if (p > 0) best = std::min(best, c(p - 1, q));
      if (q > 0) best = std::min(best, c(p, q - 1));
      if (p > 0 && q > 0) best = std::min(best, c(p - 1, q - 1));
      c(p, q) = d(p, q) + best;
    }
  }
  r.final_cost = c(rows - 1, cols - 1);
  r.distance = distance_from_cost(r.final_cost);

  // Backtrack with tie-break diagonal, vertical, horizontal.
  int p = rows - 1, q = cols - 1;
  r.path.emplace_back(p, q);
  while (p > 0 || q > 0) {
    double best = kInf;
    int bp = p, bq = q;
    if (p > 0 && q > 0 && c(p - 1, q - 1) < best) { best = c(p - 1, q - 1); bp = p - 1; bq = q - 1; }
    if (p > 0 && c(p - 1, q) < best) { best = c(p - 1, q); bp = p - 1; bq = q; }
    if (q > 0 && c(p, q - 1) < best) { best = c(p, q - 1); bp = p; bq = q - 1; }
    if (bp == p && bq == q) throw InvalidArgument("band excludes every alignment path");
    p = bp;
    q = bq;
    r.path.emplace_back(p, q);
  }
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

DtwResult dtw(const HiddenSequence& a, const HiddenSequence& b, std::optional<int> band) {
  return dtw_from_costs(pairwise_costs(a, b), band);
}

DtwResult dtw_bruteforce_costs(const Eigen::MatrixXd& d) {
  if (d.rows() < 1 || d.cols() < 1) throw InvalidArgument("DTW needs a non-empty cost matrix");
  if (d.rows() * d.cols() > 36) throw InvalidArgument("brute-force DTW limited to T_i * T_j <= 36");
  DtwResult r;
  double best = kInf;
  Path current{{0, 0}};
  enumerate(d, 0, 0, d(0, 0), current, best, r.path);
  r.final_cost = best;
  r.distance = distance_from_cost(best);
  return r;
}

DtwResult dtw_bruteforce(const HiddenSequence& a, const HiddenSequence& b) {
  check_pair(a, b);
  if (a.length() * b.length() > 36) throw InvalidArgument("brute-force DTW limited to T_i * T_j <= 36");
  return dtw_bruteforce_costs(pairwise_costs(a, b));
}

long long count_alignment_paths(int rows, int cols) {
  if (rows < 1 || cols < 1) return 0;
  std::vector<long long> prev(cols, 1), cur(cols);
  for (int p = 1; p < rows; ++p) {
    cur[0] = 1;
    for (int q = 1; q < cols; ++q) cur[q] = prev[q] + cur[q - 1] + prev[q - 1];
    std::swap(prev, cur);
  }
  return prev[cols - 1];
}

double soft_min(std::initializer_list<double> values, double gamma) {
  double lo = kInf;
  for (double v : values) lo = std::min(lo, v);
  if (lo == kInf) return kInf;
  double sum = 0.0;
  for (double v : values) {
    if (v != kInf) sum += std::exp(-(v - lo) / gamma);
  }
  return lo - gamma * std::log(sum);
}

Eigen::MatrixXd soft_dtw_forward(const Eigen::MatrixXd& d, double gamma) {
  if (!(gamma > 0.0)) throw InvalidArgument("soft-DTW smoothing gamma must be positive");
  const auto rows = d.rows();
  const auto cols = d.cols();
  if (rows < 1 || cols < 1) throw InvalidArgument("soft-DTW needs a non-empty cost matrix");
  Eigen::MatrixXd r(rows, cols);
  for (Eigen::Index p = 0; p < rows; ++p) {
    for (Eigen::Index q = 0; q < cols; ++q) {
      if (p == 0 && q == 0) r(p, q) = d(p, q);
      else if (p == 0) r(p, q) = d(p, q) + r(p, q - 1);
      else if (q == 0) r(p, q) = d(p, q) + r(p - 1, q);
      else r(p, q) = d(p, q) + soft_min({r(p - 1, q), r(p, q - 1), r(p - 1, q - 1)}, gamma);
    }
  }
  return r;
}

Eigen::MatrixXd soft_dtw_backward(const Eigen::MatrixXd& d, const Eigen::MatrixXd& r,
                                  const Eigen::MatrixXd& grad_r, double gamma) {
  if (!(gamma > 0.0)) throw InvalidArgument("soft-DTW smoothing gamma must be positive");
  const auto rows = d.rows();
  const auto cols = d.cols();
  if (r.rows() != rows || r.cols() != cols || grad_r.rows() != rows || grad_r.cols() != cols)
    throw InvalidArgument("soft-DTW backward shapes disagree");
  // e(p, q) = dL/dR(p, q) accumulated from its successors. A successor s
  // with three predecessors weights predecessor x by exp((R(s)-D(s)-R(x))/gamma).
  Eigen::MatrixXd e = grad_r;
  auto weight = [&](Eigen::Index sp, Eigen::Index sq, Eigen::Index xp, Eigen::Index xq) {
    if (sp == 0 || sq == 0) return 1.0;  // boundary cells have a single predecessor
    return std::exp((r(sp, sq) - d(sp, sq) - r(xp, xq)) / gamma);
  };
  for (Eigen::Index p = rows - 1; p >= 0; --p) {
    for (Eigen::Index q = cols - 1; q >= 0; --q) {
      double acc = e(p, q);
      if (p + 1 < rows) acc += e(p + 1, q) * weight(p + 1, q, p, q);
      if (q + 1 < cols) acc += e(p, q + 1) * weight(p, q + 1, p, q);
      if (p + 1 < rows && q + 1 < cols) acc += e(p + 1, q + 1) * weight(p + 1, q + 1, p, q);
      e(p, q) = acc;
    }
  }
  return e;  // dR(p,q)/dD(p,q) == 1
}

SoftDtwResult soft_dtw(const Eigen::MatrixXd& d, double gamma) {
  SoftDtwResult res;
  res.cumulative = soft_dtw_forward(d, gamma);
  res.soft_cost = res.cumulative(d.rows() - 1, d.cols() - 1);
  Eigen::MatrixXd seed = Eigen::MatrixXd::Zero(d.rows(), d.cols());
  seed(d.rows() - 1, d.cols() - 1) = 1.0;
  res.grad_costs = soft_dtw_backward(d, res.cumulative, seed, gamma);
  return res;
}

SoftDtwResult soft_dtw(const HiddenSequence& a, const HiddenSequence& b, double gamma) {
  return soft_dtw(pairwise_costs(a, b), gamma);
}

void costs_backward(const HiddenSequence& a, const HiddenSequence& b, const Eigen::MatrixXd& g,
                    Eigen::MatrixXd& grad_a, Eigen::MatrixXd& grad_b) {
  // D(p,q) = ||a_p - b_q||^2
  //   dL/da_p = 2 * sum_q G(p,q) (a_p - b_q),  dL/db_q = 2 * sum_p G(p,q) (b_q - a_p)
  const Eigen::VectorXd row_sum = g.rowwise().sum();
  const Eigen::VectorXd col_sum = g.colwise().sum().transpose();
  grad_a = 2.0 * (a.states * row_sum.asDiagonal() - b.states * g.transpose());
  grad_b = 2.0 * (b.states * col_sum.asDiagonal() - a.states * g);
}

OnlineDtw::OnlineDtw(HiddenSequence reference) : reference_(std::move(reference)) {
  if (reference_.length() < 1) throw InvalidArgument("online DTW needs a non-empty reference");
}

void OnlineDtw::append(const Eigen::Ref<const Eigen::VectorXd>& state) {
  if (state.size() != reference_.dim())
    throw InvalidArgument("online DTW state dim does not match reference");
  const int cols = reference_.length();
  Eigen::VectorXd row(cols);
  for (int q = 0; q < cols; ++q) {
    const double cost = squared_distance(state, reference_.states.col(q));
    if (steps_ == 0) {
      row[q] = q == 0 ? cost : cost + row[q - 1];
    } else {
      double best = last_row_[q];
      if (q > 0) best = std::min({best, row[q - 1], last_row_[q - 1]});
      row[q] = cost + best;
    }
  }
  last_row_ = std::move(row);
  prefix_costs_.push_back(last_row_.minCoeff());
  ++steps_;
}

std::vector<double> prefix_costs(const Eigen::MatrixXd& cumulative) {
  std::vector<double> out(cumulative.rows());
  for (Eigen::Index t = 0; t < cumulative.rows(); ++t) out[t] = cumulative.row(t).minCoeff();
  return out;
}

std::optional<int> divergence_time(const std::vector<double>& costs, double threshold) {
  for (std::size_t t = 0; t < costs.size(); ++t) {
    if (costs[t] > threshold) return static_cast<int>(t) + 1;
  }
  return std::nullopt;
}

}  // namespace rdetect::distance
