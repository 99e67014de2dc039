#pragma once

#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rdetect/hidden.hpp"

namespace rdetect::distance {

/// D(p, q) = ||a_p - b_q||^2, shape T_a x T_b.
Eigen::MatrixXd pairwise_costs(const HiddenSequence& a, const HiddenSequence& b);

/// Squared Euclidean distance between two states. Every DTW variant goes
/// through this so batch and online costs agree bit for bit.
double squared_distance(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);

using Path = std::vector<std::pair<int, int>>;  // 0-based (p, q)

struct DtwResult {
  Eigen::MatrixXd cumulative;  // C; empty for the brute-force oracle
  double final_cost = 0.0;     // C(T_i, T_j)
  double distance = 0.0;       // 0.5 * final_cost^2
  Path path;
};

/// d = 0.5 * C(T_i, T_j)^2. The squared cumulative cost is kept verbatim
/// even though it mixes units with D.
inline double distance_from_cost(double final_cost) { return 0.5 * final_cost * final_cost; }

/// Exact DTW with the cumulative boundary on the first row and column.
/// `band` restricts |p - q| (after length rescaling) when set.
DtwResult dtw(const HiddenSequence& a, const HiddenSequence& b, std::optional<int> band = std::nullopt);
DtwResult dtw_from_costs(const Eigen::MatrixXd& costs, std::optional<int> band = std::nullopt);

/// Enumerates every monotone alignment path; only for T_a * T_b <= 36.
DtwResult dtw_bruteforce(const HiddenSequence& a, const HiddenSequence& b);
DtwResult dtw_bruteforce_costs(const Eigen::MatrixXd& costs);

/// Number of monotone (right/down/diagonal) paths through a rows x cols grid.
long long count_alignment_paths(int rows, int cols);

struct SoftDtwResult {
  Eigen::MatrixXd cumulative;  // soft R, T_a x T_b
  double soft_cost = 0.0;
  Eigen::MatrixXd grad_costs;  // d soft_cost / d D
};

/// Smooth minimum -gamma * log(sum exp(-x / gamma)), stable for +inf entries.
double soft_min(std::initializer_list<double> values, double gamma);

Eigen::MatrixXd soft_dtw_forward(const Eigen::MatrixXd& costs, double gamma);

/// Reverse pass of the soft recurrence for an arbitrary upstream gradient
/// on the cumulative matrix: returns dL/dD given dL/dR (same shapes).
Eigen::MatrixXd soft_dtw_backward(const Eigen::MatrixXd& costs, const Eigen::MatrixXd& cumulative,
                                  const Eigen::MatrixXd& grad_cumulative, double gamma);

SoftDtwResult soft_dtw(const Eigen::MatrixXd& costs, double gamma);
SoftDtwResult soft_dtw(const HiddenSequence& a, const HiddenSequence& b, double gamma);

/// Chain rule from dL/dD to both hidden sequences for D = pairwise_costs(a, b).
void costs_backward(const HiddenSequence& a, const HiddenSequence& b, const Eigen::MatrixXd& grad_costs,
                    Eigen::MatrixXd& grad_a, Eigen::MatrixXd& grad_b);

/// Row-by-row DTW against a fixed reference. Row t is computed from row
/// t-1 only, so memory is O(T_ref) and results match the batch DP exactly.
class OnlineDtw {
 public:
  explicit OnlineDtw(HiddenSequence reference);

  void append(const Eigen::Ref<const Eigen::VectorXd>& state);

  int steps() const { return steps_; }
  const Eigen::VectorXd& last_row() const { return last_row_; }
  /// c_t = min_q C(t, q) for every consumed step.
  const std::vector<double>& prefix_costs() const { return prefix_costs_; }
  const HiddenSequence& reference() const { return reference_; }

 private:
  HiddenSequence reference_;
  Eigen::VectorXd last_row_;
  std::vector<double> prefix_costs_;
  int steps_ = 0;
};

/// Prefix costs c_t = min_q C(t, q) of a full cumulative matrix.
std::vector<double> prefix_costs(const Eigen::MatrixXd& cumulative);

/// Smallest 1-based t with c_t > threshold, or nullopt.
std::optional<int> divergence_time(const std::vector<double>& prefix_costs, double threshold);

}  // namespace rdetect::distance
