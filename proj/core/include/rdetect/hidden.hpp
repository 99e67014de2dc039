#pragma once

#include <Eigen/Dense>

namespace rdetect {

/// Top-layer hidden states of an encoded sequence, one column per step.
struct HiddenSequence {
  Eigen::MatrixXd states;  // hidden_dim x T

  int length() const { return static_cast<int>(states.cols()); }
  int dim() const { return static_cast<int>(states.rows()); }
  auto step(int t) const { return states.col(t); }

  /// Mean over time; the pooled embedding fed to the classifier and the
  /// clustering term.
  Eigen::VectorXd pooled() const { return states.rowwise().mean(); }
};

}  // namespace rdetect
