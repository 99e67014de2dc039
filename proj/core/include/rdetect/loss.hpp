#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "rdetect/encoder.hpp"
#include "rdetect/rng.hpp"
#include "rdetect/trace.hpp"

namespace rdetect::loss {

struct LossWeights {
  double lambda_pair = 1.0;
  double lambda_cluster = 0.1;
  double lambda_latency = 0.5;
  /// Hinge margin wrapped around the pair term during training.
  double margin = 1.0;
  /// Divergence threshold on prefix DTW cost. When unset it is calibrated
  /// per epoch as `delta_scale` times the mean hard final DTW cost over the
  /// batch's anchor/negative pairs.
  std::optional<double> delta;
  double delta_scale = 0.5;
  /// Latency surrogate temperature as a fraction of delta.
  double tau = 0.25;
  /// Soft-DTW smoothing.
  double gamma = 0.1;

  void validate() const;
};

struct LossBreakdown {
  double pair = 0.0;
  double cluster = 0.0;
  double latency = 0.0;
  double total = 0.0;
};

struct Triplet {
  trace::TraceSequence anchor;
  trace::TraceSequence positive;
  trace::TraceSequence negative;
  /// Positive is an evasion-transformed copy of the anchor trace.
  bool modified_positive = false;
};

/// Draws anchor / positive / negative triplets from a labelled corpus.
class TripletSampler {
 public:
  TripletSampler(const trace::Dataset& data, int window_width, int stride, double modified_probability = 0.5);

  Triplet sample(Rng& rng) const;

 private:
  const trace::Dataset* data_;
  int width_;
  int stride_;
  double modified_probability_;
  std::vector<trace::TraceSequence> windows_;
  std::vector<int> by_class_[2];
};

Triplet sample_triplet(const trace::Dataset& data, int window_width, int stride, Rng& rng);

/// Raw contrastive form d(a,+) - d(a,-).
inline double pair_loss_raw(double d_pos, double d_neg) { return d_pos - d_neg; }
/// Trained form max(0, m + d(a,+) - d(a,-)).
double pair_loss_hinge(double d_pos, double d_neg, double margin);

struct ClusterLoss {
  double loss = 0.0;
  Eigen::MatrixXd centroids;  // dim x 2, column k = centroid of class k (zero if absent)
  Eigen::MatrixXd grad;       // dim x N; centroids held constant
};

/// Sum over samples of ||e_i - mu_{y_i}||^2 with per-batch class means.
ClusterLoss cluster_loss(const Eigen::MatrixXd& embeddings, std::span<const ProgramClass> labels);

/// t_div / T, with t_div := T when the threshold is never exceeded.
double latency_loss(const std::vector<double>& prefix_costs, double delta, int T);

struct LatencySoft {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d c_t
};

/// (1/T) * (1 + sum_{t<T} sigmoid((delta - c_t) / tau)), a smooth t_div / T.
LatencySoft latency_loss_soft(const std::vector<double>& prefix_costs, double delta, double tau, int T);

LossBreakdown total_loss(double pair, double cluster, double latency, const LossWeights& w);

struct BatchEvaluation {
  LossBreakdown breakdown;
  double delta = 0.0;                // threshold actually used
  encoder::EncoderParams grads;      // empty layers when gradients were not requested
  std::vector<double> raw_pair;      // d(a,+) - d(a,-) per triplet with soft distances
};

/// Full training objective on one batch through encoder and soft-DTW:
///   pair    = mean_b hinge(m + d(a,+) - d(a,-))
///   cluster = mean over the 3B pooled embeddings of ||e - mu_y||^2
///   latency = mean_b soft latency of the (anchor, negative) prefix costs
BatchEvaluation evaluate_batch(const encoder::EncoderParams& params, const std::vector<Triplet>& batch,
                               const LossWeights& weights, bool with_grads);

/// Hard-DTW calibration of delta over anchor/negative pairs.
double calibrate_delta(const encoder::EncoderParams& params, const std::vector<Triplet>& batch, double scale);

}  // namespace rdetect::loss
