#include "rdetect/loss.hpp"

#include <algorithm>
#include <cmath>

#include "rdetect/distance.hpp"
#include "rdetect/error.hpp"

namespace rdetect::loss {

void LossWeights::validate() const {
  if (lambda_pair < 0 || lambda_cluster < 0 || lambda_latency < 0)
    throw InvalidArgument("loss weights must be non-negative");
  if (margin < 0) throw InvalidArgument("margin must be non-negative");
  if (!(tau > 0)) throw InvalidArgument("latency temperature must be positive");
  if (!(gamma > 0)) throw InvalidArgument("soft-DTW gamma must be positive");
  if (!(delta_scale > 0)) throw InvalidArgument("delta scale must be positive");
}

TripletSampler::TripletSampler(const trace::Dataset& data, int window_width, int stride, double modified_probability)
    : data_(&data), width_(window_width), stride_(stride), modified_probability_(modified_probability) {
  windows_.reserve(data.traces.size());
  for (int i = 0; i < static_cast<int>(data.traces.size()); ++i) {
    windows_.push_back(trace::segment_windows(data.traces[i], width_, stride_));
    by_class_[static_cast<int>(data.traces[i].label)].push_back(i);
  }
  if (by_class_[0].empty() || by_class_[1].empty())
    throw InvalidArgument("triplet sampling needs both benign and ransomware traces");
}

Triplet TripletSampler::sample(Rng& rng) const {
  const int n = static_cast<int>(data_->traces.size());
  const int anchor = uniform_int(rng, 0, n - 1);
  const int cls = static_cast<int>(data_->traces[anchor].label);
  const auto& same = by_class_[cls];
  const auto& other = by_class_[1 - cls];

  Triplet t;
  t.anchor = windows_[anchor];
  const bool want_modified = uniform(rng, 0.0, 1.0) < modified_probability_;
  if (want_modified || same.size() < 2) {
    trace::Evasion ev;
    ev.kind = static_cast<trace::EvasionKind>(uniform_int(rng, 0, 2));
    ev.intensity = uniform(rng, 0.0, 1.0);
    const auto modified = trace::apply_evasion(data_->traces[anchor], ev, rng());
    t.positive = trace::segment_windows(modified, width_, stride_);
    t.modified_positive = true;
  } else {
    int pick = same[uniform_int(rng, 0, static_cast<int>(same.size()) - 2)];
    if (pick == anchor) pick = same.back();
    t.positive = windows_[pick];
  }
  t.negative = windows_[other[uniform_int(rng, 0, static_cast<int>(other.size()) - 1)]];
  return t;
}

Triplet sample_triplet(const trace::Dataset& data, int window_width, int stride, Rng& rng) {
  return TripletSampler(data, window_width, stride).sample(rng);
}

double pair_loss_hinge(double d_pos, double d_neg, double margin) { return std::max(0.0, margin + d_pos - d_neg); }

ClusterLoss cluster_loss(const Eigen::MatrixXd& e, std::span<const ProgramClass> labels) {
  const auto n = e.cols();
  if (n == 0) throw InvalidArgument("cluster loss needs a non-empty batch");
  if (static_cast<std::size_t>(n) != labels.size()) throw InvalidArgument("embedding/label count mismatch");
  ClusterLoss out;
  out.centroids = Eigen::MatrixXd::Zero(e.rows(), 2);
  int count[2] = {0, 0};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = static_cast<int>(labels[i]);
    out.centroids.col(k) += e.col(i);
    ++count[k];
  }
  for (int k = 0; k < 2; ++k)
    if (count[k] > 0) out.centroids.col(k) /= count[k];
  out.grad.resize(e.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd diff = e.col(i) - out.centroids.col(static_cast<int>(labels[i]));
    out.loss += diff.squaredNorm();
    out.grad.col(i) = 2.0 * diff;
  }
  return out;
}

double latency_loss(const std::vector<double>& prefix_costs, double delta, int T) {
  if (T < 1) throw InvalidArgument("latency loss needs T >= 1");
  const auto t_div = distance::divergence_time(prefix_costs, delta);
  return static_cast<double>(t_div.value_or(T)) / T;
}

LatencySoft latency_loss_soft(const std::vector<double>& prefix_costs, double delta, double tau, int T) {
  if (!(tau > 0)) throw InvalidArgument("latency temperature must be positive");
  if (T < 1) throw InvalidArgument("latency loss needs T >= 1");
  LatencySoft out;
  out.grad.assign(prefix_costs.size(), 0.0);
  // The divergence step itself counts, so the last cost never matters.
  out.loss = 1.0;
  for (std::size_t t = 0; t + 1 < prefix_costs.size(); ++t) {
    const double s = 1.0 / (1.0 + std::exp(-(delta - prefix_costs[t]) / tau));
    out.loss += s;
    out.grad[t] = -s * (1.0 - s) / (tau * T);
  }
  out.loss /= T;
  return out;
}

LossBreakdown total_loss(double pair, double cluster, double latency, const LossWeights& w) {
  LossBreakdown b{pair, cluster, latency, 0.0};
  b.total = w.lambda_pair * pair + w.lambda_cluster * cluster + w.lambda_latency * latency;
  return b;
}

double calibrate_delta(const encoder::EncoderParams& params, const std::vector<Triplet>& batch, double scale) {
  if (batch.empty()) throw InvalidArgument("cannot calibrate delta on an empty batch");
  double sum = 0.0;
  for (const auto& t : batch) {
    const auto a = encoder::gru_forward(params, t.anchor).hidden;
    const auto n = encoder::gru_forward(params, t.negative).hidden;
    sum += distance::dtw(a, n).final_cost;
  }
  return scale * sum / static_cast<double>(batch.size());
}

namespace {

struct SoftRowMin {
  std::vector<double> values;
  Eigen::MatrixXd weights;  // d c_t / d R(t, q)
};

SoftRowMin soft_row_min(const Eigen::MatrixXd& r, double gamma) {
  SoftRowMin out;
  out.values.resize(r.rows());
  out.weights.resize(r.rows(), r.cols());
  for (Eigen::Index t = 0; t < r.rows(); ++t) {
    const double lo = r.row(t).minCoeff();
    const Eigen::ArrayXd w = (-(r.row(t).array() - lo) / gamma).exp().transpose();
    const double z = w.sum();
    out.values[t] = lo - gamma * std::log(z);
    out.weights.row(t) = (w / z).matrix().transpose();
  }
  return out;
}

}  // namespace

BatchEvaluation evaluate_batch(const encoder::EncoderParams& params, const std::vector<Triplet>& batch,
                               const LossWeights& w, bool with_grads) {
  w.validate();
  if (batch.empty()) throw InvalidArgument("empty training batch");
  const auto B = static_cast<double>(batch.size());

  // Sequences laid out as [a0, p0, n0, a1, p1, n1, ...].
  std::vector<encoder::ForwardResult> fwd;
  std::vector<ProgramClass> labels;
  fwd.reserve(batch.size() * 3);
  for (const auto& t : batch) {
    fwd.push_back(encoder::gru_forward(params, t.anchor));
    fwd.push_back(encoder::gru_forward(params, t.positive));
    fwd.push_back(encoder::gru_forward(params, t.negative));
    labels.push_back(t.anchor.label);
    labels.push_back(t.positive.label);
    labels.push_back(t.negative.label);
  }

  BatchEvaluation out;
  if (w.delta) {
    out.delta = *w.delta;
  } else {
    double sum = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b)
      sum += distance::dtw(fwd[3 * b].hidden, fwd[3 * b + 2].hidden).final_cost;
    out.delta = w.delta_scale * sum / B;
  }
  const double tau = w.tau * std::max(out.delta, 1e-12);

  std::vector<Eigen::MatrixXd> grad_h;
  if (with_grads) {
    grad_h.reserve(fwd.size());
    for (const auto& f : fwd) grad_h.push_back(Eigen::MatrixXd::Zero(f.hidden.dim(), f.hidden.length()));
  }

  double pair_sum = 0.0, latency_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ha = fwd[3 * b].hidden;
    const auto& hp = fwd[3 * b + 1].hidden;
    const auto& hn = fwd[3 * b + 2].hidden;
    const Eigen::MatrixXd d_pos = distance::pairwise_costs(ha, hp);
    const Eigen::MatrixXd d_neg = distance::pairwise_costs(ha, hn);
    const Eigen::MatrixXd r_pos = distance::soft_dtw_forward(d_pos, w.gamma);
    const Eigen::MatrixXd r_neg = distance::soft_dtw_forward(d_neg, w.gamma);
    const double c_pos = r_pos(r_pos.rows() - 1, r_pos.cols() - 1);
    const double c_neg = r_neg(r_neg.rows() - 1, r_neg.cols() - 1);
    const double dist_pos = distance::distance_from_cost(c_pos);
    const double dist_neg = distance::distance_from_cost(c_neg);
    out.raw_pair.push_back(pair_loss_raw(dist_pos, dist_neg));
    const double hinge = pair_loss_hinge(dist_pos, dist_neg, w.margin);
    pair_sum += hinge;

    const auto rows = soft_row_min(r_neg, w.gamma);
    const auto lat = latency_loss_soft(rows.values, out.delta, tau, ha.length());
    latency_sum += lat.loss;

    if (!with_grads) continue;
    Eigen::MatrixXd seed_pos = Eigen::MatrixXd::Zero(r_pos.rows(), r_pos.cols());
    Eigen::MatrixXd seed_neg = Eigen::MatrixXd::Zero(r_neg.rows(), r_neg.cols());
    if (hinge > 0.0) {
      const double g = w.lambda_pair / B;
      seed_pos(seed_pos.rows() - 1, seed_pos.cols() - 1) = g * c_pos;
      seed_neg(seed_neg.rows() - 1, seed_neg.cols() - 1) = -g * c_neg;
    }
    const double gl = w.lambda_latency / B;
    for (Eigen::Index t = 0; t < r_neg.rows(); ++t) seed_neg.row(t) += gl * lat.grad[t] * rows.weights.row(t);

    Eigen::MatrixXd ga, gp, gn;
    if (hinge > 0.0) {
      const auto gd_pos = distance::soft_dtw_backward(d_pos, r_pos, seed_pos, w.gamma);
      distance::costs_backward(ha, hp, gd_pos, ga, gp);
      grad_h[3 * b] += ga;
      grad_h[3 * b + 1] += gp;
    }
    const auto gd_neg = distance::soft_dtw_backward(d_neg, r_neg, seed_neg, w.gamma);
    distance::costs_backward(ha, hn, gd_neg, ga, gn);
    grad_h[3 * b] += ga;
    grad_h[3 * b + 2] += gn;
  }

  Eigen::MatrixXd pooled(params.hidden_dim(), static_cast<Eigen::Index>(fwd.size()));
  for (std::size_t i = 0; i < fwd.size(); ++i) pooled.col(static_cast<Eigen::Index>(i)) = fwd[i].hidden.pooled();
  const auto cl = cluster_loss(pooled, labels);
  const double n_emb = static_cast<double>(fwd.size());

  out.breakdown = total_loss(pair_sum / B, cl.loss / n_emb, latency_sum / B, w);

  if (!with_grads) return out;
  out.grads = encoder::EncoderParams::zeros(params.input_dim(), params.hidden_dim(),
                                            static_cast<int>(params.layers.size()));
  for (std::size_t i = 0; i < fwd.size(); ++i) {
    const auto T = fwd[i].hidden.length();
    const Eigen::VectorXd ge = (w.lambda_cluster / n_emb) * cl.grad.col(static_cast<Eigen::Index>(i)) / T;
    grad_h[i].colwise() += ge;
    const auto back = encoder::gru_backward(params, fwd[i].tape, grad_h[i]);
    auto dst = out.grads.tensors();
    const auto src = back.param_grads.tensors();
    for (std::size_t k = 0; k < dst.size(); ++k)
      for (std::size_t j = 0; j < dst[k].size(); ++j) dst[k][j] += src[k][j];
  }
  return out;
}

}  // namespace rdetect::loss
