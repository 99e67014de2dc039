#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rdetect/encoder.hpp"
#include "rdetect/trace.hpp"

namespace rdetect::nas {

enum class OpKind { GruCell, DenseRelu, DenseTanh, Identity };

const char* to_string(OpKind k);
OpKind op_kind_from_string(const std::string& s);

/// One candidate operation. Inputs and outputs are batches laid out one
/// sample per column.
struct CandidateOp {
  OpKind kind = OpKind::Identity;
  int in_dim = 0;
  int out_dim = 0;
  Eigen::MatrixXd weight;       // dense: out x in
  Eigen::VectorXd bias;         // dense: out
  encoder::GruLayerParams gru;  // gru cell: input in, hidden out

  static CandidateOp make(OpKind kind, int in_dim, int out_dim, std::uint64_t seed);

  /// GRU cells treat the input as the previous hidden state when the dims
  /// agree (a gated residual update) and start from zero otherwise.
  bool gru_uses_input_as_state() const { return in_dim == out_dim; }

  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  std::size_t parameter_count() const;
};

struct OpCache {
  Eigen::MatrixXd input, output;
  Eigen::MatrixXd update, reset, candidate;  // gru only
  Eigen::MatrixXd dropout_mask;             // dense only, empty when dropout is off
};

Eigen::MatrixXd op_forward(const CandidateOp& op, const Eigen::MatrixXd& x, OpCache* cache = nullptr,
                           const Eigen::MatrixXd* dropout_mask = nullptr);
/// Returns dL/dx and accumulates parameter gradients into `grads`.
Eigen::MatrixXd op_backward(const CandidateOp& op, const OpCache& cache, const Eigen::MatrixXd& grad_out,
                            CandidateOp& grads);

struct LinearHead {
  Eigen::MatrixXd weight;  // 2 x width
  Eigen::VectorXd bias;    // 2
};

struct Supernet {
  std::vector<std::vector<CandidateOp>> layers;
  std::vector<Eigen::VectorXd> alpha;  // one row of architecture weights per layer
  LinearHead head;

  int input_dim() const { return layers.front().front().in_dim; }
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  void validate() const;
};

struct SupernetConfig {
  int num_layers = 4;
  int width = 64;
  std::vector<OpKind> candidates = {OpKind::GruCell, OpKind::DenseRelu, OpKind::DenseTanh, OpKind::Identity};
};

Supernet make_supernet(int input_dim, const SupernetConfig& cfg, std::uint64_t seed);

Eigen::VectorXd softmax(const Eigen::VectorXd& v);
/// Column-wise softmax.
Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits);

/// Class probabilities (2 x B) with per-layer mixture weights softmax(alpha).
Eigen::MatrixXd supernet_forward(const Supernet& net, const Eigen::MatrixXd& inputs);
/// Same, with caller-supplied mixture weights per layer.
Eigen::MatrixXd supernet_forward(const Supernet& net, const Eigen::MatrixXd& inputs,
                                 const std::vector<Eigen::VectorXd>& mixture);

struct ClassifierTrainConfig {
  int epochs = 500;
  int batch_size = 64;
  double lr = 1e-3;
  double dropout = 0.3;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
};

struct SupernetGradients {
  double loss = 0.0;
  Supernet grads;                      // same structure as the net
  std::vector<Eigen::MatrixXd> alpha_per_sample;  // per layer: ops x B, d L_i / d alpha
};

/// Mean cross-entropy and its gradient; dropout applies to dense candidates
/// when `dropout > 0`.
SupernetGradients supernet_gradients(const Supernet& net, const Eigen::MatrixXd& inputs,
                                     std::span<const int> labels, double dropout, std::uint64_t dropout_seed);

struct TrainHistory {
  std::vector<double> epoch_loss;
};

TrainHistory train_supernet(Supernet& net, const Eigen::MatrixXd& embeddings, std::span<const int> labels,
                            const ClassifierTrainConfig& cfg);

struct PrunedArchitecture {
  std::vector<int> chosen;  // kept op index per layer (index into the supernet layer)
  std::vector<CandidateOp> ops;
  LinearHead head;

  Eigen::MatrixXd forward(const Eigen::MatrixXd& inputs) const;
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  std::size_t parameter_count() const;
  int input_dim() const { return ops.front().in_dim; }
  bool operator==(const PrunedArchitecture& other) const;
};

/// Per-layer saliency |alpha_o * dL/dalpha_o| averaged over the samples of
/// a calibration batch.
std::vector<Eigen::VectorXd> saliency(const Supernet& net, const Eigen::MatrixXd& calibration,
                                      std::span<const int> labels);

/// Keeps the highest-saliency op per layer (lowest index on ties).
PrunedArchitecture prune(const Supernet& net, const Eigen::MatrixXd& calibration, std::span<const int> labels);
PrunedArchitecture prune_with_saliency(const Supernet& net, const std::vector<Eigen::VectorXd>& saliency);

/// One-hot mixture matching `arch.chosen`.
std::vector<Eigen::VectorXd> one_hot_mixture(const Supernet& net, const PrunedArchitecture& arch);

/// Updates the retained parameters only.
TrainHistory fine_tune(PrunedArchitecture& arch, const Eigen::MatrixXd& embeddings, std::span<const int> labels,
                       const ClassifierTrainConfig& cfg);

struct LabelledEmbeddings {
  Eigen::MatrixXd embeddings;  // dim x N
  std::vector<int> labels;
  int size() const { return static_cast<int>(labels.size()); }
};

double accuracy(const PrunedArchitecture& arch, const LabelledEmbeddings& data);

struct AdaptConfig {
  ClassifierTrainConfig train{.epochs = 100};
  /// Fraction of each adaptation batch drawn from the replay buffer.
  double replay_fraction = 0.5;
};

struct AdaptationReport {
  double pre_seen = 0.0;
  double pre_unseen = 0.0;
  double post_seen = 0.0;
  double post_unseen = 0.0;
  double retrain_seconds = 0.0;
};

/// Lightweight retraining of a pruned classifier on a new variant, mixing
/// replayed samples of the previously seen variants into every batch.
AdaptationReport adapt(PrunedArchitecture& arch, const LabelledEmbeddings& new_variant,
                       const LabelledEmbeddings& replay, const LabelledEmbeddings& seen_eval,
                       const LabelledEmbeddings& unseen_eval, const AdaptConfig& cfg);

// Architecture file: `<stem>.json` lists op kinds and dims per layer, the
// weights live in `<stem>.bin` (magic "rdetect-arch v1").
void save_architecture(const std::string& json_path, const PrunedArchitecture& arch);
PrunedArchitecture load_architecture(const std::string& json_path);

}  // namespace rdetect::nas
