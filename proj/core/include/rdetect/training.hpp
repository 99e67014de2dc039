#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rdetect/encoder.hpp"
#include "rdetect/loss.hpp"
#include "rdetect/trace.hpp"

namespace rdetect::training {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;

  /// Sizes the moment buffers to mirror `params`; existing state is reset.
  void init(std::span<const std::span<double>> params);
  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update. Initializes `state` on first use.
void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state);

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm);

std::vector<std::span<const double>> const_views(const std::vector<std::span<double>>& v);

struct TrainConfig {
  int epochs = 400;
  int batch_size = 16;
  int batches_per_epoch = 3;
  std::uint64_t seed = 1;
  int hidden_dim = 64;
  int layers = 3;
  int window_width = 10;
  int stride = 10;
  double modified_positive_probability = 0.5;
  double clip_norm = 5.0;
  AdamConfig adam;
  loss::LossWeights weights;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  loss::LossBreakdown breakdown;
  double delta = 0.0;
  bool operator==(const EpochLog& o) const {
    return epoch == o.epoch && breakdown.pair == o.breakdown.pair && breakdown.cluster == o.breakdown.cluster &&
           breakdown.latency == o.breakdown.latency && breakdown.total == o.breakdown.total && delta == o.delta;
  }
};

/// Everything needed to resume encoder training exactly.
struct TrainingCheckpoint {
  encoder::EncoderParams params;
  AdamState adam;
  int epochs_done = 0;
  std::vector<EpochLog> log;
};

std::string serialize(const TrainingCheckpoint& ckpt);
TrainingCheckpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const TrainingCheckpoint& ckpt);
TrainingCheckpoint load_checkpoint(const std::string& path);

/// Contrastive pre-training of the GRU encoder on the weighted objective.
/// Epoch e draws its batches from an RNG keyed by (seed, e), so a resumed
/// run replays the uninterrupted one step for step.
class EncoderTrainer {
 public:
  EncoderTrainer(const trace::Dataset& data, TrainConfig cfg);
  EncoderTrainer(const trace::Dataset& data, TrainConfig cfg, TrainingCheckpoint resume);

  /// Runs until `cfg.epochs` epochs are done or `max_epochs` more have run.
  void run(int max_epochs = -1);
  void run_epoch();

  int epochs_done() const { return state_.epochs_done; }
  const encoder::EncoderParams& params() const { return state_.params; }
  const std::vector<EpochLog>& log() const { return state_.log; }
  const TrainingCheckpoint& checkpoint() const { return state_; }

 private:
  TrainConfig cfg_;
  loss::TripletSampler sampler_;
  TrainingCheckpoint state_;
};

struct EncoderTrainResult {
  encoder::EncoderParams params;
  std::vector<EpochLog> log;
};

EncoderTrainResult train_encoder(const trace::Dataset& data, const TrainConfig& cfg);

/// CSV with header `epoch,pair,cluster,latency,total,delta`.
std::string format_training_log(const std::vector<EpochLog>& log);

}  // namespace rdetect::training
