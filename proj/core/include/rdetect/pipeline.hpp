#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "rdetect/detector.hpp"
#include "rdetect/nas.hpp"
#include "rdetect/trace.hpp"
#include "rdetect/training.hpp"

namespace rdetect::pipeline {

/// Encoder pre-training, supernet search, pruning and fine-tuning in one
/// place, with the knobs of each stage.
struct PipelineConfig {
  training::TrainConfig encoder;
  nas::SupernetConfig supernet;
  nas::ClassifierTrainConfig search;
  nas::ClassifierTrainConfig fine_tune{.epochs = 100};
  int calibration_size = 256;
  /// Extra prefix-pooled samples per training trace for the classifier, so
  /// that the streaming detector scores prefixes it has seen the like of.
  int prefix_samples = 1;
};

/// Mean-pooled hidden state per trace, one column each.
Eigen::MatrixXd embed(const encoder::EncoderParams& params, const std::vector<const trace::RawTrace*>& traces,
                      int width, int stride);
nas::LabelledEmbeddings embed_labelled(const encoder::EncoderParams& params,
                                       const std::vector<const trace::RawTrace*>& traces, int width, int stride);

/// Full-trace embeddings plus `prefix_samples` mean-pooled prefixes per
/// trace. A prefix is labelled ransomware only once its last window reaches
/// the first infect tick.
nas::LabelledEmbeddings classifier_training_set(const encoder::EncoderParams& params,
                                                const std::vector<const trace::RawTrace*>& traces, int width,
                                                int stride, int prefix_samples, std::uint64_t seed);

std::vector<const trace::RawTrace*> select(const trace::Dataset& ds, const std::vector<int>& indices);
std::vector<const trace::RawTrace*> all_traces(const trace::Dataset& ds);

struct ClassifierResult {
  nas::Supernet supernet;
  nas::PrunedArchitecture pruned;     // straight after pruning
  nas::PrunedArchitecture classifier;  // after fine-tuning
  std::vector<Eigen::VectorXd> saliency;
  nas::TrainHistory search_history;
  nas::TrainHistory fine_tune_history;
  double search_seconds = 0.0;
  double fine_tune_seconds = 0.0;
};

/// Supernet training, pruning on a seeded calibration subset, fine-tuning.
ClassifierResult build_classifier(const nas::LabelledEmbeddings& train, const PipelineConfig& cfg,
                                  std::uint64_t seed);

struct Pipeline {
  detector::Model model;
  std::vector<training::EpochLog> encoder_log;
  ClassifierResult classifier;
  double encoder_seconds = 0.0;

  double train_seconds() const {
    return encoder_seconds + classifier.search_seconds + classifier.fine_tune_seconds;
  }
};

/// Full training run on `train`; every stage is seeded from `seed`.
Pipeline build_pipeline(const std::vector<const trace::RawTrace*>& train, const PipelineConfig& cfg,
                        std::uint64_t seed);

/// Hard 0/1 decision from the classifier on full-trace embeddings.
std::vector<int> predict(const detector::Model& model, const std::vector<const trace::RawTrace*>& traces, int width,
                         int stride);

}  // namespace rdetect::pipeline
