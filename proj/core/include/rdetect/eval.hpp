#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rdetect/detector.hpp"
#include "rdetect/pipeline.hpp"
#include "rdetect/trace.hpp"

namespace rdetect::eval {

struct ConfusionCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  long total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
};

struct Metrics {
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  /// Set when the denominator vanished; the value is then reported as 0.
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
};

Metrics metrics(const ConfusionCounts& c);
/// Positive class is 1 (ransomware).
ConfusionCounts confusion(const std::vector<int>& truth, const std::vector<int>& predicted);

struct MetricRow {
  std::string name;
  Metrics m;
  ConfusionCounts counts;
};

struct RunMeta {
  std::string version;
  std::string config_hash;
  std::uint64_t seed = 0;
};

struct CaseStudyReport {
  std::vector<MetricRow> families;
  MetricRow aggregate;
  /// Pooled-counts metrics for each fold.
  std::vector<MetricRow> folds;
  RunMeta meta;
};

/// Per-fold callback: fold index, trained pipeline, test traces.
using FoldHook =
    std::function<void(int, const pipeline::Pipeline&, const std::vector<const trace::RawTrace*>&)>;

/// k-fold cross-validation: each fold trains on the other folds and tests on
/// itself. Family rows average the per-fold family metrics; the aggregate
/// row is the mean of the family rows.
CaseStudyReport eval_accuracy(const trace::Dataset& dataset, const pipeline::PipelineConfig& cfg, int folds,
                              std::uint64_t seed, const FoldHook& hook = {});

std::string format_case_study_csv(const CaseStudyReport& r);
std::string format_case_study_json(const CaseStudyReport& r);

// ---------------------------------------------------------------------------

struct RobustnessReport {
  double clean_accuracy = 0.0;
  std::vector<double> trials;
  double min = 0.0, median = 0.0, max = 0.0;
  RunMeta meta;
};

double median(std::vector<double> v);

/// Each trial perturbs every test trace with a uniformly drawn evasion kind
/// and an intensity drawn from U(0, max_intensity).
RobustnessReport eval_robustness(const detector::Model& model, const std::vector<const trace::RawTrace*>& test,
                                 int trials, std::uint64_t seed, int width, int stride, double max_intensity = 1.0);

std::string format_robustness_csv(const RobustnessReport& r);
std::string format_robustness_json(const RobustnessReport& r);

// ---------------------------------------------------------------------------

struct LatencyRow {
  std::string model;
  int family = 0;
  double mean_latency_ms = 0.0;
  int detected = 0;
  int undetected = 0;
  int early = 0;
};

struct LatencyReport {
  std::vector<LatencyRow> rows;  // per (model, family)
  LatencyRow full_total, ablation_total;
  /// ablation mean / full mean; empty when either side detected nothing or
  /// the full model's mean is 0.
  std::optional<double> ratio;
  RunMeta meta;
};

/// Mean alert latency over the ransomware traces of `test` for both
/// models. Benign traces contribute no rows; undetected traces are counted
/// separately and left out of the means.
LatencyReport eval_latency(const detector::Model& full, const detector::Model& ablation,
                           const std::vector<const trace::RawTrace*>& test, const detector::DetectorConfig& cfg);

std::string format_latency_csv(const LatencyReport& r);
std::string format_latency_json(const LatencyReport& r);

// ---------------------------------------------------------------------------

struct AdaptivityConfig {
  int seen_families = 3;
  /// Share of the unseen-family traces handed to adaptation; the rest is
  /// the unseen evaluation set.
  double adapt_fraction = 0.3;
  /// Share of seen-family traces held out for evaluation.
  double seen_test_fraction = 0.2;
  nas::AdaptConfig adapt;
};

struct AdaptivityReport {
  std::vector<int> seen, unseen;
  nas::AdaptationReport result;
  double full_retrain_seconds = 0.0;
  RunMeta meta;
};

/// Trains on a random subset of families, then adapts the classifier to the
/// remaining ones with replay of the seen training samples.
AdaptivityReport eval_adaptivity(const trace::GeneratorConfig& gen, const pipeline::PipelineConfig& cfg,
                                 const AdaptivityConfig& acfg, std::uint64_t seed);

std::string format_adaptivity_csv(const AdaptivityReport& r);
std::string format_adaptivity_json(const AdaptivityReport& r);

// ---------------------------------------------------------------------------

struct OverheadReport {
  std::size_t encoder_parameters = 0;
  std::size_t classifier_parameters = 0;
  double encoder_ms = 0.0, classifier_ms = 0.0, total_ms = 0.0;  // per sample
  std::optional<double> encoder_train_seconds, classifier_train_seconds;
  int samples = 0;
  RunMeta meta;
};

/// Per-sample inference time of each stage over `samples`; the total is the
/// sum of the two timed stages.
OverheadReport eval_overhead(const detector::Model& model, const std::vector<const trace::RawTrace*>& samples,
                             int width, int stride);

std::string format_overhead_csv(const OverheadReport& r);
std::string format_overhead_json(const OverheadReport& r);

// ---------------------------------------------------------------------------

/// One row per trace: index, family, label, then the pooled embedding.
std::string export_embeddings_csv(const encoder::EncoderParams& params,
                                  const std::vector<const trace::RawTrace*>& traces, int width, int stride);

}  // namespace rdetect::eval
