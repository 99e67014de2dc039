#include "rdetect/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "rdetect/error.hpp"
#include "rdetect/rng.hpp"

namespace rdetect::pipeline {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

Eigen::MatrixXd embed(const encoder::EncoderParams& params, const std::vector<const trace::RawTrace*>& traces,
                      int width, int stride) {
  Eigen::MatrixXd out(params.hidden_dim(), static_cast<Eigen::Index>(traces.size()));
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto seq = trace::segment_windows(*traces[i], width, stride);
    out.col(static_cast<Eigen::Index>(i)) = encoder::gru_forward(params, seq).hidden.pooled();
  }
  return out;
}

nas::LabelledEmbeddings embed_labelled(const encoder::EncoderParams& params,
                                       const std::vector<const trace::RawTrace*>& traces, int width, int stride) {
  nas::LabelledEmbeddings out;
  out.embeddings = embed(params, traces, width, stride);
  for (const auto* t : traces) out.labels.push_back(static_cast<int>(t->label));
  return out;
}

nas::LabelledEmbeddings classifier_training_set(const encoder::EncoderParams& params,
                                                const std::vector<const trace::RawTrace*>& traces, int width,
                                                int stride, int prefix_samples, std::uint64_t seed) {
  if (prefix_samples < 0) throw InvalidArgument("prefix sample count must be non-negative");
  nas::LabelledEmbeddings out;
  const auto n = static_cast<Eigen::Index>(traces.size());
  out.embeddings.resize(params.hidden_dim(), n * (1 + prefix_samples));
  Eigen::Index col = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto* t = traces[static_cast<std::size_t>(i)];
    const auto seq = trace::segment_windows(*t, width, stride);
    const auto hidden = encoder::gru_forward(params, seq).hidden;
    out.embeddings.col(col++) = hidden.pooled();
    out.labels.push_back(static_cast<int>(t->label));
    auto rng = keyed_rng({seed, static_cast<std::uint64_t>(i), 0x9E1FULL});
    const auto infect = t->infect_tick();
    for (int k = 0; k < prefix_samples; ++k) {
      const int len = uniform_int(rng, 1, std::max(1, seq.length() - 1));
      out.embeddings.col(col++) = hidden.states.leftCols(len).rowwise().mean();
      const int last_tick = (len - 1) * stride + width - 1;
      out.labels.push_back(infect && last_tick >= *infect ? 1 : 0);
    }
  }
  return out;
}

std::vector<const trace::RawTrace*> select(const trace::Dataset& ds, const std::vector<int>& indices) {
  std::vector<const trace::RawTrace*> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(&ds.traces.at(static_cast<std::size_t>(i)));
  return out;
}

std::vector<const trace::RawTrace*> all_traces(const trace::Dataset& ds) {
  std::vector<const trace::RawTrace*> out;
  for (const auto& t : ds.traces) out.push_back(&t);
  return out;
}

ClassifierResult build_classifier(const nas::LabelledEmbeddings& train, const PipelineConfig& cfg,
                                  std::uint64_t seed) {
  if (train.size() == 0) throw InvalidArgument("classifier training set is empty");
  ClassifierResult res;
  auto t0 = std::chrono::steady_clock::now();
  res.supernet = nas::make_supernet(static_cast<int>(train.embeddings.rows()), cfg.supernet, seed);
  auto search = cfg.search;
  search.seed = seed;
  res.search_history = nas::train_supernet(res.supernet, train.embeddings, train.labels, search);

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = keyed_rng({seed, 0xCA11BULL});
  std::shuffle(order.begin(), order.end(), rng);
  const int n_cal = std::min(cfg.calibration_size, train.size());
  Eigen::MatrixXd cal(train.embeddings.rows(), n_cal);
  std::vector<int> cal_labels(n_cal);
  for (int j = 0; j < n_cal; ++j) {
    cal.col(j) = train.embeddings.col(order[j]);
    cal_labels[j] = train.labels[order[j]];
  }
  res.saliency = nas::saliency(res.supernet, cal, cal_labels);
  res.pruned = nas::prune_with_saliency(res.supernet, res.saliency);
  res.search_seconds = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  res.classifier = res.pruned;
  auto ft = cfg.fine_tune;
  ft.seed = seed + 1;
  res.fine_tune_history = nas::fine_tune(res.classifier, train.embeddings, train.labels, ft);
  res.fine_tune_seconds = seconds_since(t0);
  return res;
}

Pipeline build_pipeline(const std::vector<const trace::RawTrace*>& train, const PipelineConfig& cfg,
                        std::uint64_t seed) {
  if (train.empty()) throw InvalidArgument("pipeline training set is empty");
  Pipeline p;
  trace::Dataset ds;
  ds.traces.reserve(train.size());
  for (const auto* t : train) ds.traces.push_back(*t);

  auto t0 = std::chrono::steady_clock::now();
  auto enc_cfg = cfg.encoder;
  enc_cfg.seed = seed;
  auto enc = training::train_encoder(ds, enc_cfg);
  p.encoder_seconds = seconds_since(t0);
  p.model.encoder = std::move(enc.params);
  p.encoder_log = std::move(enc.log);

  const auto emb = classifier_training_set(p.model.encoder, train, enc_cfg.window_width, enc_cfg.stride,
                                           cfg.prefix_samples, seed);
  p.classifier = build_classifier(emb, cfg, seed);
  p.model.classifier = p.classifier.classifier;
  return p;
}

std::vector<int> predict(const detector::Model& model, const std::vector<const trace::RawTrace*>& traces, int width,
                         int stride) {
  const auto probs = model.classifier.forward(embed(model.encoder, traces, width, stride));
  std::vector<int> out(traces.size());
  for (Eigen::Index j = 0; j < probs.cols(); ++j) out[j] = probs(1, j) > probs(0, j) ? 1 : 0;
  return out;
}

}  // namespace rdetect::pipeline
