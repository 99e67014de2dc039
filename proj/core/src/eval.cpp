#include "rdetect/eval.hpp"

#include <algorithm>
#include <chrono>
#include <charconv>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "rdetect/error.hpp"
#include "rdetect/rng.hpp"

namespace rdetect::eval {

namespace {

using Clock = std::chrono::steady_clock;

std::string num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

nlohmann::json meta_json(const RunMeta& m) {
  return {{"version", m.version}, {"config_hash", m.config_hash}, {"seed", m.seed}};
}

std::string meta_comment(const RunMeta& m) {
  return "# version=" + m.version + " config_hash=" + m.config_hash + " seed=" + std::to_string(m.seed) + "\n";
}

nlohmann::json row_json(const MetricRow& r) {
  return {{"name", r.name},
          {"accuracy", r.m.accuracy},
          {"precision", r.m.precision},
          {"recall", r.m.recall},
          {"f1", r.m.f1},
          {"precision_undefined", r.m.precision_undefined},
          {"recall_undefined", r.m.recall_undefined},
          {"f1_undefined", r.m.f1_undefined},
          {"tp", r.counts.tp},
          {"fp", r.counts.fp},
          {"fn", r.counts.fn},
          {"tn", r.counts.tn}};
}

}  // namespace

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

Metrics metrics(const ConfusionCounts& c) {
  if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0) throw InvalidArgument("confusion counts must be non-negative");
  if (c.total() == 0) throw InvalidArgument("metrics need at least one sample");
  Metrics m;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  if (c.tp + c.fp == 0)
    m.precision_undefined = true;
  else
    m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn == 0)
    m.recall_undefined = true;
  else
    m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (m.precision_undefined || m.recall_undefined || m.precision + m.recall == 0.0)
    m.f1_undefined = true;
  else
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

ConfusionCounts confusion(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.size() != predicted.size()) throw InvalidArgument("truth/prediction size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 1)
      (predicted[i] == 1 ? c.tp : c.fn)++;
    else
      (predicted[i] == 1 ? c.fp : c.tn)++;
  }
  return c;
}

CaseStudyReport eval_accuracy(const trace::Dataset& dataset, const pipeline::PipelineConfig& cfg, int folds,
                              std::uint64_t seed, const FoldHook& hook) {
  if (folds < 2) throw InvalidArgument("cross-validation needs at least two folds");
  const auto fold_of = trace::assign_folds(dataset, folds, seed);
  std::set<int> families;
  for (const auto& t : dataset.traces) families.insert(t.family_id);

  std::map<int, std::vector<Metrics>> per_family;
  std::map<int, ConfusionCounts> family_counts;
  CaseStudyReport report;
  for (int k = 0; k < folds; ++k) {
    std::vector<int> train_idx, test_idx;
    for (std::size_t i = 0; i < fold_of.size(); ++i) (fold_of[i] == k ? test_idx : train_idx).push_back(static_cast<int>(i));
    const auto train = pipeline::select(dataset, train_idx);
    const auto test = pipeline::select(dataset, test_idx);
    int classes[2] = {0, 0};
    for (const auto* t : test) ++classes[static_cast<int>(t->label)];
    if (classes[0] == 0 || classes[1] == 0)
      throw InvalidArgument("fold " + std::to_string(k) + " lacks one of the classes; use fewer folds");

    const auto p = pipeline::build_pipeline(train, cfg, seed * 131 + static_cast<std::uint64_t>(k));
    const auto pred = pipeline::predict(p.model, test, cfg.encoder.window_width, cfg.encoder.stride);
    std::map<int, std::pair<std::vector<int>, std::vector<int>>> by_family;
    std::vector<int> truth;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const int y = static_cast<int>(test[i]->label);
      truth.push_back(y);
      by_family[test[i]->family_id].first.push_back(y);
      by_family[test[i]->family_id].second.push_back(pred[i]);
    }
    for (const auto& [fam, tp] : by_family) {
      const auto c = confusion(tp.first, tp.second);
      per_family[fam].push_back(metrics(c));
      family_counts[fam] += c;
    }
    const auto c = confusion(truth, pred);
    report.folds.push_back({"fold" + std::to_string(k), metrics(c), c});
    if (hook) hook(k, p, test);
  }

  MetricRow agg{"average", {}, {}};
  for (const auto& [fam, list] : per_family) {
    MetricRow row{"family" + std::to_string(fam), {}, family_counts[fam]};
    const double n = static_cast<double>(list.size());
    for (const auto& m : list) {
      row.m.accuracy += m.accuracy / n;
      row.m.precision += m.precision / n;
      row.m.recall += m.recall / n;
      row.m.f1 += m.f1 / n;
      row.m.precision_undefined |= m.precision_undefined;
      row.m.recall_undefined |= m.recall_undefined;
      row.m.f1_undefined |= m.f1_undefined;
    }
    report.families.push_back(row);
  }
  const double nf = static_cast<double>(report.families.size());
  for (const auto& row : report.families) {
    agg.m.accuracy += row.m.accuracy / nf;
    agg.m.precision += row.m.precision / nf;
    agg.m.recall += row.m.recall / nf;
    agg.m.f1 += row.m.f1 / nf;
    agg.m.precision_undefined |= row.m.precision_undefined;
    agg.m.recall_undefined |= row.m.recall_undefined;
    agg.m.f1_undefined |= row.m.f1_undefined;
    agg.counts += row.counts;
  }
  report.aggregate = agg;
  return report;
}

std::string format_case_study_csv(const CaseStudyReport& r) {
  std::string out = meta_comment(r.meta) + "row,accuracy,precision,recall,f1,tp,fp,fn,tn\n";
  auto line = [&](const MetricRow& row) {
    out += row.name + "," + num(row.m.accuracy) + "," + num(row.m.precision) + "," + num(row.m.recall) + "," +
           num(row.m.f1) + "," + std::to_string(row.counts.tp) + "," + std::to_string(row.counts.fp) + "," +
           std::to_string(row.counts.fn) + "," + std::to_string(row.counts.tn) + "\n";
  };
  for (const auto& row : r.families) line(row);
  line(r.aggregate);
  return out;
}

std::string format_case_study_json(const CaseStudyReport& r) {
  nlohmann::json j;
  j["meta"] = meta_json(r.meta);
  j["families"] = nlohmann::json::array();
  for (const auto& row : r.families) j["families"].push_back(row_json(row));
  j["aggregate"] = row_json(r.aggregate);
  j["folds"] = nlohmann::json::array();
  for (const auto& row : r.folds) j["folds"].push_back(row_json(row));
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of an empty list");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

double accuracy_of(const detector::Model& model, const std::vector<const trace::RawTrace*>& traces, int width,
                   int stride) {
  const auto pred = pipeline::predict(model, traces, width, stride);
  int ok = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) ok += pred[i] == static_cast<int>(traces[i]->label);
  return static_cast<double>(ok) / static_cast<double>(traces.size());
}

}  // namespace

RobustnessReport eval_robustness(const detector::Model& model, const std::vector<const trace::RawTrace*>& test,
                                 int trials, std::uint64_t seed, int width, int stride, double max_intensity) {
  if (trials < 1) throw InvalidArgument("robustness needs at least one trial");
  if (test.empty()) throw InvalidArgument("robustness needs test traces");
  RobustnessReport r;
  r.clean_accuracy = accuracy_of(model, test, width, stride);
  for (int k = 0; k < trials; ++k) {
    std::vector<trace::RawTrace> perturbed;
    perturbed.reserve(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
      auto rng = keyed_rng({seed, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i), 0xE7A5ULL});
      trace::Evasion ev;
      ev.kind = static_cast<trace::EvasionKind>(uniform_int(rng, 0, 2));
      ev.intensity = uniform(rng, 0.0, max_intensity);
      perturbed.push_back(trace::apply_evasion(*test[i], ev, rng()));
    }
    std::vector<const trace::RawTrace*> ptrs;
    for (const auto& t : perturbed) ptrs.push_back(&t);
    r.trials.push_back(accuracy_of(model, ptrs, width, stride));
  }
  r.min = *std::min_element(r.trials.begin(), r.trials.end());
  r.max = *std::max_element(r.trials.begin(), r.trials.end());
  r.median = median(r.trials);
  return r;
}

std::string format_robustness_csv(const RobustnessReport& r) {
  std::string out = meta_comment(r.meta) + "trial,accuracy\n";
  out += "clean," + num(r.clean_accuracy) + "\n";
  for (std::size_t k = 0; k < r.trials.size(); ++k) out += std::to_string(k) + "," + num(r.trials[k]) + "\n";
  return out;
}

std::string format_robustness_json(const RobustnessReport& r) {
  nlohmann::json j{{"meta", meta_json(r.meta)}, {"clean_accuracy", r.clean_accuracy}, {"trials", r.trials},
                   {"min", r.min},              {"median", r.median},                 {"max", r.max}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

LatencyReport eval_latency(const detector::Model& full, const detector::Model& ablation,
                           const std::vector<const trace::RawTrace*>& test, const detector::DetectorConfig& cfg) {
  LatencyReport rep;
  const std::pair<const char*, const detector::Model*> models[2] = {{"full", &full}, {"no_latency_loss", &ablation}};
  for (const auto& [name, model] : models) {
    std::map<int, LatencyRow> rows;
    LatencyRow total{name, -1};
    double sum_all = 0.0;
    for (const auto* t : test) {
      if (t->label != ProgramClass::Ransomware) continue;
      auto& row = rows[t->family_id];
      row.model = name;
      row.family = t->family_id;
      const auto out = detector::run_session(*t, *model, cfg, {}, detector::VirtualFs{});
      if (!out.event.latency_ms) {
        ++row.undetected;
        ++total.undetected;
        continue;
      }
      ++row.detected;
      ++total.detected;
      row.early += out.event.early_alert;
      total.early += out.event.early_alert;
      row.mean_latency_ms += *out.event.latency_ms;
      sum_all += *out.event.latency_ms;
    }
    for (auto& [fam, row] : rows) {
      if (row.detected) row.mean_latency_ms /= row.detected;
      rep.rows.push_back(row);
    }
    if (total.detected) total.mean_latency_ms = sum_all / total.detected;
    (std::string(name) == "full" ? rep.full_total : rep.ablation_total) = total;
  }
  if (rep.full_total.detected && rep.ablation_total.detected && rep.full_total.mean_latency_ms > 0.0)
    rep.ratio = rep.ablation_total.mean_latency_ms / rep.full_total.mean_latency_ms;
  return rep;
}

std::string format_latency_csv(const LatencyReport& r) {
  std::string out = meta_comment(r.meta) + "model,family,mean_latency_ms,detected,undetected,early\n";
  auto line = [&](const LatencyRow& row, const std::string& fam) {
    out += row.model + "," + fam + "," + num(row.mean_latency_ms) + "," + std::to_string(row.detected) + "," +
           std::to_string(row.undetected) + "," + std::to_string(row.early) + "\n";
  };
  for (const auto& row : r.rows) line(row, std::to_string(row.family));
  line(r.full_total, "all");
  line(r.ablation_total, "all");
  return out;
}

std::string format_latency_json(const LatencyReport& r) {
  auto row = [](const LatencyRow& x) {
    return nlohmann::json{{"model", x.model},         {"family", x.family},       {"mean_latency_ms", x.mean_latency_ms},
                          {"detected", x.detected}, {"undetected", x.undetected}, {"early", x.early}};
  };
  nlohmann::json j;
  j["meta"] = meta_json(r.meta);
  j["rows"] = nlohmann::json::array();
  for (const auto& x : r.rows) j["rows"].push_back(row(x));
  j["full"] = row(r.full_total);
  j["no_latency_loss"] = row(r.ablation_total);
  j["ratio"] = r.ratio ? nlohmann::json(*r.ratio) : nlohmann::json(nullptr);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

AdaptivityReport eval_adaptivity(const trace::GeneratorConfig& gen, const pipeline::PipelineConfig& cfg,
                                 const AdaptivityConfig& acfg, std::uint64_t seed) {
  std::vector<int> families = gen.family_subset;
  if (families.empty()) {
    families.resize(static_cast<std::size_t>(gen.families));
    std::iota(families.begin(), families.end(), 0);
  }
  if (static_cast<int>(families.size()) < 4 || acfg.seen_families < 1 ||
      acfg.seen_families >= static_cast<int>(families.size()))
    throw InvalidArgument("adaptivity needs at least four families and at least one unseen family");

  AdaptivityReport rep;
  auto rng = keyed_rng({seed, 0xADA0ULL});
  std::shuffle(families.begin(), families.end(), rng);
  rep.seen.assign(families.begin(), families.begin() + acfg.seen_families);
  rep.unseen.assign(families.begin() + acfg.seen_families, families.end());
  std::sort(rep.seen.begin(), rep.seen.end());
  std::sort(rep.unseen.begin(), rep.unseen.end());

  const auto ds = trace::build_dataset(gen, seed, cfg.encoder.window_width);
  std::vector<int> seen_idx, unseen_idx;
  for (std::size_t i = 0; i < ds.traces.size(); ++i) {
    const bool seen = std::count(rep.seen.begin(), rep.seen.end(), ds.traces[i].family_id) > 0;
    (seen ? seen_idx : unseen_idx).push_back(static_cast<int>(i));
  }
  std::shuffle(seen_idx.begin(), seen_idx.end(), rng);
  std::shuffle(unseen_idx.begin(), unseen_idx.end(), rng);
  const auto n_seen_test = static_cast<std::size_t>(std::lround(acfg.seen_test_fraction * seen_idx.size()));
  const auto n_adapt = static_cast<std::size_t>(std::lround(acfg.adapt_fraction * unseen_idx.size()));
  const std::vector<int> seen_test(seen_idx.begin(), seen_idx.begin() + n_seen_test);
  const std::vector<int> seen_train(seen_idx.begin() + n_seen_test, seen_idx.end());
  const std::vector<int> adapt_idx(unseen_idx.begin(), unseen_idx.begin() + n_adapt);
  const std::vector<int> unseen_test(unseen_idx.begin() + n_adapt, unseen_idx.end());
  if (seen_train.empty() || adapt_idx.empty() || unseen_test.empty() || seen_test.empty())
    throw InvalidArgument("adaptivity split left an empty partition; generate more traces");

  const auto p = pipeline::build_pipeline(pipeline::select(ds, seen_train), cfg, seed);
  rep.full_retrain_seconds = p.train_seconds();
  const int w = cfg.encoder.window_width, s = cfg.encoder.stride;
  const auto& enc = p.model.encoder;
  const auto replay = pipeline::embed_labelled(enc, pipeline::select(ds, seen_train), w, s);
  const auto fresh = pipeline::embed_labelled(enc, pipeline::select(ds, adapt_idx), w, s);
  const auto seen_eval = pipeline::embed_labelled(enc, pipeline::select(ds, seen_test), w, s);
  const auto unseen_eval = pipeline::embed_labelled(enc, pipeline::select(ds, unseen_test), w, s);

  auto arch = p.model.classifier;
  auto adapt_cfg = acfg.adapt;
  adapt_cfg.train.seed = seed + 7;
  rep.result = nas::adapt(arch, fresh, replay, seen_eval, unseen_eval, adapt_cfg);
  return rep;
}

std::string format_adaptivity_csv(const AdaptivityReport& r) {
  std::string out = meta_comment(r.meta) + "metric,value\n";
  out += "pre_retraining_seen_accuracy," + num(r.result.pre_seen) + "\n";
  out += "pre_retraining_unseen_accuracy," + num(r.result.pre_unseen) + "\n";
  out += "post_retraining_seen_accuracy," + num(r.result.post_seen) + "\n";
  out += "post_retraining_unseen_accuracy," + num(r.result.post_unseen) + "\n";
  out += "retraining_time_s," + num(r.result.retrain_seconds) + "\n";
  out += "full_retraining_time_s," + num(r.full_retrain_seconds) + "\n";
  return out;
}

std::string format_adaptivity_json(const AdaptivityReport& r) {
  nlohmann::json j{{"meta", meta_json(r.meta)},
                   {"seen_families", r.seen},
                   {"unseen_families", r.unseen},
                   {"pre_retraining_seen_accuracy", r.result.pre_seen},
                   {"pre_retraining_unseen_accuracy", r.result.pre_unseen},
                   {"post_retraining_seen_accuracy", r.result.post_seen},
                   {"post_retraining_unseen_accuracy", r.result.post_unseen},
                   {"retraining_time_s", r.result.retrain_seconds},
                   {"full_retraining_time_s", r.full_retrain_seconds}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

OverheadReport eval_overhead(const detector::Model& model, const std::vector<const trace::RawTrace*>& samples,
                             int width, int stride) {
  if (samples.empty()) throw InvalidArgument("overhead measurement needs samples");
  OverheadReport r;
  r.encoder_parameters = model.encoder.parameter_count();
  r.classifier_parameters = model.classifier.parameter_count();
  r.samples = static_cast<int>(samples.size());
  double enc = 0.0, cls = 0.0;
  volatile double sink = 0.0;  // keeps the timed calls from being elided
  for (const auto* t : samples) {
    const auto seq = trace::segment_windows(*t, width, stride);
    const auto t0 = Clock::now();
    const Eigen::VectorXd pooled = encoder::gru_forward(model.encoder, seq).hidden.pooled();
    const auto t1 = Clock::now();
    const auto probs = model.classifier.forward(pooled);
    const auto t2 = Clock::now();
    sink = sink + probs(1, 0);
    enc += std::chrono::duration<double, std::milli>(t1 - t0).count();
    cls += std::chrono::duration<double, std::milli>(t2 - t1).count();
  }
  r.encoder_ms = enc / r.samples;
  r.classifier_ms = cls / r.samples;
  r.total_ms = r.encoder_ms + r.classifier_ms;
  return r;
}

std::string format_overhead_csv(const OverheadReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  std::string out = meta_comment(r.meta) + "stage,parameters,latency_ms_per_sample,training_time_s\n";
  out += "encoder," + std::to_string(r.encoder_parameters) + "," + num(r.encoder_ms) + "," +
         opt(r.encoder_train_seconds) + "\n";
  out += "classifier," + std::to_string(r.classifier_parameters) + "," + num(r.classifier_ms) + "," +
         opt(r.classifier_train_seconds) + "\n";
  std::optional<double> total_train;
  if (r.encoder_train_seconds && r.classifier_train_seconds)
    total_train = *r.encoder_train_seconds + *r.classifier_train_seconds;
  out += "total," + std::to_string(r.encoder_parameters + r.classifier_parameters) + "," + num(r.total_ms) + "," +
         opt(total_train) + "\n";
  return out;
}

std::string format_overhead_json(const OverheadReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"meta", meta_json(r.meta)},
                   {"samples", r.samples},
                   {"encoder_parameters", r.encoder_parameters},
                   {"classifier_parameters", r.classifier_parameters},
                   {"encoder_ms_per_sample", r.encoder_ms},
                   {"classifier_ms_per_sample", r.classifier_ms},
                   {"total_ms_per_sample", r.total_ms},
                   {"encoder_training_time_s", opt(r.encoder_train_seconds)},
                   {"classifier_training_time_s", opt(r.classifier_train_seconds)}};
  return j.dump(2) + "\n";
}

std::string export_embeddings_csv(const encoder::EncoderParams& params,
                                  const std::vector<const trace::RawTrace*>& traces, int width, int stride) {
  const auto emb = pipeline::embed(params, traces, width, stride);
  std::string out = "index,family,label";
  for (Eigen::Index d = 0; d < emb.rows(); ++d) out += ",e" + std::to_string(d);
  out += "\n";
  for (std::size_t i = 0; i < traces.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(traces[i]->family_id) + "," + to_string(traces[i]->label);
    for (Eigen::Index d = 0; d < emb.rows(); ++d) out += "," + num(emb(d, static_cast<Eigen::Index>(i)));
    out += "\n";
  }
  return out;
}

}  // namespace rdetect::eval
