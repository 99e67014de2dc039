// Acceptance suite: one PASS/FAIL line per criterion. `--only 1,4` runs a
// subset; the exit code is non-zero when any selected criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "rdetect/binary_io.hpp"
#include "rdetect/distance.hpp"
#include "rdetect/eval.hpp"
#include "rdetect/loss.hpp"
#include "rdetect/pipeline.hpp"

using namespace rdetect;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Shared desk-scale setup: default generator and pipeline, fold 0 held out.
struct Split {
  trace::Dataset data;
  std::vector<const trace::RawTrace*> train, test;
};

Split default_split(std::uint64_t seed) {
  Split s;
  s.data = trace::build_dataset(trace::GeneratorConfig{}, seed);
  const auto folds = trace::assign_folds(s.data, 5, seed);
  for (std::size_t i = 0; i < folds.size(); ++i) (folds[i] == 0 ? s.test : s.train).push_back(&s.data.traces[i]);
  return s;
}

// ---------------------------------------------------------------------------

Outcome c1_dtw_oracle() {
  const auto t0 = Clock::now();
  int pairs = 0, mismatches = 0;
  double cost_gap = 0.0;
  for (std::uint64_t seed = 0; seed < 250; ++seed) {
    auto rng = keyed_rng({seed, 0xACC1});
    const int ta = uniform_int(rng, 1, 6), tb = uniform_int(rng, 1, 6);
    const auto a = oracle::random_sequence(rng, 8, ta);
    const auto b = oracle::random_sequence(rng, 8, tb);
    const auto costs = distance::pairwise_costs(a, b);
    // The library's local costs against a plain triple loop.
    const auto ref = oracle::squared_costs(a.states, b.states);
    cost_gap = std::max(cost_gap, (costs - ref).cwiseAbs().maxCoeff());
    if (distance::dtw(a, b).final_cost != oracle::min_path_cost(costs)) ++mismatches;
    ++pairs;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && cost_gap < 1e-12 && secs < 10.0,
          fmt("%d pairs (T<=6), %d mismatches vs path enumeration, local-cost gap %.1e, %.2f s", pairs, mismatches,
              cost_gap, secs)};
}

Outcome c2_online_batch() {
  int pairs = 0, prefixes = 0, bad = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    auto rng = keyed_rng({seed, 0xACC2});
    const auto ref = oracle::random_sequence(rng, 8, uniform_int(rng, 1, 15));
    const auto stream = oracle::random_sequence(rng, 8, uniform_int(rng, 1, 15));
    distance::OnlineDtw online(ref);
    for (int t = 0; t < stream.length(); ++t) {
      online.append(stream.step(t));
      const auto batch = distance::dtw(HiddenSequence{stream.states.leftCols(t + 1)}, ref);
      const bool same = online.last_row() == batch.cumulative.row(t).transpose() &&
                        online.prefix_costs() == distance::prefix_costs(batch.cumulative) &&
                        online.last_row()(ref.length() - 1) == batch.final_cost;
      bad += !same;
      ++prefixes;
    }
    ++pairs;
  }
  return {bad == 0, fmt("%d pairs, %d prefixes, %d differ from batch", pairs, prefixes, bad)};
}

Outcome c3_stretch() {
  int sequences = 0, nonzero = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    auto rng = keyed_rng({seed, 0xACC3});
    const auto h = oracle::random_sequence(rng, 8, uniform_int(rng, 1, 20));
    std::vector<int> counts;
    for (int t = 0; t < h.length(); ++t) counts.push_back(uniform_int(rng, 1, 3));
    const auto s = oracle::stretch(h, counts);
    nonzero += distance::dtw(h, s).distance != 0.0;
    nonzero += distance::dtw(s, h).distance != 0.0;
    ++sequences;
  }
  return {nonzero == 0, fmt("%d sequences, factors 1..3, %d nonzero distances", sequences, nonzero)};
}

// ---------------------------------------------------------------------------

double max_fd_error(std::span<double> params, std::span<const double> analytic, const std::function<double()>& f) {
  return oracle::max_relative_error(oracle::central_differences(params, f), analytic);
}

trace::TraceSequence toy_sequence(Rng& rng, ProgramClass label, int T) {
  trace::TraceSequence s;
  s.label = label;
  for (int t = 0; t < T; ++t) s.windows.push_back({oracle::random_matrix(rng, 2, 2), t, 2 * t});
  return s;
}

Outcome c4_gradients() {
  const auto t0 = Clock::now();
  constexpr int kSeeds = 20;
  double gru = 0.0, soft = 0.0, cluster = 0.0, latency = 0.0, e2e = 0.0;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    auto rng = keyed_rng({s, 0xACC4});
    {
      auto p = encoder::EncoderParams::random(4, 4, s);
      for (auto t : p.tensors())
        for (double& v : t) v *= 2.0;
      Eigen::MatrixXd x = oracle::random_matrix(rng, 4, 3, 1.5);
      const Eigen::MatrixXd g = oracle::random_matrix(rng, 4, 3);
      auto f = [&] { return (encoder::gru_forward(p, x).hidden.states.array() * g.array()).sum(); };
      const auto back = encoder::gru_backward(p, encoder::gru_forward(p, x).tape, g);
      auto params = p.tensors();
      const auto grads = back.param_grads.tensors();
      for (std::size_t k = 0; k < params.size(); ++k) gru = std::max(gru, max_fd_error(params[k], grads[k], f));
      gru = std::max(gru, max_fd_error(std::span<double>(x.data(), x.size()),
                                       std::span<const double>(back.input_grads.data(), x.size()), f));
    }
    {
      Eigen::MatrixXd c = oracle::random_matrix(rng, uniform_int(rng, 1, 6), uniform_int(rng, 1, 6)).cwiseAbs();
      const double gamma = uniform(rng, 0.05, 2.0);
      const auto r = distance::soft_dtw(c, gamma);
      soft = std::max(soft, max_fd_error(std::span<double>(c.data(), c.size()),
                                         std::span<const double>(r.grad_costs.data(), c.size()),
                                         [&] { return distance::soft_dtw(c, gamma).soft_cost; }));
    }
    {
      Eigen::MatrixXd e = oracle::random_matrix(rng, 4, 6);
      std::vector<ProgramClass> labels;
      for (int i = 0; i < 6; ++i) labels.push_back(i % 3 == 0 ? ProgramClass::Ransomware : ProgramClass::Benign);
      const auto r = loss::cluster_loss(e, labels);
      cluster = std::max(cluster, max_fd_error(std::span<double>(e.data(), e.size()),
                                               std::span<const double>(r.grad.data(), e.size()),
                                               [&] { return loss::cluster_loss(e, labels).loss; }));
    }
    {
      const int T = uniform_int(rng, 2, 10);
      std::vector<double> c(T);
      for (auto& v : c) v = uniform(rng, 0.0, 3.0);
      const double delta = uniform(rng, 0.5, 2.0), tau = uniform(rng, 0.05, 1.0);
      const auto r = loss::latency_loss_soft(c, delta, tau, T);
      latency = std::max(latency,
                         max_fd_error(c, r.grad, [&] { return loss::latency_loss_soft(c, delta, tau, T).loss; }));
    }
    {
      auto params = encoder::EncoderParams::random(4, 4, s);
      for (auto t : params.tensors())
        for (double& v : t) v *= 3.0;
      std::vector<loss::Triplet> batch;
      for (int b = 0; b < 2; ++b) {
        const auto cls = b % 2 ? ProgramClass::Ransomware : ProgramClass::Benign;
        const auto other = b % 2 ? ProgramClass::Benign : ProgramClass::Ransomware;
        batch.push_back({toy_sequence(rng, cls, 3), toy_sequence(rng, cls, 3), toy_sequence(rng, other, 3), false});
      }
      loss::LossWeights w;
      w.margin = 5.0;
      w.delta = loss::calibrate_delta(params, batch, 0.5);
      w.tau = 0.5;
      const auto ev = loss::evaluate_batch(params, batch, w, true);
      const auto grads = ev.grads.tensors();
      auto views = params.tensors();
      for (std::size_t k = 0; k < views.size(); ++k)
        e2e = std::max(e2e, max_fd_error(views[k], grads[k], [&] {
                         return loss::evaluate_batch(params, batch, w, false).breakdown.total;
                       }));
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = gru < 1e-4 && soft < 1e-4 && cluster < 1e-4 && latency < 1e-4 && e2e < 1e-3 && secs < 120.0;
  return {pass, fmt("%d seeds; max rel err gru %.1e, soft-dtw %.1e, cluster %.1e, latency %.1e, end-to-end %.1e; "
                    "%.1f s",
                    kSeeds, gru, soft, cluster, latency, e2e, secs)};
}

Outcome c5_soft_limit() {
  double worst = 0.0;
  int non_monotone = 0, instances = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto rng = keyed_rng({seed, 0xACC5});
    const auto a = oracle::random_sequence(rng, 4, uniform_int(rng, 1, 6));
    const auto b = oracle::random_sequence(rng, 4, uniform_int(rng, 1, 6));
    const auto c = distance::pairwise_costs(a, b);
    worst = std::max(worst, std::abs(distance::soft_dtw(c, 1e-6).soft_cost - distance::dtw(a, b).final_cost));
    double prev = std::numeric_limits<double>::infinity();
    for (double gamma : {0.001, 0.01, 0.1, 1.0, 10.0}) {
      const double v = distance::soft_dtw(c, gamma).soft_cost;
      non_monotone += v > prev;
      prev = v;
    }
    ++instances;
  }
  return {worst < 1e-3 && non_monotone == 0,
          fmt("%d instances, max |soft(1e-6) - hard| = %.1e, %d monotonicity violations", instances, worst,
              non_monotone)};
}

// ---------------------------------------------------------------------------

Outcome c6_accuracy() {
  const auto t0 = Clock::now();
  const auto ds = trace::build_dataset(trace::GeneratorConfig{}, 1);
  const auto r = eval::eval_accuracy(ds, pipeline::PipelineConfig{}, 5, 1);
  const auto& m = r.aggregate.m;
  std::string folds;
  for (const auto& f : r.folds) folds += fmt(" %.4f", f.m.accuracy);
  return {m.accuracy >= 0.95 && m.f1 >= 0.95,
          fmt("%zu traces, 5-fold: accuracy %.4f, F1 %.4f (fold accuracies%s), %.0f s", ds.traces.size(), m.accuracy,
              m.f1, folds.c_str(), seconds_since(t0))};
}

Outcome c7_latency() {
  int wins = 0;
  std::string rows;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = default_split(seed);
    pipeline::PipelineConfig full;
    auto ablation = full;
    ablation.encoder.weights.lambda_latency = 0.0;
    const auto pf = pipeline::build_pipeline(s.train, full, seed);
    const auto pa = pipeline::build_pipeline(s.train, ablation, seed);
    const auto r = eval::eval_latency(pf.model, pa.model, s.test, detector::DetectorConfig{});
    const double ratio = r.ratio.value_or(0.0);
    wins += ratio >= 2.0;
    rows += fmt(" [seed %llu: full %.0f ms, ablation %.0f ms, ratio %.2f]", static_cast<unsigned long long>(seed),
                r.full_total.mean_latency_ms, r.ablation_total.mean_latency_ms, ratio);
    std::printf("  latency seed %llu: full %.1f ms (%d detected, %d early), ablation %.1f ms (%d detected), "
                "ratio %.3f\n",
                static_cast<unsigned long long>(seed), r.full_total.mean_latency_ms, r.full_total.detected,
                r.full_total.early, r.ablation_total.mean_latency_ms, r.ablation_total.detected, ratio);
    std::fflush(stdout);
  }
  return {wins >= 3, fmt("ratio >= 2 in %d of 5 seeds;%s", wins, rows.c_str())};
}

Outcome c8_robustness() {
  const auto s = default_split(1);
  const pipeline::PipelineConfig cfg;
  const auto p = pipeline::build_pipeline(s.train, cfg, 1);
  const auto r = eval::eval_robustness(p.model, s.test, 20, 1, cfg.encoder.window_width, cfg.encoder.stride);
  const double gap = std::abs(r.clean_accuracy - r.median);
  return {gap <= 0.05, fmt("clean %.4f, median over 20 evasive trials %.4f (min %.4f, max %.4f), gap %.1f points",
                           r.clean_accuracy, r.median, r.min, r.max, 100.0 * gap)};
}

Outcome c9_adaptivity() {
  int improved = 0, kept = 0, faster = 0;
  std::string rows;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = eval::eval_adaptivity(trace::GeneratorConfig{}, pipeline::PipelineConfig{}, eval::AdaptivityConfig{},
                                         seed);
    const auto& a = r.result;
    improved += a.post_unseen > a.pre_unseen;
    kept += std::abs(a.post_seen - a.pre_seen) <= 0.03;
    faster += a.retrain_seconds < r.full_retrain_seconds;
    rows += fmt(" [seed %llu: unseen %.3f->%.3f, seen %.3f->%.3f, adapt %.1f s vs retrain %.1f s]",
                static_cast<unsigned long long>(seed), a.pre_unseen, a.post_unseen, a.pre_seen, a.post_seen,
                a.retrain_seconds, r.full_retrain_seconds);
  }
  return {improved >= 4 && kept == 5 && faster == 5,
          fmt("unseen improved %d/5, seen within 3 points %d/5, adapt faster %d/5;%s", improved, kept, faster,
              rows.c_str())};
}

// Replays the script on the initial files up to (not including) `window`.
std::map<std::string, detector::Bytes> replay(std::map<std::string, detector::Bytes> files, const detector::FsScript& script, int window) {
  for (const auto& op : script)
    if (op.window < window) files[op.path] = op.bytes;
  return files;
}

Outcome c10_rollback() {
  const auto s = default_split(1);
  const pipeline::PipelineConfig cfg;
  const auto p = pipeline::build_pipeline(s.train, cfg, 1);
  const detector::DetectorConfig dc;
  const detector::WorkloadConfig wl;
  int sessions = 0, exact = 0, encrypted = 0;
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    const auto& t = *s.test[i];
    if (t.label != ProgramClass::Ransomware) continue;
    const auto files = detector::make_initial_files(wl, 1000 + i);
    const auto script = detector::make_workload(t, files, dc, wl, 2000 + i);
    const auto out = detector::run_session(t, p.model, dc, script, detector::VirtualFs(files));
    if (!out.event.alert_window) continue;
    ++sessions;
    const int span_start = *out.event.alert_window - dc.confirm_windows + 1;
    const auto expected = replay(files, script, span_start);
    bool touched = false;
    for (const auto& op : script) touched |= op.window >= span_start && op.window <= *out.event.alert_window;
    encrypted += touched;
    exact += out.fs.files() == expected && out.event.restore.lost.empty();
  }
  return {sessions >= 20 && exact == sessions,
          fmt("%d detected sessions (%d with attack writes inside the confirmation span), %d bit-exact restores",
              sessions, encrypted, exact)};
}

// Every artifact a pipeline run writes, as bytes.
std::map<std::string, std::string> artifacts(const pipeline::Pipeline& p,
                                             const std::vector<const trace::RawTrace*>& test) {
  std::map<std::string, std::string> out;
  out["encoder"] = encoder::serialize(p.model.encoder);
  out["encoder_log"] = training::format_training_log(p.encoder_log);
  const auto dir = std::filesystem::temp_directory_path() / "rdetect_acceptance_c11";
  std::filesystem::create_directories(dir);
  nas::save_architecture((dir / "arch.json").string(), p.model.classifier);
  for (const auto& e : std::filesystem::directory_iterator(dir)) out["arch/" + e.path().filename().string()] =
      io::read_file(e.path().string());
  std::filesystem::remove_all(dir);
  std::string reports;
  for (std::size_t i = 0; i < test.size(); i += 7)
    reports += detector::session_report_json(
        detector::run_session(*test[i], p.model, detector::DetectorConfig{}, {}, detector::VirtualFs{}).event);
  out["sessions"] = reports;
  out["robustness"] = eval::format_robustness_json(eval::eval_robustness(p.model, test, 3, 1, 10, 10));
  return out;
}

Outcome c11_determinism() {
  const auto s = default_split(1);
  const pipeline::PipelineConfig cfg;
  const auto a = artifacts(pipeline::build_pipeline(s.train, cfg, 1), s.test);
  const auto b = artifacts(pipeline::build_pipeline(s.train, cfg, 1), s.test);
  // A fresh dataset build must also be byte-identical.
  const auto d1 = trace::build_dataset(trace::GeneratorConfig{}, 1);
  bool data_same = d1.traces.size() == s.data.traces.size();
  for (std::size_t i = 0; data_same && i < d1.traces.size(); ++i)
    data_same = trace::format_trace(d1.traces[i]) == trace::format_trace(s.data.traces[i]);
  std::size_t bytes = 0;
  for (const auto& [k, v] : a) bytes += v.size();
  return {a == b && data_same,
          fmt("%zu artifacts (%zu bytes) from two runs %s; dataset rebuild %s", a.size(), bytes,
              a == b ? "identical" : "differ", data_same ? "identical" : "differs")};
}

Outcome c12_prune_forward() {
  double worst = 0.0;
  int inputs = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto net = nas::make_supernet(64, nas::SupernetConfig{}, s);
    auto rng = keyed_rng({s, 0xACCC});
    for (auto& a : net.alpha)
      for (Eigen::Index o = 0; o < a.size(); ++o) a[o] = uniform(rng, -1.0, 1.0);
    const auto x = oracle::random_matrix(rng, 64, 100, 2.0);
    std::vector<int> y(100);
    for (int j = 0; j < 100; ++j) y[j] = j % 2;
    const auto arch = nas::prune(net, x, y);
    worst = std::max(worst, (arch.forward(x) - nas::supernet_forward(net, x, nas::one_hot_mixture(net, arch)))
                                .cwiseAbs()
                                .maxCoeff());
    inputs += 100;
  }
  return {worst <= 1e-12, fmt("%d inputs over 10 pruned supernets, max |diff| %.1e", inputs, worst)};
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Criterion numbers to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all = {
      {1, "dtw-oracle", c1_dtw_oracle},        {2, "online-batch", c2_online_batch},
      {3, "stretch-invariance", c3_stretch},   {4, "gradients", c4_gradients},
      {5, "soft-dtw-limit", c5_soft_limit},    {6, "accuracy", c6_accuracy},
      {7, "latency-ablation", c7_latency},     {8, "robustness", c8_robustness},
      {9, "adaptivity", c9_adaptivity},        {10, "rollback", c10_rollback},
      {11, "determinism", c11_determinism},    {12, "prune-forward", c12_prune_forward},
  };
  const std::set<int> wanted(only.begin(), only.end());
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
