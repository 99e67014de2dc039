// rdetect: dataset generation, training, search, detection and evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rdetect/binary_io.hpp"
#include "rdetect/config.hpp"
#include "rdetect/detector.hpp"
#include "rdetect/eval.hpp"
#include "rdetect/nas.hpp"
#include "rdetect/pipeline.hpp"
#include "rdetect/training.hpp"

namespace fs = std::filesystem;
using namespace rdetect;

namespace {

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kConfig = 3,
  kData = 4,
  kModel = 5,
  kDiverged = 6,
  kRollback = 7,
};

/// An upstream artifact a command depends on is absent.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::optional<int> threads;
  bool quiet = false;

  bool ablation = false;
  std::string trace_path, script_path, variant_dir, study;
  int limit = -1;
};

struct Context {
  RunConfig cfg;
  std::string hash;
  fs::path out;
  bool quiet = false;

  void log(const std::string& msg) const {
    if (!quiet) std::cerr << msg << "\n";
  }

  std::string meta(const std::string& command) const {
    nlohmann::json j{{"version", kVersion}, {"config_hash", hash}, {"seed", cfg.seed}, {"command", command}};
    return j.dump();
  }

  eval::RunMeta run_meta() const { return {kVersion, hash, cfg.seed}; }

  /// `<stem>_<hash>_s<seed>.<ext>` under reports/.
  fs::path report(const std::string& stem, const std::string& ext) const {
    return out / "reports" / (stem + "_" + hash + "_s" + std::to_string(cfg.seed) + "." + ext);
  }

  fs::path artifact(const std::string& name, bool ablation) const {
    return ablation ? out / "ablation" / name : out / name;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file(path.string(), text);
}

void write_sidecar(const Context& ctx, const fs::path& path, const std::string& command) {
  write_text(path.string() + ".meta.json", nlohmann::json::parse(ctx.meta(command)).dump(2) + "\n");
}

void require(const fs::path& path, const std::string& what, const std::string& producer) {
  if (!fs::exists(path))
    throw MissingArtifact("missing " + what + " at " + path.string() + " (run `" + producer + "` first)");
}

trace::Dataset load_data(const Context& ctx) {
  const auto dir = ctx.out / "dataset";
  require(dir / "manifest.json", "dataset", "rdetect gen");
  return trace::load_dataset(dir);
}

std::pair<std::vector<int>, std::vector<int>> split(const Context& ctx, const trace::Dataset& ds) {
  std::vector<int> train, test;
  for (std::size_t i = 0; i < ds.traces.size(); ++i)
    (ds.folds.at(i) == ctx.cfg.test_fold ? test : train).push_back(static_cast<int>(i));
  if (train.empty() || test.empty()) throw ParseError(ParseError::Kind::MalformedHeader, "dataset split is empty");
  return {train, test};
}

encoder::EncoderParams load_encoder_artifact(const Context& ctx, bool ablation) {
  const auto path = ctx.artifact("encoder.gru3", ablation);
  require(path, ablation ? "ablation encoder checkpoint" : "encoder checkpoint",
          ablation ? "rdetect train-encoder --ablation" : "rdetect train-encoder");
  return encoder::load_encoder(path.string());
}

nas::PrunedArchitecture load_arch_artifact(const Context& ctx, const std::string& name, bool ablation,
                                           const std::string& producer) {
  const auto path = ctx.artifact(name, ablation);
  require(path, (ablation ? "ablation " : "") + std::string("architecture ") + name,
          producer + (ablation ? " --ablation" : ""));
  return nas::load_architecture(path.string());
}

detector::Model load_model(const Context& ctx, bool ablation) {
  detector::Model m;
  m.encoder = load_encoder_artifact(ctx, ablation);
  m.classifier = load_arch_artifact(ctx, "arch.json", ablation, "rdetect fine-tune");
  return m;
}

std::optional<double> read_timing(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  return nlohmann::json::parse(io::read_file(path.string())).at("seconds").get<double>();
}

void write_timing(const fs::path& path, double seconds) {
  write_text(path, nlohmann::json{{"seconds", seconds}}.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

int cmd_gen(const Context& ctx) {
  const auto ds = trace::build_dataset(ctx.cfg.generator, ctx.cfg.seed, ctx.cfg.pipeline.encoder.window_width);
  const auto dir = ctx.out / "dataset";
  if (fs::exists(dir / "traces")) fs::remove_all(dir / "traces");
  trace::save_dataset(dir, ds, ctx.cfg.folds, ctx.meta("gen"), ctx.cfg.seed);
  ctx.log("wrote " + std::to_string(ds.traces.size()) + " traces to " + dir.string());
  return kOk;
}

int cmd_train_encoder(const Context& ctx, bool ablation) {
  const auto ds = load_data(ctx);
  const auto [train_idx, test_idx] = split(ctx, ds);
  trace::Dataset train;
  for (int i : train_idx) train.traces.push_back(ds.traces[i]);
  auto tc = ctx.cfg.pipeline.encoder;
  tc.seed = ctx.cfg.seed;
  if (ablation) tc.weights.lambda_latency = 0.0;

  const auto t0 = std::chrono::steady_clock::now();
  training::EncoderTrainer trainer(train, tc);
  for (int e = 0; e < tc.epochs; ++e) {
    trainer.run_epoch();
    const auto& row = trainer.log().back();
    if (!ctx.quiet && (e % 25 == 0 || e + 1 == tc.epochs))
      std::fprintf(stderr, "epoch %d pair %.4f cluster %.4f latency %.4f total %.4f\n", row.epoch,
                   row.breakdown.pair, row.breakdown.cluster, row.breakdown.latency, row.breakdown.total);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto ckpt = ctx.artifact("encoder.gru3", ablation);
  fs::create_directories(ckpt.parent_path());
  encoder::save_encoder(ckpt.string(), trainer.params());
  write_sidecar(ctx, ckpt, ablation ? "train-encoder --ablation" : "train-encoder");
  training::save_checkpoint(ctx.artifact("encoder_state.bin", ablation).string(), trainer.checkpoint());
  const auto log_path = ctx.artifact("encoder_train.csv", ablation);
  write_text(log_path, training::format_training_log(trainer.log()));
  write_sidecar(ctx, log_path, "train-encoder");
  write_timing(ctx.artifact("encoder.timing.json", ablation), seconds);
  ctx.log("encoder checkpoint: " + ckpt.string());
  return kOk;
}

int cmd_search(const Context& ctx, bool ablation) {
  const auto ds = load_data(ctx);
  const auto enc = load_encoder_artifact(ctx, ablation);
  const auto [train_idx, test_idx] = split(ctx, ds);
  const auto& ec = ctx.cfg.pipeline.encoder;
  const auto emb = pipeline::classifier_training_set(enc, pipeline::select(ds, train_idx), ec.window_width, ec.stride,
                                                     ctx.cfg.pipeline.prefix_samples, ctx.cfg.seed);
  auto pc = ctx.cfg.pipeline;
  pc.fine_tune.epochs = 0;
  const auto res = pipeline::build_classifier(emb, pc, ctx.cfg.seed);

  const auto arch_path = ctx.artifact("arch_pruned.json", ablation);
  nas::save_architecture(arch_path.string(), res.pruned);
  write_sidecar(ctx, arch_path, "search");
  nlohmann::json summary;
  summary["meta"] = nlohmann::json::parse(ctx.meta("search"));
  summary["alpha"] = nlohmann::json::array();
  summary["saliency"] = nlohmann::json::array();
  for (std::size_t l = 0; l < res.supernet.alpha.size(); ++l) {
    const auto& a = res.supernet.alpha[l];
    const auto& s = res.saliency[l];
    summary["alpha"].push_back(std::vector<double>(a.data(), a.data() + a.size()));
    summary["saliency"].push_back(std::vector<double>(s.data(), s.data() + s.size()));
  }
  summary["candidates"] = nlohmann::json::array();
  for (const auto& layer : res.supernet.layers) {
    auto names = nlohmann::json::array();
    for (const auto& op : layer) names.push_back(nas::to_string(op.kind));
    summary["candidates"].push_back(names);
  }
  summary["chosen"] = res.pruned.chosen;
  summary["search_loss"] = res.search_history.epoch_loss;
  write_text(ctx.artifact("search.json", ablation), summary.dump(2) + "\n");
  write_timing(ctx.artifact("search.timing.json", ablation), res.search_seconds);
  ctx.log("pruned architecture: " + arch_path.string());
  return kOk;
}

int cmd_fine_tune(const Context& ctx, bool ablation) {
  const auto ds = load_data(ctx);
  const auto enc = load_encoder_artifact(ctx, ablation);
  auto arch = load_arch_artifact(ctx, "arch_pruned.json", ablation, "rdetect search");
  const auto [train_idx, test_idx] = split(ctx, ds);
  const auto& ec = ctx.cfg.pipeline.encoder;
  const auto emb = pipeline::classifier_training_set(enc, pipeline::select(ds, train_idx), ec.window_width, ec.stride,
                                                     ctx.cfg.pipeline.prefix_samples, ctx.cfg.seed);
  auto ft = ctx.cfg.pipeline.fine_tune;
  ft.seed = ctx.cfg.seed + 1;
  const auto t0 = std::chrono::steady_clock::now();
  nas::fine_tune(arch, emb.embeddings, emb.labels, ft);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto path = ctx.artifact("arch.json", ablation);
  nas::save_architecture(path.string(), arch);
  write_sidecar(ctx, path, "fine-tune");
  write_timing(ctx.artifact("fine_tune.timing.json", ablation), seconds);
  const auto test = pipeline::embed_labelled(enc, pipeline::select(ds, test_idx), ec.window_width, ec.stride);
  ctx.log("fine-tuned architecture: " + path.string() + " (test accuracy " + std::to_string(nas::accuracy(arch, test)) +
          ")");
  return kOk;
}

int cmd_adapt(const Context& ctx, const Options& opt) {
  if (opt.variant_dir.empty()) throw ConfigError("adapt needs --variant-dir <dataset directory of the new variant>");
  require(fs::path(opt.variant_dir) / "manifest.json", "new-variant dataset", "rdetect gen");
  const auto model = load_model(ctx, false);
  const auto ds = load_data(ctx);
  const auto variant = trace::load_dataset(opt.variant_dir);
  const auto [train_idx, test_idx] = split(ctx, ds);
  const auto& ec = ctx.cfg.pipeline.encoder;
  const int w = ec.window_width, s = ec.stride;

  // Variant traces in the manifest's test fold are held out for evaluation.
  std::vector<int> fresh_idx, unseen_idx;
  for (std::size_t i = 0; i < variant.traces.size(); ++i)
    (variant.folds.at(i) == ctx.cfg.test_fold ? unseen_idx : fresh_idx).push_back(static_cast<int>(i));
  if (fresh_idx.empty() || unseen_idx.empty()) throw ParseError(ParseError::Kind::MalformedHeader, "variant split is empty");

  const auto replay = pipeline::embed_labelled(model.encoder, pipeline::select(ds, train_idx), w, s);
  const auto seen_eval = pipeline::embed_labelled(model.encoder, pipeline::select(ds, test_idx), w, s);
  const auto fresh = pipeline::embed_labelled(model.encoder, pipeline::select(variant, fresh_idx), w, s);
  const auto unseen_eval = pipeline::embed_labelled(model.encoder, pipeline::select(variant, unseen_idx), w, s);
  auto arch = model.classifier;
  auto acfg = ctx.cfg.adaptivity.adapt;
  acfg.train.seed = ctx.cfg.seed + 7;
  eval::AdaptivityReport rep;
  rep.result = nas::adapt(arch, fresh, replay, seen_eval, unseen_eval, acfg);
  rep.meta = ctx.run_meta();
  const auto total_train = [&]() -> double {
    double t = 0.0;
    for (const char* f : {"encoder.timing.json", "search.timing.json", "fine_tune.timing.json"})
      t += read_timing(ctx.out / f).value_or(0.0);
    return t;
  }();
  rep.full_retrain_seconds = total_train;
  const auto path = ctx.artifact("arch_adapted.json", false);
  nas::save_architecture(path.string(), arch);
  write_sidecar(ctx, path, "adapt");
  write_text(ctx.report("adapt", "csv"), eval::format_adaptivity_csv(rep));
  write_text(ctx.report("adapt", "json"), eval::format_adaptivity_json(rep));
  ctx.log("adapted architecture: " + path.string());
  return kOk;
}

int cmd_detect(const Context& ctx, const Options& opt) {
  const auto model = load_model(ctx, false);
  const auto& dc = ctx.cfg.detector;
  const auto session_dir = ctx.out / "sessions";
  fs::create_directories(session_dir);
  auto emit = [&](const std::string& name, const detector::SessionOutcome& out) {
    const auto path = session_dir / ("session_" + ctx.hash + "_s" + std::to_string(ctx.cfg.seed) + "_" + name + ".json");
    write_text(path, detector::session_report_json(out.event, ctx.meta("detect")));
    return path;
  };

  if (!opt.trace_path.empty()) {
    const auto tr = trace::load_trace(opt.trace_path);
    detector::VirtualFs vfs(detector::make_initial_files(ctx.cfg.workload, ctx.cfg.seed));
    detector::FsScript script;
    if (!opt.script_path.empty())
      script = detector::parse_fs_script(io::read_file(opt.script_path));
    else
      script = detector::make_workload(tr, vfs.files(), dc, ctx.cfg.workload, ctx.cfg.seed);
    const auto out = detector::run_session(tr, model, dc, script, vfs);
    const auto path = emit(fs::path(opt.trace_path).stem().string(), out);
    ctx.log("session report: " + path.string());
    return out.event.restore.lost.empty() ? kOk : kRollback;
  }

  const auto ds = load_data(ctx);
  const auto [train_idx, test_idx] = split(ctx, ds);
  int alerts = 0, sessions = 0;
  bool lost = false;
  for (int i : test_idx) {
    if (opt.limit >= 0 && sessions >= opt.limit) break;
    const auto& tr = ds.traces[i];
    const std::uint64_t session_seed = ctx.cfg.seed * 1000003ULL + static_cast<std::uint64_t>(i);
    detector::VirtualFs vfs(detector::make_initial_files(ctx.cfg.workload, session_seed));
    const auto script = detector::make_workload(tr, vfs.files(), dc, ctx.cfg.workload, session_seed);
    const auto out = detector::run_session(tr, model, dc, script, vfs);
    char name[32];
    std::snprintf(name, sizeof(name), "%05d", i);
    emit(name, out);
    alerts += out.event.alert_window.has_value();
    lost = lost || !out.event.restore.lost.empty();
    ++sessions;
  }
  ctx.log(std::to_string(sessions) + " sessions, " + std::to_string(alerts) + " alerts; reports in " +
          session_dir.string());
  return lost ? kRollback : kOk;
}

int cmd_eval(const Context& ctx, const std::string& study) {
  const auto& ec = ctx.cfg.pipeline.encoder;
  const int w = ec.window_width, s = ec.stride;
  auto emit = [&](const std::string& stem, const std::string& csv, const std::string& json) {
    write_text(ctx.report(stem, "csv"), csv);
    write_text(ctx.report(stem, "json"), json);
    ctx.log("report: " + ctx.report(stem, "json").string());
  };

  if (study == "accuracy") {
    const auto ds = load_data(ctx);
    auto r = eval::eval_accuracy(ds, ctx.cfg.pipeline, ctx.cfg.folds, ctx.cfg.seed);
    r.meta = ctx.run_meta();
    emit("accuracy", eval::format_case_study_csv(r), eval::format_case_study_json(r));
    ctx.log("aggregate accuracy " + std::to_string(r.aggregate.m.accuracy) + " f1 " +
            std::to_string(r.aggregate.m.f1));
  } else if (study == "robustness") {
    const auto model = load_model(ctx, false);
    const auto ds = load_data(ctx);
    const auto [train_idx, test_idx] = split(ctx, ds);
    auto r = eval::eval_robustness(model, pipeline::select(ds, test_idx), ctx.cfg.robustness_trials, ctx.cfg.seed, w, s);
    r.meta = ctx.run_meta();
    emit("robustness", eval::format_robustness_csv(r), eval::format_robustness_json(r));
  } else if (study == "latency") {
    const auto full = load_model(ctx, false);
    const auto ablation = load_model(ctx, true);
    const auto ds = load_data(ctx);
    const auto [train_idx, test_idx] = split(ctx, ds);
    auto r = eval::eval_latency(full, ablation, pipeline::select(ds, test_idx), ctx.cfg.detector);
    r.meta = ctx.run_meta();
    emit("latency", eval::format_latency_csv(r), eval::format_latency_json(r));
  } else if (study == "adaptivity") {
    auto r = eval::eval_adaptivity(ctx.cfg.generator, ctx.cfg.pipeline, ctx.cfg.adaptivity, ctx.cfg.seed);
    r.meta = ctx.run_meta();
    emit("adaptivity", eval::format_adaptivity_csv(r), eval::format_adaptivity_json(r));
  } else if (study == "overhead") {
    const auto model = load_model(ctx, false);
    const auto ds = load_data(ctx);
    const auto [train_idx, test_idx] = split(ctx, ds);
    auto r = eval::eval_overhead(model, pipeline::select(ds, test_idx), w, s);
    r.encoder_train_seconds = read_timing(ctx.out / "encoder.timing.json");
    const auto search_t = read_timing(ctx.out / "search.timing.json");
    const auto ft_t = read_timing(ctx.out / "fine_tune.timing.json");
    if (search_t && ft_t) r.classifier_train_seconds = *search_t + *ft_t;
    r.meta = ctx.run_meta();
    emit("overhead", eval::format_overhead_csv(r), eval::format_overhead_json(r));
  } else {
    throw ConfigError("unknown study '" + study + "'");
  }
  return kOk;
}

int cmd_export_embeddings(const Context& ctx, bool ablation) {
  const auto enc = load_encoder_artifact(ctx, ablation);
  const auto ds = load_data(ctx);
  const auto& ec = ctx.cfg.pipeline.encoder;
  const auto path = ctx.report(ablation ? "embeddings_ablation" : "embeddings", "csv");
  write_text(path, eval::export_embeddings_csv(enc, pipeline::all_traces(ds), ec.window_width, ec.stride));
  write_sidecar(ctx, path, "export-embeddings");
  ctx.log("embeddings: " + path.string());
  return kOk;
}

Context make_context(const Options& opt) {
  Context ctx;
  ctx.cfg = opt.config_path.empty() ? RunConfig{} : load_config(opt.config_path);
  if (opt.seed) ctx.cfg.seed = *opt.seed;
  if (opt.threads) ctx.cfg.threads = *opt.threads;
  ctx.cfg.validate();
  ctx.hash = config_hash(ctx.cfg);
  ctx.out = opt.out_dir;
  ctx.quiet = opt.quiet;
  fs::create_directories(ctx.out);

  // Outputs from a different config or seed in the same directory would mix.
  const auto run_file = ctx.out / "run.json";
  if (fs::exists(run_file)) {
    try {
      const auto prev = nlohmann::json::parse(io::read_file(run_file.string()));
      if (prev.value("config_hash", "") != ctx.hash || prev.value("seed", std::uint64_t{0}) != ctx.cfg.seed)
        std::cerr << "warning: " << ctx.out.string() << " holds artifacts of config " << prev.value("config_hash", "?")
                  << " seed " << prev.value("seed", std::uint64_t{0}) << "; they may be overwritten or mixed\n";
    } catch (const nlohmann::json::exception&) {
    }
  }
  nlohmann::json run{{"version", kVersion}, {"config_hash", ctx.hash}, {"seed", ctx.cfg.seed}};
  write_text(run_file, run.dump(2) + "\n");
  write_text(ctx.out / "config.json", config_to_json(ctx.cfg));
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-latency ransomware detection on simulated trace-buffer streams"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--config", opt.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", opt.seed, "Seed (overrides the config)");
  app.add_option("--out-dir", opt.out_dir, "Directory for all artifacts")->capture_default_str();
  app.add_option("--threads", opt.threads, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--quiet", opt.quiet, "Only print errors");

  auto* gen = app.add_subcommand("gen", "Generate the synthetic trace dataset");
  auto* train = app.add_subcommand("train-encoder", "Pre-train the GRU encoder");
  train->add_flag("--ablation", opt.ablation, "Train without the latency term");
  auto* search = app.add_subcommand("search", "Train the supernet and prune it to one path");
  search->add_flag("--ablation", opt.ablation, "Use the ablation encoder");
  auto* fine = app.add_subcommand("fine-tune", "Fine-tune the pruned classifier");
  fine->add_flag("--ablation", opt.ablation, "Use the ablation artifacts");
  auto* adapt = app.add_subcommand("adapt", "Adapt the classifier to a new variant");
  adapt->add_option("--variant-dir", opt.variant_dir, "Dataset directory of the new variant");
  auto* detect = app.add_subcommand("detect", "Run detection sessions with snapshot and rollback");
  detect->add_option("--trace", opt.trace_path, "Single trace file (default: the test split)");
  detect->add_option("--fs-script", opt.script_path, "Filesystem script for --trace");
  detect->add_option("--limit", opt.limit, "Maximum number of sessions");
  auto* ev = app.add_subcommand("eval", "Run an evaluation study");
  ev->add_option("study", opt.study, "accuracy|robustness|latency|adaptivity|overhead")
      ->required()
      ->check(CLI::IsMember({"accuracy", "robustness", "latency", "adaptivity", "overhead"}));
  auto* exp = app.add_subcommand("export-embeddings", "Write pooled embeddings of every trace");
  exp->add_flag("--ablation", opt.ablation, "Use the ablation encoder");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    const auto ctx = make_context(opt);
    if (gen->parsed()) return cmd_gen(ctx);
    if (train->parsed()) return cmd_train_encoder(ctx, opt.ablation);
    if (search->parsed()) return cmd_search(ctx, opt.ablation);
    if (fine->parsed()) return cmd_fine_tune(ctx, opt.ablation);
    if (adapt->parsed()) return cmd_adapt(ctx, opt);
    if (detect->parsed()) return cmd_detect(ctx, opt);
    if (ev->parsed()) return cmd_eval(ctx, opt.study);
    if (exp->parsed()) return cmd_export_embeddings(ctx, opt.ablation);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kModel;
  } catch (const ParseError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const detector::PartialRestoreError& e) {
    std::cerr << "rollback error: " << e.what() << "\n";
    return kRollback;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
