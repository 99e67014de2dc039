#include <doctest.h>

#include <sstream>

#include <json.hpp>

#include "oracles.hpp"
#include "rdetect/error.hpp"
#include "rdetect/eval.hpp"

using namespace rdetect;
using namespace rdetect::eval;

namespace {

trace::Dataset small_dataset(int per_class, std::uint64_t seed) {
  trace::GeneratorConfig g;
  g.benign_count = per_class;
  g.ransomware_count = per_class;
  return trace::build_dataset(g, seed);
}

detector::Model constant_model(double p) {
  detector::Model m;
  m.encoder = encoder::EncoderParams::random(16 * 10, 8, 1);
  auto op = nas::CandidateOp::make(nas::OpKind::DenseTanh, 8, 4, 1);
  op.weight.setZero();
  op.bias.setZero();
  m.classifier.ops.push_back(op);
  m.classifier.chosen.push_back(0);
  m.classifier.head.weight = Eigen::MatrixXd::Zero(2, 4);
  m.classifier.head.bias = Eigen::Vector2d(0.0, std::log(p / (1.0 - p)));
  return m;
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("metrics from confusion counts") {
  const auto m = metrics({95, 5, 3, 97});
  CHECK(m.accuracy == 0.96);
  CHECK(m.precision == 0.95);
  CHECK(m.recall == doctest::Approx(95.0 / 98.0).epsilon(1e-12));
  CHECK(m.f1 == doctest::Approx(2 * 0.95 * (95.0 / 98.0) / (0.95 + 95.0 / 98.0)).epsilon(1e-12));
  CHECK(std::abs(m.recall - 0.9694) < 1e-4);
  CHECK(std::abs(m.f1 - 0.9596) < 1e-4);
  CHECK_FALSE(m.precision_undefined);

  const auto none = metrics({0, 0, 4, 6});
  CHECK(none.precision_undefined);
  CHECK(none.f1_undefined);
  CHECK(none.recall == 0.0);
  const auto no_pos = metrics({0, 2, 0, 6});
  CHECK(no_pos.recall_undefined);
  CHECK_THROWS_AS(metrics({}), InvalidArgument);
  CHECK_THROWS_AS(metrics({-1, 0, 0, 1}), InvalidArgument);
}

TEST_CASE("f1 is the harmonic mean over random counts") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto rng = keyed_rng({s});
    ConfusionCounts c{uniform_int(rng, 1, 100), uniform_int(rng, 0, 100), uniform_int(rng, 0, 100),
                      uniform_int(rng, 0, 100)};
    const auto m = metrics(c);
    CHECK(m.f1 == doctest::Approx(2 * m.precision * m.recall / (m.precision + m.recall)).epsilon(1e-14));
    CHECK(m.accuracy * c.total() == doctest::Approx(c.tp + c.tn));
  }
}

TEST_CASE("confusion counting") {
  const auto c = confusion({1, 1, 0, 0, 1}, {1, 0, 0, 1, 1});
  CHECK(c.tp == 2);
  CHECK(c.fn == 1);
  CHECK(c.fp == 1);
  CHECK(c.tn == 1);
  auto sum = c;
  sum += c;
  CHECK(sum.total() == 10);
  CHECK_THROWS_AS(confusion({1}, {1, 0}), InvalidArgument);
}

TEST_CASE("median") {
  CHECK(median({3.0}) == 3.0);
  CHECK(median({4.0, 1.0, 3.0}) == 3.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK_THROWS_AS(median({}), InvalidArgument);
}

TEST_CASE("robustness at zero intensity equals clean accuracy") {
  const auto ds = small_dataset(6, 2);
  const auto test = pipeline::all_traces(ds);
  const auto model = constant_model(0.2);
  const auto r = eval_robustness(model, test, 3, 1, 10, 10, 0.0);
  CHECK(r.clean_accuracy == 0.5);
  REQUIRE(r.trials.size() == 3);
  for (double a : r.trials) CHECK(a == r.clean_accuracy);
  CHECK(r.median == r.clean_accuracy);
  const auto csv = format_robustness_csv(r);
  CHECK(csv.find("trial,accuracy\nclean,0.5\n") != std::string::npos);
  CHECK(nlohmann::json::parse(format_robustness_json(r))["trials"].size() == 3);
  CHECK_THROWS_AS(eval_robustness(model, test, 0, 1, 10, 10), InvalidArgument);
  CHECK_THROWS_AS(eval_robustness(model, {}, 1, 1, 10, 10), InvalidArgument);
}

TEST_CASE("latency table covers ransomware traces only") {
  const auto ds = small_dataset(5, 3);
  const auto test = pipeline::all_traces(ds);
  detector::DetectorConfig cfg;
  // Always-ransomware fires at window 1, before every infect tick.
  const auto r = eval_latency(constant_model(0.99), constant_model(0.01), test, cfg);
  CHECK(r.full_total.detected == 5);
  CHECK(r.full_total.early == 5);
  CHECK(r.full_total.mean_latency_ms == 0.0);
  CHECK(r.ablation_total.detected == 0);
  CHECK(r.ablation_total.undetected == 5);
  CHECK_FALSE(r.ratio.has_value());
  int rows_detected = 0;
  for (const auto& row : r.rows) {
    if (row.model == "full") rows_detected += row.detected;
  }
  CHECK(rows_detected == 5);
  const auto csv = format_latency_csv(r);
  CHECK(csv.find("benign") == std::string::npos);
  const auto j = nlohmann::json::parse(format_latency_json(r));
  CHECK(j.contains("ratio"));
}

TEST_CASE("overhead stages add up and parameters are counted") {
  const auto ds = small_dataset(3, 4);
  const auto model = constant_model(0.5);
  const auto r = eval_overhead(model, pipeline::all_traces(ds), 10, 10);
  CHECK(r.samples == 6);
  CHECK(r.encoder_parameters == model.encoder.parameter_count());
  CHECK(r.classifier_parameters == model.classifier.parameter_count());
  CHECK(r.total_ms == r.encoder_ms + r.classifier_ms);
  const auto csv = format_overhead_csv(r);
  CHECK(csv.find("stage,parameters,latency_ms_per_sample,training_time_s\n") != std::string::npos);
  CHECK(csv.find("total," + std::to_string(r.encoder_parameters + r.classifier_parameters) + ",") !=
        std::string::npos);
  CHECK_THROWS_AS(eval_overhead(model, {}, 10, 10), InvalidArgument);
}

TEST_CASE("embedding export has one row per trace") {
  const auto ds = small_dataset(4, 5);
  const auto model = constant_model(0.5);
  const auto traces = pipeline::all_traces(ds);
  const auto csv = export_embeddings_csv(model.encoder, traces, 10, 10);
  CHECK(count_lines(csv) == 9);
  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("index,family,label,e0,", 0) == 0);
  CHECK(std::count(header.begin(), header.end(), ',') == 2 + 8);
  const auto emb = pipeline::embed(model.encoder, traces, 10, 10);
  CHECK(emb.cols() == 8);
  CHECK(emb.rows() == 8);
}

TEST_CASE("cross-validation on a tiny configuration") {
  trace::GeneratorConfig g;
  g.benign_count = 10;
  g.ransomware_count = 10;
  g.families = 2;
  g.slots = 4;
  g.min_ticks = 60;
  g.max_ticks = 80;
  const auto ds = trace::build_dataset(g, 6);
  pipeline::PipelineConfig cfg;
  cfg.encoder.epochs = 2;
  cfg.encoder.hidden_dim = 8;
  cfg.encoder.batch_size = 4;
  cfg.supernet.num_layers = 2;
  cfg.supernet.width = 8;
  cfg.search.epochs = 3;
  cfg.fine_tune.epochs = 2;
  cfg.calibration_size = 8;
  int calls = 0;
  const auto r = eval_accuracy(ds, cfg, 2, 7, [&](int fold, const pipeline::Pipeline&, const auto& test) {
    CHECK(fold == calls);
    CHECK(test.size() == 10);
    ++calls;
  });
  CHECK(calls == 2);
  CHECK(r.folds.size() == 2);
  CHECK(r.families.size() == 2);
  CHECK(r.aggregate.m.accuracy == doctest::Approx(0.5 * (r.families[0].m.accuracy + r.families[1].m.accuracy)));
  const auto csv = format_case_study_csv(r);
  CHECK(csv.find("\naverage,") != std::string::npos);
  const auto again = eval_accuracy(ds, cfg, 2, 7);
  CHECK(format_case_study_json(again) == format_case_study_json(r));
}

}  // TEST_SUITE
