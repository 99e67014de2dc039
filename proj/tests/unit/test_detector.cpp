#include <doctest.h>

#include <json.hpp>

#include "oracles.hpp"
#include "rdetect/detector.hpp"
#include "rdetect/error.hpp"

using namespace rdetect;
using namespace rdetect::detector;

namespace {

/// Classifier with a zeroed body whose head bias fixes the ransomware
/// probability to `p` for every input.
nas::PrunedArchitecture constant_classifier(int dim, double p) {
  nas::PrunedArchitecture a;
  auto op = nas::CandidateOp::make(nas::OpKind::DenseTanh, dim, 4, 1);
  op.weight.setZero();
  op.bias.setZero();
  a.ops.push_back(op);
  a.chosen.push_back(0);
  a.head.weight = Eigen::MatrixXd::Zero(2, 4);
  a.head.bias = Eigen::Vector2d(0.0, std::log(p / (1.0 - p)));
  return a;
}

Model constant_model(double p) {
  Model m;
  m.encoder = encoder::EncoderParams::random(16 * 10, 8, 1);
  m.classifier = constant_classifier(8, p);
  return m;
}

Model random_model(std::uint64_t seed) {
  Model m;
  m.encoder = encoder::EncoderParams::random(16 * 10, 8, seed);
  auto net = nas::make_supernet(8, nas::SupernetConfig{2, 8}, seed);
  auto rng = keyed_rng({seed});
  const auto x = oracle::random_matrix(rng, 8, 10);
  std::vector<int> y(10);
  for (int j = 0; j < 10; ++j) y[j] = j % 2;
  m.classifier = nas::prune(net, x, y);
  return m;
}

Bytes bytes_of(std::uint64_t seed, int n) {
  auto rng = keyed_rng({seed, 0xB7});
  Bytes b(static_cast<std::size_t>(n), '\0');
  for (auto& c : b) c = static_cast<char>(uniform_int(rng, 0, 255));
  return b;
}

}  // namespace

TEST_SUITE("detector") {

TEST_CASE("alert latch state machine") {
  AlertLatch latch(0.9, 2);
  const std::vector<double> scores{0.2, 0.6, 0.95, 0.97};
  for (double s : scores) latch.push(s);
  CHECK(latch.alert_index() == 3);

  AlertLatch one(0.9, 1);
  CHECK(one.push(0.99));
  CHECK(one.alert_index() == 0);

  AlertLatch never(0.9, 2);
  for (int i = 0; i < 20; ++i) CHECK_FALSE(never.push(0.5 + 0.02 * (i % 10)));

  // Latched: later low scores never revoke it.
  for (double s : {0.1, 0.0, 0.3}) CHECK(latch.push(s));
  CHECK(latch.alert_index() == 3);

  // A broken run restarts the count.
  AlertLatch broken(0.9, 2);
  for (double s : {0.95, 0.2, 0.95, 0.2, 0.95}) CHECK_FALSE(broken.push(s));
  CHECK(broken.push(0.96));
  CHECK(broken.alert_index() == 5);

  // Exactly the threshold is not above it.
  AlertLatch edge(0.9, 1);
  CHECK_FALSE(edge.push(0.9));

  CHECK_THROWS_AS(AlertLatch(1.0, 2), InvalidArgument);
  CHECK_THROWS_AS(AlertLatch(0.9, 0), InvalidArgument);
}

TEST_CASE("session scores are the classifier on the running mean of states") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto model = random_model(seed);
    const auto t = trace::generate_trace(ProgramClass::Ransomware, static_cast<int>(seed), 120, seed);
    const auto seq = trace::segment_windows(t, 10, 10);
    const auto states = encoder::gru_forward(model.encoder, seq).hidden.states;
    DetectorConfig cfg;
    cfg.threshold = 0.999999;
    Session s(model, cfg);
    s.init();
    for (int k = 0; k < seq.length(); ++k) {
      const auto r = detect_step(s, seq.windows[k]);
      const Eigen::VectorXd mean = states.leftCols(k + 1).rowwise().mean();
      const double expect = model.classifier.forward(mean)(1, 0);
      CHECK(std::abs(r.score - expect) < 1e-12);
      CHECK(r.window == k);
    }
    CHECK(s.scores().size() == static_cast<std::size_t>(seq.length()));
  }
}

TEST_CASE("session before init is an error") {
  const auto model = constant_model(0.5);
  Session s(model, DetectorConfig{});
  const auto t = trace::generate_trace(ProgramClass::Benign, 0, 40, 1);
  CHECK_THROWS_AS(s.step(trace::segment_windows(t, 10, 10).windows[0]), StateError);
}

TEST_CASE("low-scoring model never alerts and keeps at most one live window") {
  const auto model = constant_model(0.2);
  const auto t = trace::generate_trace(ProgramClass::Benign, 1, 200, 2);
  const auto files = make_initial_files(WorkloadConfig{}, 2);
  WorkloadConfig wl;
  wl.benign_write_rate = 1.0;
  const auto script = make_workload(t, files, DetectorConfig{}, wl, 2);
  const auto out = run_session(t, model, DetectorConfig{}, script, VirtualFs(files));
  CHECK_FALSE(out.event.alert_window.has_value());
  CHECK_FALSE(out.event.latency_ms.has_value());
  CHECK(out.event.restore.restored.empty());
  CHECK(out.max_live_backups <= 1);
  CHECK(out.event.scores.size() == 20);
}

TEST_CASE("always-high model alerts after k windows and rolls back the span") {
  const auto model = constant_model(0.99);
  const auto t = trace::generate_trace(ProgramClass::Ransomware, 1, 200, 3);
  std::map<std::string, Bytes> files;
  for (int i = 0; i < 10; ++i) files["f" + std::to_string(i)] = bytes_of(static_cast<std::uint64_t>(i), 40);
  FsScript script;
  // Ten files encrypted across the two confirmation windows, plus a note.
  for (int i = 0; i < 10; ++i) {
    Bytes enc = files["f" + std::to_string(i)];
    for (auto& c : enc) c = static_cast<char>(c ^ 0x33);
    script.push_back({i < 5 ? 0 : 1, FsOp::Kind::Write, "f" + std::to_string(i), enc});
  }
  script.push_back({1, FsOp::Kind::Create, "note.txt", "pay"});
  DetectorConfig cfg;
  const auto out = run_session(t, model, cfg, script, VirtualFs(files));
  REQUIRE(out.event.alert_window == 1);
  CHECK(out.fs.files() == files);
  CHECK(out.event.restore.restored.size() == 10);
  CHECK(out.event.restore.deleted == std::vector<std::string>{"note.txt"});
  CHECK(out.event.restore.lost.empty());
  CHECK(out.max_live_backups <= 2);
  CHECK(out.event.alert_tick == 19);

  // k = 1 fires on the first window.
  cfg.confirm_windows = 1;
  CHECK(run_session(t, model, cfg, {}, VirtualFs(files)).event.alert_window == 0);
}

TEST_CASE("snapshot captures pre-window content once") {
  VirtualFs fs({{"a", "one"}, {"b", "two"}});
  SnapshotStore store;
  fs.begin_window(0);
  snapshot_window(fs, store, 0);
  REQUIRE(store.has(0));
  CHECK(store.windows[0].empty());

  fs.begin_window(1);
  fs.write("a", "ONE");
  fs.write("a", "ONE!");
  fs.create("c", "new");
  snapshot_window(fs, store, 1);
  REQUIRE(store.windows[1].size() == 2);
  CHECK(store.windows[1][0].path == "a");
  CHECK(store.windows[1][0].content == std::optional<Bytes>("one"));
  CHECK(store.windows[1][1].path == "c");
  CHECK_FALSE(store.windows[1][1].content.has_value());
  CHECK(fs.touched(1)[0].pre_hash == content_hash("one"));

  // Idempotent per window.
  fs.write("b", "TWO");
  snapshot_window(fs, store, 1);
  CHECK(store.windows[1].size() == 2);

  store.discard(1);
  CHECK_FALSE(store.has(1));
  CHECK(store.live_windows() == 1);
  CHECK_THROWS_AS(fs.begin_window(0), InvalidArgument);
  CHECK_THROWS_AS(fs.write("zzz", "x"), InvalidArgument);
}

TEST_CASE("rollback restores the pre-span state and leaves earlier edits") {
  std::map<std::string, Bytes> init{{"a", "a0"}, {"b", "b0"}, {"c", "c0"}, {"d", "d0"}};
  VirtualFs fs(init);
  SnapshotStore store;
  // Windows 0..2 are clean and discarded; 3 and 4 form the span.
  fs.begin_window(0);
  fs.write("a", "a1");
  snapshot_window(fs, store, 0);
  store.discard(0);
  fs.begin_window(2);
  fs.write("b", "b1");
  snapshot_window(fs, store, 2);
  store.discard(2);
  const auto clean = fs.files();
  fs.begin_window(3);
  fs.write("c", "c-enc");
  fs.write("b", "b-enc");
  snapshot_window(fs, store, 3);
  fs.begin_window(4);
  fs.write("c", "c-enc2");
  fs.write("d", "d-enc");
  fs.create("note", "pay");
  snapshot_window(fs, store, 4);

  const auto rep = rollback(fs, store, 4, 2);
  CHECK(fs.files() == clean);
  CHECK(fs.read("a") == "a1");
  CHECK(fs.read("b") == "b1");
  CHECK(rep.restored == std::vector<std::string>{"b", "c", "d"});
  CHECK(rep.deleted == std::vector<std::string>{"note"});
  CHECK(rep.lost.empty());
}

TEST_CASE("rollback with nothing touched reports nothing") {
  VirtualFs fs(std::map<std::string, Bytes>{{"a", "x"}});
  SnapshotStore store;
  for (int w = 0; w < 3; ++w) {
    fs.begin_window(w);
    snapshot_window(fs, store, w);
  }
  const auto rep = rollback(fs, store, 2, 2);
  CHECK(rep.restored.empty());
  CHECK(rep.deleted.empty());
  CHECK(rep.lost.empty());
}

TEST_CASE("missing backups raise a partial-restore error listing losses") {
  VirtualFs fs({{"a", "a0"}, {"b", "b0"}});
  SnapshotStore store;
  fs.begin_window(0);
  fs.write("a", "a1");
  snapshot_window(fs, store, 0);
  fs.begin_window(1);
  fs.write("b", "b1");  // never snapshotted
  try {
    rollback(fs, store, 1, 2);
    FAIL("expected partial restore");
  } catch (const PartialRestoreError& e) {
    CHECK(e.report().lost == std::vector<std::string>{"b"});
    CHECK(e.report().restored == std::vector<std::string>{"a"});
  }
  CHECK(fs.read("a") == "a0");
}

TEST_CASE("latency accounting") {
  DetectionEvent e;
  e.alert_window = 7;
  e.infect_tick = 61;
  fill_latency(e, DetectorConfig{});
  CHECK(e.alert_tick == 79);
  CHECK(e.latency_ms == 900.0);
  CHECK_FALSE(e.early_alert);

  e.infect_tick = 100;
  fill_latency(e, DetectorConfig{});
  CHECK(e.latency_ms == 0.0);
  CHECK(e.early_alert);

  e.alert_window.reset();
  fill_latency(e, DetectorConfig{});
  CHECK_FALSE(e.latency_ms.has_value());
}

TEST_CASE("session report schema") {
  DetectionEvent e;
  e.alert_window = 3;
  e.infect_tick = 20;
  e.scores = {0.1, 0.95, 0.97};
  e.restore.restored = {"x"};
  fill_latency(e, DetectorConfig{});
  const auto j = nlohmann::json::parse(session_report_json(e, R"({"seed":1})"));
  for (const char* key : {"alert_window", "alert_tick", "latency_ms", "scores", "restored", "lost"})
    CHECK(j.contains(key));
  CHECK(j["alert_tick"] == 39);
  CHECK(j["latency_ms"] == 950.0);
  CHECK(j["meta"]["seed"] == 1);
  const auto none = nlohmann::json::parse(session_report_json(DetectionEvent{}));
  CHECK(none["alert_window"].is_null());
}

TEST_CASE("fs script format round trip and errors") {
  const FsScript s{{0, FsOp::Kind::Write, "docs/a", std::string("\x00\xff\x10", 3)},
                   {2, FsOp::Kind::Create, "note", "hi"}};
  CHECK(parse_fs_script(format_fs_script(s)) == s);
  CHECK(from_hex(to_hex("\x01\xab")) == "\x01\xab");
  CHECK(to_hex("\x01\xab") == "01ab");
  CHECK_THROWS_AS(parse_fs_script("{}"), ParseError);
  CHECK_THROWS_AS(parse_fs_script("[{\"window\":0,\"op\":\"delete\",\"path\":\"a\",\"bytes_hex\":\"\"}]"), ParseError);
  CHECK_THROWS_AS(parse_fs_script("[{\"window\":0,\"op\":\"write\",\"path\":\"a\",\"bytes_hex\":\"abc\"}]"), ParseError);
  CHECK_THROWS_AS(parse_fs_script("[{\"window\":0,\"op\":\"write\",\"path\":\"a\"}]"), ParseError);
  CHECK_THROWS_AS(parse_fs_script("not json"), ParseError);
}

TEST_CASE("workload encrypts only from the infect window on") {
  const auto t = trace::generate_trace(ProgramClass::Ransomware, 2, 200, 5);
  const auto files = make_initial_files(WorkloadConfig{}, 5);
  CHECK(files.size() == 12);
  const auto script = make_workload(t, files, DetectorConfig{}, WorkloadConfig{}, 5);
  const int infect = *t.infect_tick();
  int creates = 0;
  for (const auto& op : script) {
    if (op.kind == FsOp::Kind::Create) {
      ++creates;
      CHECK(op.window * 10 + 9 >= infect);
    }
  }
  CHECK(creates == 1);
  CHECK(make_workload(t, files, DetectorConfig{}, WorkloadConfig{}, 5) == script);

  const auto b = trace::generate_trace(ProgramClass::Benign, 2, 200, 5);
  for (const auto& op : make_workload(b, files, DetectorConfig{}, WorkloadConfig{}, 5))
    CHECK(op.kind == FsOp::Kind::Write);
}

TEST_CASE("session replay is deterministic") {
  const auto model = random_model(7);
  const auto t = trace::generate_trace(ProgramClass::Ransomware, 3, 200, 7);
  const auto files = make_initial_files(WorkloadConfig{}, 7);
  const auto script = make_workload(t, files, DetectorConfig{}, WorkloadConfig{}, 7);
  DetectorConfig cfg;
  cfg.threshold = 0.5;
  const auto a = run_session(t, model, cfg, script, VirtualFs(files));
  const auto b = run_session(t, model, cfg, script, VirtualFs(files));
  CHECK(a.event == b.event);
  CHECK(a.fs.files() == b.fs.files());
  CHECK(session_report_json(a.event) == session_report_json(b.event));
}

}  // TEST_SUITE
