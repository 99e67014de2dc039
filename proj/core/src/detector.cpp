#include "rdetect/detector.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include <json.hpp>

#include "rdetect/rng.hpp"

namespace rdetect::detector {

void DetectorConfig::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("alert threshold must lie in (0, 1)");
  if (confirm_windows < 1) throw InvalidArgument("confirmation count must be at least 1");
  if (window_width < 1 || stride < 1 || stride > window_width)
    throw InvalidArgument("window width/stride must satisfy 1 <= stride <= width");
}

AlertLatch::AlertLatch(double threshold, int k) : threshold_(threshold), k_(k) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("alert threshold must lie in (0, 1)");
  if (k < 1) throw InvalidArgument("confirmation count must be at least 1");
}

bool AlertLatch::push(double score) {
  const int index = pushed_++;
  run_ = score > threshold_ ? run_ + 1 : 0;
  if (!alert_index_ && run_ >= k_) alert_index_ = index;
  return alerted();
}

Session::Session(const Model& model, DetectorConfig cfg)
    : model_(&model), cfg_(cfg), stream_(model.encoder), latch_(cfg.threshold, cfg.confirm_windows) {
  cfg_.validate();
  if (model.classifier.input_dim() != model.encoder.hidden_dim())
    throw InvalidArgument("classifier input dim does not match encoder hidden dim");
}

void Session::init() {
  stream_.init();
  latch_ = AlertLatch(cfg_.threshold, cfg_.confirm_windows);
  hidden_sum_ = Eigen::VectorXd::Zero(model_->encoder.hidden_dim());
  scores_.clear();
}

Eigen::VectorXd Session::pooled() const {
  if (scores_.empty()) return hidden_sum_;
  return hidden_sum_ / static_cast<double>(scores_.size());
}

StepResult Session::step(const trace::TraceWindow& window) {
  if (!stream_.initialized()) throw StateError("detection session used before init()");
  const bool was_alerted = latch_.alerted();
  hidden_sum_ += stream_.step(window);
  StepResult r;
  r.window = static_cast<int>(scores_.size());
  const Eigen::VectorXd mean = hidden_sum_ / static_cast<double>(r.window + 1);
  r.score = model_->classifier.forward(mean)(1, 0);
  scores_.push_back(r.score);
  r.above_threshold = r.score > cfg_.threshold;
  r.alert = latch_.push(r.score);
  r.fired = r.alert && !was_alerted;
  return r;
}

StepResult detect_step(Session& session, const trace::TraceWindow& window) { return session.step(window); }

// ---------------------------------------------------------------------------

std::uint64_t content_hash(const Bytes& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void VirtualFs::begin_window(int window) {
  if (window < window_) throw InvalidArgument("window indices must not decrease");
  window_ = window;
}

void VirtualFs::record(const std::string& path) {
  if (window_ < 0) throw StateError("filesystem touched before the first window");
  auto& entries = log_[window_];
  for (const auto& t : entries)
    if (t.path == path) return;
  Touch t;
  t.path = path;
  if (auto it = files_.find(path); it != files_.end()) {
    t.pre_image = it->second;
    t.pre_hash = content_hash(it->second);
  }
  entries.push_back(std::move(t));
}

void VirtualFs::write(const std::string& path, const Bytes& bytes) {
  if (!exists(path)) throw InvalidArgument("write to missing file: " + path);
  record(path);
  files_[path] = bytes;
}

void VirtualFs::create(const std::string& path, const Bytes& bytes) {
  record(path);
  files_[path] = bytes;
}

void VirtualFs::remove(const std::string& path) {
  if (!exists(path)) return;
  record(path);
  files_.erase(path);
}

void VirtualFs::restore(const std::string& path, const std::optional<Bytes>& content) {
  if (content)
    files_[path] = *content;
  else
    files_.erase(path);
}

const Bytes& VirtualFs::read(const std::string& path) const {
  auto it = files_.find(path);
  if (it == files_.end()) throw InvalidArgument("no such file: " + path);
  return it->second;
}

const std::vector<Touch>& VirtualFs::touched(int window) const {
  static const std::vector<Touch> none;
  auto it = log_.find(window);
  return it == log_.end() ? none : it->second;
}

void snapshot_window(const VirtualFs& fs, SnapshotStore& store, int window) {
  if (store.has(window)) return;
  auto& backups = store.windows[window];
  for (const auto& t : fs.touched(window)) backups.push_back({t.path, t.pre_image});
}

PartialRestoreError::PartialRestoreError(RestoreReport report)
    : Error([&] {
        std::string msg = "rollback could not restore " + std::to_string(report.lost.size()) + " file(s):";
        for (const auto& p : report.lost) msg += " " + p;
        return msg;
      }()),
      report_(std::move(report)) {}

RestoreReport rollback(VirtualFs& fs, const SnapshotStore& store, int alert_window, int confirm_windows) {
  if (confirm_windows < 1) throw InvalidArgument("confirmation count must be at least 1");
  const int first = alert_window - confirm_windows + 1;
  RestoreReport report;
  std::set<std::string> handled;
  for (const auto& [window, touches] : fs.touch_log()) {
    if (window < first) continue;
    for (const auto& t : touches) {
      if (!handled.insert(t.path).second) continue;
      // The earliest backup inside the span holds the pre-span content.
      const Backup* found = nullptr;
      for (auto it = store.windows.lower_bound(first); it != store.windows.end() && !found; ++it)
        for (const auto& b : it->second)
          if (b.path == t.path) {
            found = &b;
            break;
          }
      if (!found) {
        report.lost.push_back(t.path);
        continue;
      }
      fs.restore(t.path, found->content);
      (found->content ? report.restored : report.deleted).push_back(t.path);
    }
  }
  std::sort(report.restored.begin(), report.restored.end());
  std::sort(report.deleted.begin(), report.deleted.end());
  std::sort(report.lost.begin(), report.lost.end());
  if (!report.lost.empty()) throw PartialRestoreError(report);
  return report;
}

// ---------------------------------------------------------------------------

std::string to_hex(const Bytes& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out += digits[c >> 4];
    out += digits[c & 15];
  }
  return out;
}

Bytes from_hex(const std::string& hex) {
  if (hex.size() % 2) throw ParseError(ParseError::Kind::MalformedHeader, "odd-length hex string");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ParseError(ParseError::Kind::MalformedHeader, std::string("bad hex digit '") + c + "'");
  };
  Bytes out(hex.size() / 2, '\0');
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<char>(nibble(hex[2 * i]) * 16 + nibble(hex[2 * i + 1]));
  return out;
}

std::string format_fs_script(const FsScript& script) {
  auto arr = nlohmann::json::array();
  for (const auto& op : script)
    arr.push_back({{"window", op.window},
                   {"op", op.kind == FsOp::Kind::Write ? "write" : "create"},
                   {"path", op.path},
                   {"bytes_hex", to_hex(op.bytes)}});
  return arr.dump(1) + "\n";
}

FsScript parse_fs_script(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Kind::MalformedHeader, std::string("fs script: ") + e.what());
  }
  if (!j.is_array()) throw ParseError(ParseError::Kind::MalformedHeader, "fs script must be a JSON list");
  FsScript out;
  int prev = 0;
  for (const auto& e : j) {
    try {
      FsOp op;
      op.window = e.at("window").get<int>();
      const auto kind = e.at("op").get<std::string>();
      if (kind == "write")
        op.kind = FsOp::Kind::Write;
      else if (kind == "create")
        op.kind = FsOp::Kind::Create;
      else
        throw ParseError(ParseError::Kind::MalformedHeader, "unknown fs op '" + kind + "'");
      op.path = e.at("path").get<std::string>();
      op.bytes = from_hex(e.at("bytes_hex").get<std::string>());
      if (op.window < prev) throw ParseError(ParseError::Kind::MalformedHeader, "fs script windows must not decrease");
      prev = op.window;
      out.push_back(std::move(op));
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(ParseError::Kind::MalformedHeader, std::string("fs script entry: ") + ex.what());
    }
  }
  return out;
}

namespace {

Bytes random_bytes(Rng& rng, int n) {
  Bytes b(static_cast<std::size_t>(n), '\0');
  for (auto& c : b) c = static_cast<char>(uniform_int(rng, 0, 255));
  return b;
}

}  // namespace

std::map<std::string, Bytes> make_initial_files(const WorkloadConfig& cfg, std::uint64_t seed) {
  auto rng = keyed_rng({seed, 0xF11E5ULL});
  std::map<std::string, Bytes> files;
  for (int i = 0; i < cfg.files; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "docs/file_%03d.dat", i);
    files[name] = random_bytes(rng, uniform_int(rng, cfg.min_bytes, cfg.max_bytes));
  }
  return files;
}

FsScript make_workload(const trace::RawTrace& trace, const std::map<std::string, Bytes>& files,
                       const DetectorConfig& cfg, const WorkloadConfig& wl, std::uint64_t seed) {
  auto rng = keyed_rng({seed, 0x3C41B7ULL});
  const auto seq_windows = (trace.n_ticks() - cfg.window_width) / cfg.stride + 1;
  std::vector<std::string> paths;
  for (const auto& [p, _] : files) paths.push_back(p);
  const auto infect = trace.infect_tick();
  const Bytes key = random_bytes(rng, 32);

  FsScript script;
  std::map<std::string, Bytes> current = files;
  std::size_t next_victim = 0;
  bool note_written = false;
  for (int w = 0; w < seq_windows; ++w) {
    const int last_tick = w * cfg.stride + cfg.window_width - 1;
    if (!paths.empty() && uniform(rng, 0.0, 1.0) < wl.benign_write_rate) {
      const auto& p = paths[uniform_int(rng, 0, static_cast<int>(paths.size()) - 1)];
      auto content = current[p];
      if (!content.empty()) content[uniform_int(rng, 0, static_cast<int>(content.size()) - 1)] ^= 0x5A;
      current[p] = content;
      script.push_back({w, FsOp::Kind::Write, p, content});
    }
    if (!infect || last_tick < *infect) continue;
    if (!note_written) {
      script.push_back({w, FsOp::Kind::Create, "README_RESTORE_FILES.txt", "your files are encrypted\n"});
      note_written = true;
    }
    for (int e = 0; e < wl.encrypt_per_window && next_victim < paths.size(); ++e, ++next_victim) {
      const auto& p = paths[next_victim];
      Bytes content = current[p];
      for (std::size_t i = 0; i < content.size(); ++i) content[i] ^= key[i % key.size()];
      current[p] = content;
      script.push_back({w, FsOp::Kind::Write, p, content});
    }
  }
  return script;
}

// ---------------------------------------------------------------------------

void fill_latency(DetectionEvent& event, const DetectorConfig& cfg) {
  event.alert_tick.reset();
  event.latency_ms.reset();
  event.early_alert = false;
  if (!event.alert_window) return;
  event.alert_tick = *event.alert_window * cfg.stride + cfg.window_width - 1;
  if (!event.infect_tick) return;
  const int diff = *event.alert_tick - *event.infect_tick;
  event.early_alert = diff < 0;
  event.latency_ms = event.early_alert ? 0.0 : diff * static_cast<double>(trace::kTickMs);
}

SessionOutcome run_session(const trace::RawTrace& trace, const Model& model, const DetectorConfig& cfg,
                           const FsScript& script, VirtualFs fs) {
  const auto seq = trace::segment_windows(trace, cfg.window_width, cfg.stride);
  Session session(model, cfg);
  session.init();
  SnapshotStore store;
  SessionOutcome out;
  out.event.infect_tick = trace.infect_tick();
  std::size_t next_op = 0;
  std::vector<int> pending;  // windows of the current above-threshold run
  for (const auto& window : seq.windows) {
    const int w = window.window_index;
    fs.begin_window(w);
    for (; next_op < script.size() && script[next_op].window <= w; ++next_op) {
      const auto& op = script[next_op];
      if (op.window < w) continue;
      if (op.kind == FsOp::Kind::Write && fs.exists(op.path))
        fs.write(op.path, op.bytes);
      else
        fs.create(op.path, op.bytes);
    }
    snapshot_window(fs, store, w);
    out.max_live_backups = std::max(out.max_live_backups, store.live_windows());
    const auto r = session.step(window);
    if (r.fired) {
      out.event.alert_window = w;
      try {
        out.event.restore = rollback(fs, store, w, cfg.confirm_windows);
      } catch (const PartialRestoreError& e) {
        out.event.restore = e.report();
      }
      break;
    }
    if (r.above_threshold) {
      pending.push_back(w);
    } else {
      for (int p : pending) store.discard(p);
      pending.clear();
      store.discard(w);
    }
    // Only the last k-1 windows can still join a confirmation span.
    while (static_cast<int>(pending.size()) > cfg.confirm_windows - 1) {
      store.discard(pending.front());
      pending.erase(pending.begin());
    }
  }
  out.event.scores = session.scores();
  fill_latency(out.event, cfg);
  out.fs = std::move(fs);
  return out;
}

std::string session_report_json(const DetectionEvent& e, const std::string& meta_json) {
  nlohmann::json j;
  auto opt = [](const auto& v) -> nlohmann::json { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j["alert_window"] = opt(e.alert_window);
  j["alert_tick"] = opt(e.alert_tick);
  j["latency_ms"] = opt(e.latency_ms);
  j["early_alert"] = e.early_alert;
  j["infect_tick"] = opt(e.infect_tick);
  j["scores"] = e.scores;
  j["restored"] = e.restore.restored;
  j["deleted"] = e.restore.deleted;
  j["lost"] = e.restore.lost;
  if (!meta_json.empty()) j["meta"] = nlohmann::json::parse(meta_json);
  return j.dump(2) + "\n";
}

}  // namespace rdetect::detector
