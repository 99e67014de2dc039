#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rdetect/encoder.hpp"
#include "rdetect/error.hpp"
#include "rdetect/nas.hpp"
#include "rdetect/trace.hpp"

namespace rdetect::detector {

struct DetectorConfig {
  double threshold = 0.9;
  int confirm_windows = 2;
  int window_width = 10;
  int stride = 10;

  void validate() const;
};

/// Fires once `k` consecutive scores exceed the threshold, then stays on.
class AlertLatch {
 public:
  AlertLatch(double threshold, int k);

  /// Feeds the score of the next window; returns whether the alert is on.
  bool push(double score);
  bool alerted() const { return alert_index_.has_value(); }
  std::optional<int> alert_index() const { return alert_index_; }
  int run_length() const { return run_; }
  int pushed() const { return pushed_; }

 private:
  double threshold_;
  int k_;
  int run_ = 0;
  int pushed_ = 0;
  std::optional<int> alert_index_;
};

struct Model {
  encoder::EncoderParams encoder;
  nas::PrunedArchitecture classifier;
};

struct StepResult {
  int window = 0;
  double score = 0.0;
  bool above_threshold = false;
  bool alert = false;
  /// True on the window where the alert first fires.
  bool fired = false;
};

/// Streaming detection over one trace. The model must outlive the session.
class Session {
 public:
  Session(const Model& model, DetectorConfig cfg);

  void init();
  bool initialized() const { return stream_.initialized(); }
  StepResult step(const trace::TraceWindow& window);

  const std::vector<double>& scores() const { return scores_; }
  const AlertLatch& latch() const { return latch_; }
  const DetectorConfig& config() const { return cfg_; }
  /// Mean of the hidden states seen so far.
  Eigen::VectorXd pooled() const;

 private:
  const Model* model_;
  DetectorConfig cfg_;
  encoder::EncoderStream stream_;
  AlertLatch latch_;
  Eigen::VectorXd hidden_sum_;
  std::vector<double> scores_;
};

StepResult detect_step(Session& session, const trace::TraceWindow& window);

// ---------------------------------------------------------------------------
// Simulated filesystem with copy-on-write touch tracking.

using Bytes = std::string;

std::uint64_t content_hash(const Bytes& bytes);

struct Touch {
  std::string path;
  /// Content before the first modification in the window; empty when the
  /// file did not exist yet.
  std::optional<Bytes> pre_image;
  std::uint64_t pre_hash = 0;
};

class VirtualFs {
 public:
  VirtualFs() = default;
  explicit VirtualFs(std::map<std::string, Bytes> files) : files_(std::move(files)) {}

  /// Starts a new window; indices must not decrease.
  void begin_window(int window);
  int current_window() const { return window_; }

  void write(const std::string& path, const Bytes& bytes);
  void create(const std::string& path, const Bytes& bytes);
  void remove(const std::string& path);
  /// Restores without logging a touch.
  void restore(const std::string& path, const std::optional<Bytes>& content);

  bool exists(const std::string& path) const { return files_.count(path) != 0; }
  const Bytes& read(const std::string& path) const;
  const std::map<std::string, Bytes>& files() const { return files_; }
  /// Touches recorded in `window`, in first-touch order.
  const std::vector<Touch>& touched(int window) const;
  const std::map<int, std::vector<Touch>>& touch_log() const { return log_; }

 private:
  void record(const std::string& path);

  std::map<std::string, Bytes> files_;
  std::map<int, std::vector<Touch>> log_;
  int window_ = -1;
};

struct Backup {
  std::string path;
  std::optional<Bytes> content;
};

struct SnapshotStore {
  std::map<int, std::vector<Backup>> windows;

  bool has(int window) const { return windows.count(window) != 0; }
  void discard(int window) { windows.erase(window); }
  std::size_t live_windows() const { return windows.size(); }
};

/// Copies the pre-window content of every file first touched in `window`.
/// A second call for the same window changes nothing.
void snapshot_window(const VirtualFs& fs, SnapshotStore& store, int window);

struct RestoreReport {
  std::vector<std::string> restored;
  std::vector<std::string> deleted;
  std::vector<std::string> lost;
};

class PartialRestoreError : public Error {
 public:
  explicit PartialRestoreError(RestoreReport report);
  const RestoreReport& report() const { return report_; }

 private:
  RestoreReport report_;
};

/// Returns every file touched from the first window of the confirmation
/// span onwards to its content just before that span. Files without a
/// pre-image are deleted. Throws PartialRestoreError after restoring what
/// it can when a touched file has no backup.
RestoreReport rollback(VirtualFs& fs, const SnapshotStore& store, int alert_window, int confirm_windows);

// ---------------------------------------------------------------------------

struct FsOp {
  enum class Kind { Write, Create };
  int window = 0;
  Kind kind = Kind::Write;
  std::string path;
  Bytes bytes;
  bool operator==(const FsOp&) const = default;
};

using FsScript = std::vector<FsOp>;

std::string format_fs_script(const FsScript& script);
FsScript parse_fs_script(const std::string& json);

std::string to_hex(const Bytes& bytes);
Bytes from_hex(const std::string& hex);

struct WorkloadConfig {
  int files = 12;
  int min_bytes = 64;
  int max_bytes = 256;
  /// Files encrypted per infect-phase window.
  int encrypt_per_window = 2;
  /// Probability that a window carries one ordinary write.
  double benign_write_rate = 0.2;
};

std::map<std::string, Bytes> make_initial_files(const WorkloadConfig& cfg, std::uint64_t seed);

/// Workload for one trace: occasional ordinary edits, plus, for ransomware,
/// XOR encryption of documents and a ransom note from the first window that
/// overlaps the infect phase.
FsScript make_workload(const trace::RawTrace& trace, const std::map<std::string, Bytes>& files,
                       const DetectorConfig& cfg, const WorkloadConfig& wl, std::uint64_t seed);

struct DetectionEvent {
  std::optional<int> alert_window;
  std::optional<int> alert_tick;
  std::optional<double> latency_ms;
  /// Alert fired before the first infect tick (latency recorded as 0).
  bool early_alert = false;
  std::optional<int> infect_tick;
  std::vector<double> scores;
  RestoreReport restore;
  bool operator==(const DetectionEvent& o) const {
    return alert_window == o.alert_window && alert_tick == o.alert_tick && latency_ms == o.latency_ms &&
           early_alert == o.early_alert && infect_tick == o.infect_tick && scores == o.scores &&
           restore.restored == o.restore.restored && restore.deleted == o.restore.deleted &&
           restore.lost == o.restore.lost;
  }
};

struct SessionOutcome {
  DetectionEvent event;
  VirtualFs fs;
  std::size_t max_live_backups = 0;
};

/// Runs the detection loop window by window: apply the script for the
/// window, snapshot, score, and roll back once the alert fires. Stops at
/// the alert.
SessionOutcome run_session(const trace::RawTrace& trace, const Model& model, const DetectorConfig& cfg,
                           const FsScript& script, VirtualFs fs);

/// Latency from the first infect tick to the last tick of the alert window.
void fill_latency(DetectionEvent& event, const DetectorConfig& cfg);

std::string session_report_json(const DetectionEvent& event, const std::string& meta_json = "");

}  // namespace rdetect::detector
