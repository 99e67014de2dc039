#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace rdetect {

enum class ProgramClass : int { Benign = 0, Ransomware = 1 };

const char* to_string(ProgramClass c);

namespace trace {

/// Nominal sampling period of one trace column.
inline constexpr int kTickMs = 50;

enum class Phase { Benign, Init, Infect };

struct PhaseMark {
  int tick = 0;
  Phase phase = Phase::Benign;
  bool operator==(const PhaseMark&) const = default;
};

/// Simulated embedded-trace-buffer capture: one row per buffer slot, one
/// column per sampling tick.
struct RawTrace {
  Eigen::MatrixXd samples;
  ProgramClass label = ProgramClass::Benign;
  int family_id = 0;
  std::vector<PhaseMark> phase_marks;

  int slots() const { return static_cast<int>(samples.rows()); }
  int n_ticks() const { return static_cast<int>(samples.cols()); }

  /// First tick of the infect phase, if the trace has one.
  std::optional<int> infect_tick() const;

  /// End of the region that precedes encryption activity: the infect tick
  /// for ransomware, the whole trace otherwise.
  int pre_infect_end() const;

  /// Throws InvalidArgument when an invariant is broken.
  void validate() const;

  bool operator==(const RawTrace& other) const;
};

struct TraceWindow {
  Eigen::MatrixXd values;  // slots x width
  int window_index = 0;
  int origin_tick = 0;
};

struct TraceSequence {
  std::vector<TraceWindow> windows;
  ProgramClass label = ProgramClass::Benign;
  int family_id = 0;
  std::optional<int> infect_tick;

  int length() const { return static_cast<int>(windows.size()); }
};

enum class EvasionKind { CodeMorphing, DelayedActivation, LogicReordering };

const char* to_string(EvasionKind k);

struct Evasion {
  EvasionKind kind = EvasionKind::CodeMorphing;
  double intensity = 0.0;  // [0, 1]
  /// Std of the noise added to duplicated columns (code morphing only).
  double jitter_std = 0.05;
  /// Block length for logic reordering.
  int block_ticks = 5;
};

/// Knobs of the synthetic trace generator. Defaults give the 2100-trace,
/// six-family corpus used throughout the evaluation harnesses.
struct GeneratorConfig {
  int slots = 16;
  int benign_count = 1050;
  int ransomware_count = 1050;
  int families = 6;
  int min_ticks = 180;
  int max_ticks = 240;
  double noise_std = 1.0;
  /// Number of slots carrying the encryption signature per ransomware family.
  int crypto_slots = 6;
  /// Mean shift on crypto slots at full infect intensity, in noise stds.
  double infect_shift = 1.2;
  /// Amplitude of the alternating (high toggle rate) component.
  double infect_toggle = 1.0;
  /// Extra innovation std on crypto slots at full intensity.
  double infect_volatility = 0.8;
  /// Infect activity ramps linearly to full intensity over this many ticks.
  int ramp_min_ticks = 20;
  int ramp_max_ticks = 40;
  /// Intensity reached at the first infect tick, before the ramp.
  double ramp_floor = 0.25;
  /// Restrict generation to these family ids (empty = 0..families-1).
  std::vector<int> family_subset;
};

/// Parameters that define one generator family; shared by the benign and
/// ransomware variants with the same id.
struct FamilyProfile {
  enum class Kind { Steady, Periodic, Bursty };
  Kind kind = Kind::Steady;
  Eigen::VectorXd slot_mean;
  double ar_coeff = 0.7;
  int period = 12;
  double periodic_amplitude = 0.0;
  std::vector<int> periodic_slots;
  double burst_rate = 0.0;
  double burst_amplitude = 0.0;
  int burst_length = 3;
  std::vector<int> burst_slots;
  std::vector<int> crypto_slots;
  double crypto_sign = 1.0;
  int ramp_ticks = 30;
};

FamilyProfile family_profile(int family_id, const GeneratorConfig& cfg);

RawTrace generate_trace(ProgramClass cls, int family_id, int duration_ticks, std::uint64_t seed,
                        const GeneratorConfig& cfg = {}, int window_width = 10);

RawTrace apply_evasion(const RawTrace& trace, const Evasion& evasion, std::uint64_t seed);

/// Splits a trace into windows of `width` ticks starting every `stride`
/// ticks; the trailing partial window is dropped.
TraceSequence segment_windows(const RawTrace& trace, int width, int stride);

struct Dataset {
  std::vector<RawTrace> traces;
  /// Fold per trace as recorded in a manifest; empty for generated sets.
  std::vector<int> folds;
};

Dataset build_dataset(const GeneratorConfig& cfg, std::uint64_t seed, int window_width = 10);

// ---------------------------------------------------------------------------
// File format

void save_trace(const std::filesystem::path& path, const RawTrace& trace);
RawTrace load_trace(const std::filesystem::path& path);

std::string format_trace(const RawTrace& trace);
RawTrace parse_trace(const std::string& text);

/// Writes one trace file per entry plus manifest.json. `meta` is merged into
/// the manifest as the provenance record (version, config hash, seed).
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, int folds,
                  const std::string& meta_json, std::uint64_t seed);
Dataset load_dataset(const std::filesystem::path& dir);

/// Stratified (label, family) fold assignment, deterministic under seed.
std::vector<int> assign_folds(const Dataset& dataset, int folds, std::uint64_t seed);

}  // namespace trace
}  // namespace rdetect
