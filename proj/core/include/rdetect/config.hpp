#pragma once

#include <cstdint>
#include <string>

#include "rdetect/detector.hpp"
#include "rdetect/eval.hpp"
#include "rdetect/pipeline.hpp"
#include "rdetect/trace.hpp"

namespace rdetect {

/// Library version recorded in every output file.
inline constexpr const char* kVersion = "0.1.0";

/// Raised for unreadable configs, unknown keys and out-of-range values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 1;
  trace::GeneratorConfig generator;
  int folds = 5;
  pipeline::PipelineConfig pipeline;
  detector::DetectorConfig detector;
  detector::WorkloadConfig workload;
  eval::AdaptivityConfig adaptivity;
  int robustness_trials = 20;
  /// Test fold used by the single-model commands (search, detect, ...).
  int test_fold = 0;

  void validate() const;
};

/// Parses a config document. Every key is optional; unknown keys throw.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
/// Canonical JSON (sorted keys, all fields present).
std::string config_to_json(const RunConfig& cfg);
/// FNV-1a of the canonical JSON, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

}  // namespace rdetect
