#include "rdetect/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rdetect/error.hpp"
#include "rdetect/rng.hpp"

namespace rdetect {

const char* to_string(ProgramClass c) { return c == ProgramClass::Benign ? "benign" : "ransom"; }

namespace trace {

namespace {

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::Benign: return "benign";
    case Phase::Init: return "init";
    case Phase::Infect: return "infect";
  }
  return "?";
}

std::vector<int> random_subset(Rng& rng, int universe, int count) {
  std::vector<int> idx(universe);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::clamp(count, 0, universe));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

const char* to_string(EvasionKind k) {
  switch (k) {
    case EvasionKind::CodeMorphing: return "code_morphing";
    case EvasionKind::DelayedActivation: return "delayed_activation";
    case EvasionKind::LogicReordering: return "logic_reordering";
  }
  return "?";
}

std::optional<int> RawTrace::infect_tick() const {
  for (const auto& m : phase_marks) {
    if (m.phase == Phase::Infect) return m.tick;
  }
  return std::nullopt;
}

int RawTrace::pre_infect_end() const { return infect_tick().value_or(n_ticks()); }

void RawTrace::validate() const {
  if (samples.rows() < 1) throw InvalidArgument("trace must have at least one slot");
  if (samples.cols() < 1) throw InvalidArgument("trace must have at least one tick");
  if (!samples.allFinite()) throw InvalidArgument("trace contains non-finite samples");
  if (phase_marks.empty()) throw InvalidArgument("trace has no phase marks");
  for (std::size_t i = 0; i < phase_marks.size(); ++i) {
    if (phase_marks[i].tick < 0 || phase_marks[i].tick >= n_ticks())
      throw InvalidArgument("phase mark outside trace");
    if (i > 0 && phase_marks[i].tick <= phase_marks[i - 1].tick)
      throw InvalidArgument("phase marks must be strictly increasing");
  }
}

bool RawTrace::operator==(const RawTrace& other) const {
  return label == other.label && family_id == other.family_id &&
         phase_marks == other.phase_marks && samples.rows() == other.samples.rows() &&
         samples.cols() == other.samples.cols() && samples == other.samples;
}

FamilyProfile family_profile(int family_id, const GeneratorConfig& cfg) {
  if (family_id < 0) throw InvalidArgument("family_id must be non-negative");
  if (cfg.slots < 1) throw InvalidArgument("generator needs at least one slot");
  auto rng = keyed_rng({0x5EEDFA11ULL, static_cast<std::uint64_t>(family_id),
                        static_cast<std::uint64_t>(cfg.slots)});
  FamilyProfile p;
  p.kind = static_cast<FamilyProfile::Kind>(family_id % 3);
  p.slot_mean.resize(cfg.slots);
  for (int s = 0; s < cfg.slots; ++s) p.slot_mean[s] = uniform(rng, -0.5, 0.5);
  p.ar_coeff = uniform(rng, 0.5, 0.85);
  p.period = uniform_int(rng, 8, 20);
  p.periodic_slots = random_subset(rng, cfg.slots, cfg.slots / 2);
  p.burst_slots = random_subset(rng, cfg.slots, std::max(1, cfg.slots / 4));
  p.crypto_slots = random_subset(rng, cfg.slots, cfg.crypto_slots);
  p.crypto_sign = (rng() & 1U) ? 1.0 : -1.0;
  p.ramp_ticks = uniform_int(rng, std::max(1, cfg.ramp_min_ticks),
                             std::max(cfg.ramp_min_ticks, cfg.ramp_max_ticks));
  switch (p.kind) {
    case FamilyProfile::Kind::Steady: break;
    case FamilyProfile::Kind::Periodic: p.periodic_amplitude = 0.8 * cfg.noise_std; break;
    case FamilyProfile::Kind::Bursty:
      p.burst_rate = 0.04;
      p.burst_amplitude = 1.5 * cfg.noise_std;
      p.burst_length = 3;
      break;
  }
  return p;
}

RawTrace generate_trace(ProgramClass cls, int family_id, int duration_ticks, std::uint64_t seed,
                        const GeneratorConfig& cfg, int window_width) {
  if (window_width < 1) throw InvalidArgument("window width must be positive");
  if (duration_ticks < 2 * window_width)
    throw InvalidArgument("duration_ticks " + std::to_string(duration_ticks) +
                          " shorter than two windows of " + std::to_string(window_width));
  const auto prof = family_profile(family_id, cfg);
  auto rng = keyed_rng({seed, static_cast<std::uint64_t>(family_id),
                        static_cast<std::uint64_t>(cls)});
  const int S = cfg.slots;
  const double sigma = cfg.noise_std;
  const double innov = sigma * std::sqrt(1.0 - prof.ar_coeff * prof.ar_coeff);

  RawTrace out;
  out.label = cls;
  out.family_id = family_id;
  out.samples.resize(S, duration_ticks);

  int infect = -1;
  if (cls == ProgramClass::Ransomware) {
    const int lo = static_cast<int>(std::ceil(0.2 * duration_ticks));
    const int hi = std::max(lo, static_cast<int>(std::floor(0.8 * duration_ticks)) - 1);
    infect = uniform_int(rng, lo, hi);
    out.phase_marks = {{0, Phase::Init}, {infect, Phase::Infect}};
  } else {
    out.phase_marks = {{0, Phase::Benign}};
  }

  Eigen::VectorXd ar(S);
  for (int s = 0; s < S; ++s) ar[s] = normal(rng, 0.0, sigma);
  Eigen::VectorXd phase_offset(S);
  for (int s = 0; s < S; ++s) phase_offset[s] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  std::vector<char> is_crypto(S, 0);
  for (int s : prof.crypto_slots) is_crypto[s] = 1;
  int burst_left = 0;

  for (int t = 0; t < duration_ticks; ++t) {
    for (int s = 0; s < S; ++s) ar[s] = prof.ar_coeff * ar[s] + innov * normal(rng);
    Eigen::VectorXd col = prof.slot_mean + ar;

    if (prof.periodic_amplitude > 0.0) {
      for (int s : prof.periodic_slots)
        col[s] += prof.periodic_amplitude *
                  std::sin(2.0 * std::numbers::pi * t / prof.period + phase_offset[s]);
    }
    if (prof.burst_rate > 0.0) {
      if (burst_left == 0 && uniform(rng, 0.0, 1.0) < prof.burst_rate) burst_left = prof.burst_length;
      if (burst_left > 0) {
        for (int s : prof.burst_slots) col[s] += prof.burst_amplitude;
        --burst_left;
      }
    }
    if (infect >= 0 && t >= infect) {
      const double ramp = static_cast<double>(t - infect) / prof.ramp_ticks;
      const double a = std::min(1.0, cfg.ramp_floor + (1.0 - cfg.ramp_floor) * ramp);
      // Phase follows the onset, not the window grid.
      const double toggle = ((t - infect) % 2 == 0) ? 1.0 : -1.0;
      for (int s = 0; s < S; ++s) {
        if (is_crypto[s]) {
          col[s] += a * sigma *
                    (prof.crypto_sign * cfg.infect_shift +
                     cfg.infect_toggle * toggle * (1.0 + 0.5 * std::abs(normal(rng))) +
                     cfg.infect_volatility * normal(rng));
        } else {
          col[s] += a * sigma * 0.3 * normal(rng);
        }
      }
    }
    out.samples.col(t) = col;
  }
  return out;
}

RawTrace apply_evasion(const RawTrace& trace, const Evasion& evasion, std::uint64_t seed) {
  trace.validate();
  const double intensity = std::clamp(evasion.intensity, 0.0, 1.0);
  auto rng = keyed_rng({seed, static_cast<std::uint64_t>(evasion.kind), 0xE7A5ULL});
  const int n = trace.n_ticks();
  const int pre_end = trace.pre_infect_end();
  RawTrace out = trace;

  switch (evasion.kind) {
    case EvasionKind::CodeMorphing: {
      const int inserts = static_cast<int>(std::lround(intensity * n));
      std::vector<int> after(n, 0);
      for (int i = 0; i < inserts; ++i) ++after[uniform_int(rng, 0, n - 1)];
      out.samples.resize(trace.slots(), n + inserts);
      std::vector<int> new_pos(n);
      int c = 0;
      for (int j = 0; j < n; ++j) {
        new_pos[j] = c;
        out.samples.col(c++) = trace.samples.col(j);
        for (int k = 0; k < after[j]; ++k) {
          Eigen::VectorXd dup = trace.samples.col(j);
          if (evasion.jitter_std > 0.0) {
            for (int s = 0; s < dup.size(); ++s) dup[s] += normal(rng, 0.0, evasion.jitter_std);
          }
          out.samples.col(c++) = dup;
        }
      }
      for (auto& m : out.phase_marks) m.tick = new_pos[m.tick];
      break;
    }
    case EvasionKind::DelayedActivation: {
      const int extra = static_cast<int>(std::lround(intensity * pre_end));
      if (extra == 0) break;
      const int stretched = pre_end + extra;
      out.samples.resize(trace.slots(), n + extra);
      for (int j = 0; j < stretched; ++j) {
        const int src = static_cast<int>((static_cast<long long>(j) * pre_end) / stretched);
        out.samples.col(j) = trace.samples.col(src);
      }
      out.samples.rightCols(n - pre_end) = trace.samples.rightCols(n - pre_end);
      for (auto& m : out.phase_marks) {
        if (m.tick >= pre_end) m.tick += extra;
      }
      break;
    }
    case EvasionKind::LogicReordering: {
      const int b = std::max(1, evasion.block_ticks);
      const int blocks = pre_end / b;
      const int chosen = static_cast<int>(std::lround(intensity * blocks));
      if (chosen < 2) break;
      auto slots = random_subset(rng, blocks, chosen);
      auto perm = slots;
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t i = 0; i < slots.size(); ++i) {
        out.samples.middleCols(slots[i] * b, b) = trace.samples.middleCols(perm[i] * b, b);
      }
      break;
    }
  }
  return out;
}

TraceSequence segment_windows(const RawTrace& trace, int width, int stride) {
  if (width < 1 || stride < 1) throw InvalidArgument("window width and stride must be positive");
  if (stride > width) throw InvalidArgument("stride must not exceed window width");
  if (width > trace.n_ticks())
    throw InvalidArgument("window width " + std::to_string(width) + " exceeds trace length " +
                          std::to_string(trace.n_ticks()));
  TraceSequence seq;
  seq.label = trace.label;
  seq.family_id = trace.family_id;
  seq.infect_tick = trace.infect_tick();
  const int count = (trace.n_ticks() - width) / stride + 1;
  seq.windows.reserve(count);
  for (int k = 0; k < count; ++k) {
    seq.windows.push_back({trace.samples.middleCols(k * stride, width), k, k * stride});
  }
  return seq;
}

Dataset build_dataset(const GeneratorConfig& cfg, std::uint64_t seed, int window_width) {
  if (cfg.benign_count < 1 || cfg.ransomware_count < 1)
    throw InvalidArgument("dataset needs a positive count for both classes");
  std::vector<int> families = cfg.family_subset;
  if (families.empty()) {
    if (cfg.families < 1) throw InvalidArgument("dataset needs at least one family");
    families.resize(cfg.families);
    std::iota(families.begin(), families.end(), 0);
  }
  if (cfg.min_ticks > cfg.max_ticks) throw InvalidArgument("min_ticks exceeds max_ticks");

  Dataset ds;
  ds.traces.reserve(cfg.benign_count + cfg.ransomware_count);
  for (auto cls : {ProgramClass::Benign, ProgramClass::Ransomware}) {
    const int count = cls == ProgramClass::Benign ? cfg.benign_count : cfg.ransomware_count;
    for (int i = 0; i < count; ++i) {
      auto rng = keyed_rng({seed, static_cast<std::uint64_t>(cls), static_cast<std::uint64_t>(i)});
      const int family = families[i % families.size()];
      const int ticks = uniform_int(rng, cfg.min_ticks, cfg.max_ticks);
      ds.traces.push_back(generate_trace(cls, family, ticks, rng(), cfg, window_width));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------

std::string format_trace(const RawTrace& trace) {
  trace.validate();
  std::string out;
  out += "#etbtrace v1 slots=" + std::to_string(trace.slots()) +
         " ticks=" + std::to_string(trace.n_ticks()) + " label=" + to_string(trace.label) +
         " family=" + std::to_string(trace.family_id) + "\n#phases ";
  for (std::size_t i = 0; i < trace.phase_marks.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(trace.phase_marks[i].tick) + ":" + phase_name(trace.phase_marks[i].phase);
  }
  out += '\n';
  char buf[64];
  for (int s = 0; s < trace.slots(); ++s) {
    for (int t = 0; t < trace.n_ticks(); ++t) {
      if (t) out += ',';
      auto res = std::to_chars(buf, buf + sizeof(buf), trace.samples(s, t));
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

namespace {

[[noreturn]] void fail(ParseError::Kind kind, const std::string& msg) {
  throw ParseError(kind, "trace parse error: " + msg);
}

int parse_int_field(const std::string& token, const std::string& key) {
  const std::string prefix = key + "=";
  if (token.rfind(prefix, 0) != 0) fail(ParseError::Kind::MalformedHeader, "expected " + prefix);
  int v = 0;
  const char* b = token.data() + prefix.size();
  const char* e = token.data() + token.size();
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) fail(ParseError::Kind::MalformedHeader, "bad " + key);
  return v;
}

}  // namespace

RawTrace parse_trace(const std::string& text) {
  if (text.empty()) fail(ParseError::Kind::Empty, "empty input");
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::istringstream hdr(line);
  std::string magic, version, tslots, tticks, tlabel, tfamily;
  if (!(hdr >> magic >> version >> tslots >> tticks >> tlabel >> tfamily) || magic != "#etbtrace")
    fail(ParseError::Kind::MalformedHeader, "missing #etbtrace header");
  if (version != "v1") fail(ParseError::Kind::MalformedHeader, "unsupported version " + version);
  const int slots = parse_int_field(tslots, "slots");
  const int ticks = parse_int_field(tticks, "ticks");
  const int family = parse_int_field(tfamily, "family");
  if (slots < 1 || ticks < 1) fail(ParseError::Kind::MalformedHeader, "non-positive dimensions");

  RawTrace out;
  out.family_id = family;
  if (tlabel == "label=benign") out.label = ProgramClass::Benign;
  else if (tlabel == "label=ransom") out.label = ProgramClass::Ransomware;
  else fail(ParseError::Kind::MalformedHeader, "bad label");

  if (!std::getline(in, line) || line.rfind("#phases ", 0) != 0)
    fail(ParseError::Kind::MalformedHeader, "missing #phases line");
  std::istringstream ph(line.substr(8));
  std::string item;
  while (std::getline(ph, item, ',')) {
    auto colon = item.find(':');
    if (colon == std::string::npos) fail(ParseError::Kind::MalformedHeader, "bad phase mark");
    PhaseMark m;
    auto res = std::from_chars(item.data(), item.data() + colon, m.tick);
    if (res.ec != std::errc() || res.ptr != item.data() + colon)
      fail(ParseError::Kind::MalformedHeader, "bad phase tick");
    const auto name = item.substr(colon + 1);
    if (name == "benign") m.phase = Phase::Benign;
    else if (name == "init") m.phase = Phase::Init;
    else if (name == "infect") m.phase = Phase::Infect;
    else fail(ParseError::Kind::MalformedHeader, "bad phase name " + name);
    out.phase_marks.push_back(m);
  }

  out.samples.resize(slots, ticks);
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (row >= slots) fail(ParseError::Kind::MalformedHeader, "more data rows than slots");
    const char* p = line.data();
    const char* end = line.data() + line.size();
    for (int t = 0; t < ticks; ++t) {
      if (p >= end) fail(ParseError::Kind::Truncated, "row " + std::to_string(row) + " too short");
      double v = 0.0;
      auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc()) {
        if (std::string_view(p, end - p).starts_with("nan") ||
            std::string_view(p, end - p).starts_with("inf") ||
            std::string_view(p, end - p).starts_with("-inf"))
          fail(ParseError::Kind::NonFinite, "non-finite value");
        fail(ParseError::Kind::MalformedHeader, "unparseable value");
      }
      if (!std::isfinite(v)) fail(ParseError::Kind::NonFinite, "non-finite value");
      out.samples(row, t) = v;
      p = res.ptr;
      if (t + 1 < ticks) {
        if (p >= end || *p != ',') fail(ParseError::Kind::Truncated, "row " + std::to_string(row) + " too short");
        ++p;
      }
    }
    if (p != end) fail(ParseError::Kind::MalformedHeader, "row " + std::to_string(row) + " too long");
    ++row;
  }
  if (row < slots) fail(ParseError::Kind::Truncated, "expected " + std::to_string(slots) + " rows, got " + std::to_string(row));
  try {
    out.validate();
  } catch (const InvalidArgument& e) {
    fail(ParseError::Kind::MalformedHeader, e.what());
  }
  return out;
}

void save_trace(const std::filesystem::path& path, const RawTrace& trace) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::Io, "cannot open " + path.string() + " for writing");
  f << format_trace(trace);
}

RawTrace load_trace(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_trace(ss.str());
}

std::vector<int> assign_folds(const Dataset& dataset, int folds, std::uint64_t seed) {
  if (folds < 1) throw InvalidArgument("fold count must be positive");
  std::map<std::pair<int, int>, std::vector<int>> groups;
  for (int i = 0; i < static_cast<int>(dataset.traces.size()); ++i) {
    const auto& t = dataset.traces[i];
    groups[{static_cast<int>(t.label), t.family_id}].push_back(i);
  }
  std::vector<int> fold(dataset.traces.size(), 0);
  int offset = 0;
  for (auto& [key, idx] : groups) {
    auto rng = keyed_rng({seed, static_cast<std::uint64_t>(key.first),
                          static_cast<std::uint64_t>(key.second), 0xF01DULL});
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) fold[idx[k]] = static_cast<int>((k + offset) % folds);
    offset += static_cast<int>(idx.size());
  }
  return fold;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, int folds,
                  const std::string& meta_json, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "traces");
  const auto fold = assign_folds(dataset, folds, seed);
  nlohmann::json manifest = meta_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta_json);
  manifest["format"] = "etbtrace-dataset v1";
  manifest["folds"] = folds;
  auto& entries = manifest["entries"] = nlohmann::json::array();
  char name[32];
  for (std::size_t i = 0; i < dataset.traces.size(); ++i) {
    std::snprintf(name, sizeof(name), "traces/trace_%05zu.csv", i);
    save_trace(dir / name, dataset.traces[i]);
    entries.push_back({{"path", name},
                       {"label", to_string(dataset.traces[i].label)},
                       {"family", dataset.traces[i].family_id},
                       {"fold", fold[i]},
                       {"split", fold[i] == 0 ? "test" : "train"}});
  }
  std::ofstream f(dir / "manifest.json", std::ios::binary);
  f << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json", std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::Io, "missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Kind::MalformedHeader, std::string("manifest.json: ") + e.what());
  }
  Dataset ds;
  for (const auto& e : manifest.at("entries")) {
    auto t = load_trace(dir / e.at("path").get<std::string>());
    if (to_string(t.label) != e.at("label").get<std::string>())
      throw ParseError(ParseError::Kind::MalformedHeader, "manifest label disagrees with trace header");
    ds.traces.push_back(std::move(t));
    ds.folds.push_back(e.value("fold", 0));
  }
  return ds;
}

}  // namespace trace
}  // namespace rdetect
