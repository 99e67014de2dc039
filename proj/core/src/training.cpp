#include "rdetect/training.hpp"

#include <charconv>
#include <cmath>

#include "rdetect/binary_io.hpp"
#include "rdetect/error.hpp"
#include "rdetect/rng.hpp"

namespace rdetect::training {

namespace {

constexpr const char* kCheckpointMagic = "rdetect-train v1";

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void AdamState::init(std::span<const std::span<double>> params) {
  first_moment.clear();
  second_moment.clear();
  for (auto p : params) {
    first_moment.emplace_back(p.size(), 0.0);
    second_moment.emplace_back(p.size(), 0.0);
  }
  step = 0;
}

void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state) {
  if (params.size() != grads.size()) throw InvalidArgument("Adam: parameter/gradient count mismatch");
  if (state.first_moment.empty() && state.step == 0) state.init(params);
  if (state.first_moment.size() != params.size()) throw InvalidArgument("Adam: state does not match parameters");
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto g = grads[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (p.size() != g.size() || p.size() != m.size()) throw InvalidArgument("Adam: tensor shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm) {
  double sq = 0.0;
  for (auto g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto g : grads)
      for (double& v : g) v *= scale;
  }
  return norm;
}

std::vector<std::span<const double>> const_views(const std::vector<std::span<double>>& v) {
  return {v.begin(), v.end()};
}

void TrainConfig::validate() const {
  if (epochs < 0) throw InvalidArgument("epochs must be non-negative");
  if (batch_size < 1 || batches_per_epoch < 1) throw InvalidArgument("batch size must be positive");
  if (hidden_dim < 1 || layers < 1) throw InvalidArgument("encoder dimensions must be positive");
  if (!(adam.lr > 0)) throw InvalidArgument("learning rate must be positive");
  weights.validate();
}

// ---------------------------------------------------------------------------

std::string serialize(const TrainingCheckpoint& ckpt) {
  io::Writer w;
  w.str(kCheckpointMagic);
  encoder::write_encoder(w, ckpt.params);
  w.i64(ckpt.epochs_done);
  const auto& a = ckpt.adam;
  w.f64(a.config.lr);
  w.f64(a.config.beta1);
  w.f64(a.config.beta2);
  w.f64(a.config.eps);
  w.i64(a.step);
  w.u32(static_cast<std::uint32_t>(a.first_moment.size()));
  for (std::size_t k = 0; k < a.first_moment.size(); ++k) {
    w.u64(a.first_moment[k].size());
    w.doubles(a.first_moment[k].data(), a.first_moment[k].size());
    w.doubles(a.second_moment[k].data(), a.second_moment[k].size());
  }
  w.u32(static_cast<std::uint32_t>(ckpt.log.size()));
  for (const auto& row : ckpt.log) {
    w.i64(row.epoch);
    w.f64(row.breakdown.pair);
    w.f64(row.breakdown.cluster);
    w.f64(row.breakdown.latency);
    w.f64(row.breakdown.total);
    w.f64(row.delta);
  }
  return w.bytes();
}

TrainingCheckpoint deserialize_checkpoint(const std::string& bytes) {
  io::Reader r(bytes);
  const auto magic = r.str();
  if (magic.rfind("rdetect-train ", 0) != 0)
    throw ParseError(ParseError::Kind::BadMagic, "not an rdetect training checkpoint");
  if (magic != kCheckpointMagic)
    throw ParseError(ParseError::Kind::VersionMismatch, "unsupported training checkpoint version: " + magic);
  TrainingCheckpoint c;
  c.params = encoder::read_encoder(r);
  c.epochs_done = static_cast<int>(r.i64());
  c.adam.config.lr = r.f64();
  c.adam.config.beta1 = r.f64();
  c.adam.config.beta2 = r.f64();
  c.adam.config.eps = r.f64();
  c.adam.step = r.i64();
  const auto n = r.u32();
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto len = r.u64();
    c.adam.first_moment.emplace_back(len);
    c.adam.second_moment.emplace_back(len);
    r.doubles(c.adam.first_moment.back().data(), len);
    r.doubles(c.adam.second_moment.back().data(), len);
  }
  const auto rows = r.u32();
  for (std::uint32_t k = 0; k < rows; ++k) {
    EpochLog row;
    row.epoch = static_cast<int>(r.i64());
    row.breakdown.pair = r.f64();
    row.breakdown.cluster = r.f64();
    row.breakdown.latency = r.f64();
    row.breakdown.total = r.f64();
    row.delta = r.f64();
    c.log.push_back(row);
  }
  if (!r.at_end()) throw ParseError(ParseError::Kind::MalformedHeader, "trailing bytes in training checkpoint");
  return c;
}

void save_checkpoint(const std::string& path, const TrainingCheckpoint& ckpt) { io::write_file(path, serialize(ckpt)); }

TrainingCheckpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path)); }

// ---------------------------------------------------------------------------

EncoderTrainer::EncoderTrainer(const trace::Dataset& data, TrainConfig cfg)
    : cfg_(std::move(cfg)),
      sampler_(data, cfg_.window_width, cfg_.stride, cfg_.modified_positive_probability) {
  cfg_.validate();
  const int input_dim = data.traces.front().slots() * cfg_.window_width;
  state_.params = encoder::EncoderParams::random(input_dim, cfg_.hidden_dim, cfg_.seed, cfg_.layers);
  state_.adam.config = cfg_.adam;
  state_.adam.init(state_.params.tensors());
}

EncoderTrainer::EncoderTrainer(const trace::Dataset& data, TrainConfig cfg, TrainingCheckpoint resume)
    : cfg_(std::move(cfg)),
      sampler_(data, cfg_.window_width, cfg_.stride, cfg_.modified_positive_probability),
      state_(std::move(resume)) {
  cfg_.validate();
  if (state_.params.input_dim() != data.traces.front().slots() * cfg_.window_width)
    throw InvalidArgument("checkpoint input dim does not match dataset windows");
}

void EncoderTrainer::run_epoch() {
  const int epoch = state_.epochs_done;
  loss::LossBreakdown sum;
  std::optional<double> delta = cfg_.weights.delta;
  double used_delta = 0.0;
  for (auto t : state_.params.tensors())
    for (double v : t)
      if (!std::isfinite(v)) throw TrainingDiverged("non-finite encoder parameter at epoch " + std::to_string(epoch));
  for (int b = 0; b < cfg_.batches_per_epoch; ++b) {
    auto rng = keyed_rng({cfg_.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b), 0x7A1DULL});
    std::vector<loss::Triplet> batch;
    batch.reserve(cfg_.batch_size);
    for (int i = 0; i < cfg_.batch_size; ++i) batch.push_back(sampler_.sample(rng));

    auto weights = cfg_.weights;
    weights.delta = delta;
    auto eval = loss::evaluate_batch(state_.params, batch, weights, true);
    // Calibrated once per epoch, on its first batch.
    delta = eval.delta;
    used_delta = eval.delta;

    const auto& bd = eval.breakdown;
    auto grads = eval.grads.tensors();
    bool finite = std::isfinite(bd.total);
    for (auto g : grads)
      for (double v : g) finite = finite && std::isfinite(v);
    if (!finite)
      throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                             ": pair=" + fmt_double(bd.pair) + " cluster=" + fmt_double(bd.cluster) +
                             " latency=" + fmt_double(bd.latency) + " delta=" + fmt_double(eval.delta));
    clip_grad_norm(grads, cfg_.clip_norm);
    adam_step(state_.params.tensors(), const_views(grads), state_.adam);
    sum.pair += bd.pair;
    sum.cluster += bd.cluster;
    sum.latency += bd.latency;
  }
  const double n = cfg_.batches_per_epoch;
  EpochLog row;
  row.epoch = epoch;
  row.breakdown = loss::total_loss(sum.pair / n, sum.cluster / n, sum.latency / n, cfg_.weights);
  row.delta = used_delta;
  state_.log.push_back(row);
  ++state_.epochs_done;
}

void EncoderTrainer::run(int max_epochs) {
  int ran = 0;
  while (state_.epochs_done < cfg_.epochs && (max_epochs < 0 || ran < max_epochs)) {
    run_epoch();
    ++ran;
  }
}

EncoderTrainResult train_encoder(const trace::Dataset& data, const TrainConfig& cfg) {
  EncoderTrainer trainer(data, cfg);
  trainer.run();
  return {trainer.params(), trainer.log()};
}

std::string format_training_log(const std::vector<EpochLog>& log) {
  std::string out = "epoch,pair,cluster,latency,total,delta\n";
  for (const auto& r : log) {
    out += std::to_string(r.epoch) + "," + fmt_double(r.breakdown.pair) + "," + fmt_double(r.breakdown.cluster) +
           "," + fmt_double(r.breakdown.latency) + "," + fmt_double(r.breakdown.total) + "," + fmt_double(r.delta) +
           "\n";
  }
  return out;
}

}  // namespace rdetect::training
