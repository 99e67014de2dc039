#include "rdetect/encoder.hpp"

#include <cmath>

#include "rdetect/error.hpp"
#include "rdetect/rng.hpp"

namespace rdetect::encoder {

namespace {

constexpr const char* kMagic = "gru3 v1";

template <class F>
void for_each_array(GruLayerParams& p, F&& f) {
  f(p.w_update); f(p.w_reset); f(p.w_candidate);
  f(p.u_update); f(p.u_reset); f(p.u_candidate);
  f(p.b_update); f(p.b_reset); f(p.b_candidate);
}

template <class F>
void for_each_array(const GruLayerParams& p, F&& f) {
  f(p.w_update); f(p.w_reset); f(p.w_candidate);
  f(p.u_update); f(p.u_reset); f(p.u_candidate);
  f(p.b_update); f(p.b_reset); f(p.b_candidate);
}

Eigen::VectorXd sigmoid(const Eigen::VectorXd& a) {
  return (1.0 + (-a.array()).exp()).inverse().matrix();
}

}  // namespace

GruLayerParams GruLayerParams::zeros(int input_dim, int hidden_dim) {
  if (input_dim < 1 || hidden_dim < 1) throw InvalidArgument("GRU dimensions must be positive");
  GruLayerParams p;
  p.w_update = p.w_reset = p.w_candidate = Eigen::MatrixXd::Zero(hidden_dim, input_dim);
  p.u_update = p.u_reset = p.u_candidate = Eigen::MatrixXd::Zero(hidden_dim, hidden_dim);
  p.b_update = p.b_reset = p.b_candidate = Eigen::VectorXd::Zero(hidden_dim);
  return p;
}

void GruLayerParams::validate() const {
  const auto h = hidden_dim();
  const auto in = input_dim();
  auto check = [&](const Eigen::MatrixXd& m, Eigen::Index r, Eigen::Index c, const char* name) {
    if (m.rows() != r || m.cols() != c)
      throw InvalidArgument(std::string("GRU parameter ") + name + " has inconsistent shape");
    if (!m.allFinite()) throw InvalidArgument(std::string("GRU parameter ") + name + " not finite");
  };
  check(w_reset, h, in, "w_reset");
  check(w_candidate, h, in, "w_candidate");
  check(u_update, h, h, "u_update");
  check(u_reset, h, h, "u_reset");
  check(u_candidate, h, h, "u_candidate");
  check(b_update, h, 1, "b_update");
  check(b_reset, h, 1, "b_reset");
  check(b_candidate, h, 1, "b_candidate");
  if (!w_update.allFinite()) throw InvalidArgument("GRU parameter w_update not finite");
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) for_each_array(l, [&](const auto& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

std::vector<std::span<double>> EncoderParams::tensors() {
  std::vector<std::span<double>> out;
  for (auto& l : layers)
    for_each_array(l, [&](auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); });
  return out;
}

std::vector<std::span<const double>> EncoderParams::tensors() const {
  std::vector<std::span<const double>> out;
  for (const auto& l : layers)
    for_each_array(l, [&](const auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); });
  return out;
}

EncoderParams EncoderParams::zeros(int input_dim, int hidden_dim, int num_layers) {
  if (num_layers < 1) throw InvalidArgument("encoder needs at least one layer");
  EncoderParams p;
  for (int k = 0; k < num_layers; ++k)
    p.layers.push_back(GruLayerParams::zeros(k == 0 ? input_dim : hidden_dim, hidden_dim));
  return p;
}

EncoderParams EncoderParams::random(int input_dim, int hidden_dim, std::uint64_t seed, int num_layers) {
  auto p = zeros(input_dim, hidden_dim, num_layers);
  auto rng = keyed_rng({seed, 0x6E7C0DEULL});
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (auto t : p.tensors())
    for (double& v : t) v = uniform(rng, -bound, bound);
  return p;
}

void EncoderParams::validate() const {
  if (layers.empty()) throw InvalidArgument("encoder has no layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    layers[k].validate();
    if (k > 0 && layers[k].input_dim() != layers[k - 1].hidden_dim())
      throw InvalidArgument("encoder layer input dim does not match previous hidden dim");
  }
}

bool EncoderParams::operator==(const EncoderParams& other) const {
  auto a = tensors();
  auto b = other.tensors();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    for (std::size_t j = 0; j < a[i].size(); ++j)
      if (a[i][j] != b[i][j]) return false;
  }
  return true;
}

Eigen::MatrixXd flatten_windows(const trace::TraceSequence& seq) {
  if (seq.windows.empty()) throw InvalidArgument("cannot encode an empty sequence");
  const auto dim = seq.windows.front().values.size();
  Eigen::MatrixXd x(dim, seq.length());
  for (int t = 0; t < seq.length(); ++t) {
    const auto& w = seq.windows[t].values;
    if (w.size() != dim) throw InvalidArgument("windows in a sequence must share one shape");
    x.col(t) = Eigen::Map<const Eigen::VectorXd>(w.data(), dim);
  }
  return x;
}

void gru_cell(const GruLayerParams& p, const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev,
              Eigen::VectorXd& update, Eigen::VectorXd& reset, Eigen::VectorXd& candidate,
              Eigen::VectorXd& h_next) {
  update = sigmoid(p.w_update * x + p.u_update * h_prev + p.b_update);
  reset = sigmoid(p.w_reset * x + p.u_reset * h_prev + p.b_reset);
  const Eigen::VectorXd gated = reset.cwiseProduct(h_prev);
  candidate = (p.w_candidate * x + p.u_candidate * gated + p.b_candidate).array().tanh().matrix();
  h_next = (1.0 - update.array()).matrix().cwiseProduct(candidate) + update.cwiseProduct(h_prev);
}

ForwardResult gru_forward(const EncoderParams& params, const trace::TraceSequence& seq) {
  return gru_forward(params, flatten_windows(seq));
}

ForwardResult gru_forward(const EncoderParams& params, const Eigen::MatrixXd& inputs) {
  if (params.layers.empty()) throw InvalidArgument("encoder has no layers");
  if (inputs.cols() < 1) throw InvalidArgument("cannot encode an empty sequence");
  if (inputs.rows() != params.input_dim())
    throw InvalidArgument("input dim " + std::to_string(inputs.rows()) + " does not match encoder input dim " +
                          std::to_string(params.input_dim()));
  const auto T = inputs.cols();
  ForwardResult out;
  out.tape.layers.resize(params.layers.size());
  Eigen::MatrixXd layer_in = inputs;
  Eigen::VectorXd x, z, r, n, h_next;
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const auto& p = params.layers[k];
    auto& tape = out.tape.layers[k];
    const auto H = p.hidden_dim();
    tape.inputs = layer_in;
    tape.hidden = Eigen::MatrixXd::Zero(H, T + 1);
    tape.update.resize(H, T);
    tape.reset.resize(H, T);
    tape.candidate.resize(H, T);
    Eigen::VectorXd h = Eigen::VectorXd::Zero(H);
    for (Eigen::Index t = 0; t < T; ++t) {
      x = layer_in.col(t);
      gru_cell(p, x, h, z, r, n, h_next);
      tape.update.col(t) = z;
      tape.reset.col(t) = r;
      tape.candidate.col(t) = n;
      tape.hidden.col(t + 1) = h_next;
      h = h_next;
    }
    layer_in = tape.hidden.rightCols(T);
  }
  out.hidden.states = std::move(layer_in);
  return out;
}

BackwardResult gru_backward(const EncoderParams& params, const EncoderTape& tape,
                            const Eigen::MatrixXd& grad_hidden) {
  if (tape.layers.size() != params.layers.size())
    throw InvalidArgument("tape layer count does not match encoder");
  const auto T = tape.length();
  if (grad_hidden.cols() != T || grad_hidden.rows() != params.hidden_dim())
    throw InvalidArgument("hidden-state gradient shape does not match tape");

  BackwardResult out;
  out.param_grads = EncoderParams::zeros(params.input_dim(), params.hidden_dim(),
                                         static_cast<int>(params.layers.size()));
  Eigen::MatrixXd grad_out = grad_hidden;
  for (int k = static_cast<int>(params.layers.size()) - 1; k >= 0; --k) {
    const auto& p = params.layers[k];
    const auto& tp = tape.layers[k];
    auto& g = out.param_grads.layers[k];
    if (tp.inputs.rows() != p.input_dim() || tp.update.rows() != p.hidden_dim())
      throw InvalidArgument("tape shapes do not match encoder parameters");
    const auto H = p.hidden_dim();
    // Pre-activation gradients for all steps, then one GEMM per weight.
    Eigen::MatrixXd d_update(H, T), d_reset(H, T), d_cand(H, T), gated(H, T);
    Eigen::VectorXd carry = Eigen::VectorXd::Zero(H);
    for (int t = T - 1; t >= 0; --t) {
      const auto h_prev = tp.hidden.col(t);
      const auto z = tp.update.col(t);
      const auto r = tp.reset.col(t);
      const auto n = tp.candidate.col(t);
      const Eigen::VectorXd dh = grad_out.col(t) + carry;

      const Eigen::VectorXd dn = dh.cwiseProduct((1.0 - z.array()).matrix());
      const Eigen::VectorXd dz = dh.cwiseProduct(h_prev - n);
      Eigen::VectorXd dh_prev = dh.cwiseProduct(z);

      const Eigen::VectorXd da_n = dn.cwiseProduct((1.0 - n.array().square()).matrix());
      const Eigen::VectorXd d_gated = p.u_candidate.transpose() * da_n;
      const Eigen::VectorXd dr = d_gated.cwiseProduct(h_prev);
      dh_prev += d_gated.cwiseProduct(r);

      const Eigen::VectorXd da_z = dz.array() * z.array() * (1.0 - z.array());
      const Eigen::VectorXd da_r = dr.array() * r.array() * (1.0 - r.array());
      dh_prev += p.u_update.transpose() * da_z + p.u_reset.transpose() * da_r;

      d_update.col(t) = da_z;
      d_reset.col(t) = da_r;
      d_cand.col(t) = da_n;
      gated.col(t) = r.cwiseProduct(h_prev);
      carry = dh_prev;
    }
    const auto h_prev_all = tp.hidden.leftCols(T);
    g.w_update.noalias() = d_update * tp.inputs.transpose();
    g.w_reset.noalias() = d_reset * tp.inputs.transpose();
    g.w_candidate.noalias() = d_cand * tp.inputs.transpose();
    g.u_update.noalias() = d_update * h_prev_all.transpose();
    g.u_reset.noalias() = d_reset * h_prev_all.transpose();
    g.u_candidate.noalias() = d_cand * gated.transpose();
    g.b_update = d_update.rowwise().sum();
    g.b_reset = d_reset.rowwise().sum();
    g.b_candidate = d_cand.rowwise().sum();

    Eigen::MatrixXd d_in = p.w_update.transpose() * d_update;
    d_in.noalias() += p.w_reset.transpose() * d_reset;
    d_in.noalias() += p.w_candidate.transpose() * d_cand;
    grad_out = std::move(d_in);
  }
  out.input_grads = std::move(grad_out);
  return out;
}

void EncoderStream::init() {
  if (params_->layers.empty()) throw InvalidArgument("encoder has no layers");
  hidden_.clear();
  for (const auto& l : params_->layers) hidden_.push_back(Eigen::VectorXd::Zero(l.hidden_dim()));
  initialized_ = true;
  steps_ = 0;
}

Eigen::VectorXd EncoderStream::step(const trace::TraceWindow& window) {
  const auto& v = window.values;
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
  return step(x);
}

Eigen::VectorXd EncoderStream::step(const Eigen::VectorXd& input) {
  if (!initialized_) throw StateError("encoder stream used before init()");
  if (input.size() != params_->input_dim())
    throw InvalidArgument("window size does not match encoder input dim");
  Eigen::VectorXd x = input, z, r, n, h_next;
  for (std::size_t k = 0; k < params_->layers.size(); ++k) {
    gru_cell(params_->layers[k], x, hidden_[k], z, r, n, h_next);
    hidden_[k] = h_next;
    x = h_next;
  }
  ++steps_;
  return x;
}

void write_encoder(io::Writer& out, const EncoderParams& params) {
  out.str(kMagic);
  out.u32(static_cast<std::uint32_t>(params.layers.size()));
  for (const auto& l : params.layers) {
    out.u32(static_cast<std::uint32_t>(l.input_dim()));
    out.u32(static_cast<std::uint32_t>(l.hidden_dim()));
    for_each_array(l, [&](const auto& m) { out.matrix(m); });
  }
}

EncoderParams read_encoder(io::Reader& in) {
  const auto magic = in.str();
  if (magic.rfind("gru3 ", 0) != 0) throw ParseError(ParseError::Kind::BadMagic, "not a gru3 encoder checkpoint");
  if (magic != kMagic) throw ParseError(ParseError::Kind::VersionMismatch, "unsupported encoder checkpoint version: " + magic);
  EncoderParams p;
  const auto n_layers = in.u32();
  for (std::uint32_t k = 0; k < n_layers; ++k) {
    const int in_dim = static_cast<int>(in.u32());
    const int hid = static_cast<int>(in.u32());
    auto l = GruLayerParams::zeros(in_dim, hid);
    for_each_array(l, [&](auto& m) {
      Eigen::MatrixXd read = in.matrix();
      if (read.rows() != m.rows() || read.cols() != m.cols())
        throw ParseError(ParseError::Kind::MalformedHeader, "encoder array shape disagrees with header");
      m = read;
    });
    p.layers.push_back(std::move(l));
  }
  p.validate();
  return p;
}

std::string serialize(const EncoderParams& params) {
  io::Writer w;
  write_encoder(w, params);
  return w.bytes();
}

EncoderParams deserialize(const std::string& bytes) {
  io::Reader r(bytes);
  return read_encoder(r);
}

void save_encoder(const std::string& path, const EncoderParams& params) { io::write_file(path, serialize(params)); }

EncoderParams load_encoder(const std::string& path) { return deserialize(io::read_file(path)); }

}  // namespace rdetect::encoder
