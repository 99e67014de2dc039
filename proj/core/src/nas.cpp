#include "rdetect/nas.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "rdetect/binary_io.hpp"
#include "rdetect/error.hpp"
#include "rdetect/rng.hpp"
#include "rdetect/training.hpp"

namespace rdetect::nas {

namespace {

constexpr const char* kArchMagic = "rdetect-arch v1";

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& a) { return (1.0 + (-a.array()).exp()).inverse().matrix(); }

template <class Op, class F>
void for_each_op_array(Op& op, F&& f) {
  switch (op.kind) {
    case OpKind::DenseRelu:
    case OpKind::DenseTanh:
      f(op.weight);
      f(op.bias);
      break;
    case OpKind::GruCell:
      f(op.gru.w_update); f(op.gru.w_reset); f(op.gru.w_candidate);
      f(op.gru.u_update); f(op.gru.u_reset); f(op.gru.u_candidate);
      f(op.gru.b_update); f(op.gru.b_reset); f(op.gru.b_candidate);
      break;
    case OpKind::Identity: break;
  }
}

CandidateOp zeros_like(const CandidateOp& op) {
  CandidateOp z = op;
  for_each_op_array(z, [](auto& m) { m.setZero(); });
  return z;
}

Supernet zeros_like(const Supernet& net) {
  Supernet z = net;
  for (auto& layer : z.layers)
    for (auto& op : layer) op = zeros_like(op);
  for (auto& a : z.alpha) a.setZero();
  z.head.weight.setZero();
  z.head.bias.setZero();
  return z;
}

Eigen::MatrixXd dropout_mask(Rng& rng, Eigen::Index rows, Eigen::Index cols, double p) {
  Eigen::MatrixXd m(rows, cols);
  const double keep = 1.0 - p;
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = uniform(rng, 0.0, 1.0) < keep ? 1.0 / keep : 0.0;
  return m;
}

bool is_dense(OpKind k) { return k == OpKind::DenseRelu || k == OpKind::DenseTanh; }

Supernet as_single_path(const PrunedArchitecture& arch) {
  Supernet net;
  for (const auto& op : arch.ops) {
    net.layers.push_back({op});
    net.alpha.push_back(Eigen::VectorXd::Zero(1));
  }
  net.head = arch.head;
  return net;
}

void store_single_path(const Supernet& net, PrunedArchitecture& arch) {
  for (std::size_t l = 0; l < arch.ops.size(); ++l) arch.ops[l] = net.layers[l].front();
  arch.head = net.head;
}

template <class T>
std::vector<std::span<double>> collect_tensors(T& ops_owner_layers, LinearHead& head, std::vector<Eigen::VectorXd>* alpha) {
  std::vector<std::span<double>> out;
  auto add = [&](auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); };
  for (auto& op : ops_owner_layers) for_each_op_array(op, add);
  if (alpha)
    for (auto& a : *alpha) add(a);
  add(head.weight);
  add(head.bias);
  return out;
}

}  // namespace

const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::GruCell: return "gru_cell";
    case OpKind::DenseRelu: return "dense_relu";
    case OpKind::DenseTanh: return "dense_tanh";
    case OpKind::Identity: return "identity";
  }
  return "?";
}

OpKind op_kind_from_string(const std::string& s) {
  if (s == "gru_cell") return OpKind::GruCell;
  if (s == "dense_relu") return OpKind::DenseRelu;
  if (s == "dense_tanh") return OpKind::DenseTanh;
  if (s == "identity") return OpKind::Identity;
  throw InvalidArgument("unknown op kind: " + s);
}

CandidateOp CandidateOp::make(OpKind kind, int in_dim, int out_dim, std::uint64_t seed) {
  if (in_dim < 1 || out_dim < 1) throw InvalidArgument("op dims must be positive");
  if (kind == OpKind::Identity && in_dim != out_dim) throw InvalidArgument("identity op needs in_dim == out_dim");
  CandidateOp op;
  op.kind = kind;
  op.in_dim = in_dim;
  op.out_dim = out_dim;
  auto rng = keyed_rng({seed, static_cast<std::uint64_t>(kind), 0x0B5ULL});
  if (is_dense(kind)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    op.weight = Eigen::MatrixXd(out_dim, in_dim);
    op.bias = Eigen::VectorXd(out_dim);
    for (Eigen::Index i = 0; i < op.weight.size(); ++i) op.weight.data()[i] = uniform(rng, -bound, bound);
    for (Eigen::Index i = 0; i < op.bias.size(); ++i) op.bias[i] = uniform(rng, -bound, bound);
  } else if (kind == OpKind::GruCell) {
    op.gru = encoder::GruLayerParams::zeros(in_dim, out_dim);
    const double bound = 1.0 / std::sqrt(static_cast<double>(out_dim));
    for_each_op_array(op, [&](auto& m) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -bound, bound);
    });
  }
  return op;
}

std::vector<std::span<double>> CandidateOp::tensors() {
  std::vector<std::span<double>> out;
  for_each_op_array(*this, [&](auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); });
  return out;
}

std::vector<std::span<const double>> CandidateOp::tensors() const {
  std::vector<std::span<const double>> out;
  for_each_op_array(*this, [&](const auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); });
  return out;
}

std::size_t CandidateOp::parameter_count() const {
  std::size_t n = 0;
  for (auto t : tensors()) n += t.size();
  return n;
}

Eigen::MatrixXd op_forward(const CandidateOp& op, const Eigen::MatrixXd& x, OpCache* cache,
                           const Eigen::MatrixXd* mask) {
  if (x.rows() != op.in_dim)
    throw InvalidArgument(std::string("op ") + to_string(op.kind) + " expects input dim " + std::to_string(op.in_dim) +
                          ", got " + std::to_string(x.rows()));
  Eigen::MatrixXd y;
  switch (op.kind) {
    case OpKind::Identity: y = x; break;
    case OpKind::DenseRelu:
    case OpKind::DenseTanh: {
      Eigen::MatrixXd a = op.weight * x;
      a.colwise() += op.bias;
      y = op.kind == OpKind::DenseRelu ? Eigen::MatrixXd(a.cwiseMax(0.0)) : Eigen::MatrixXd(a.array().tanh().matrix());
      break;
    }
    case OpKind::GruCell: {
      const auto& p = op.gru;
      const Eigen::MatrixXd hp = op.gru_uses_input_as_state() ? x : Eigen::MatrixXd::Zero(op.out_dim, x.cols());
      Eigen::MatrixXd az = p.w_update * x + p.u_update * hp;
      az.colwise() += p.b_update;
      Eigen::MatrixXd ar = p.w_reset * x + p.u_reset * hp;
      ar.colwise() += p.b_reset;
      const Eigen::MatrixXd z = sigmoid(az);
      const Eigen::MatrixXd r = sigmoid(ar);
      Eigen::MatrixXd an = p.w_candidate * x + p.u_candidate * r.cwiseProduct(hp);
      an.colwise() += p.b_candidate;
      const Eigen::MatrixXd n = an.array().tanh().matrix();
      y = (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(hp);
      if (cache) {
        cache->update = z;
        cache->reset = r;
        cache->candidate = n;
      }
      break;
    }
  }
  if (cache) {
    cache->input = x;
    cache->output = y;
    cache->dropout_mask = (mask && is_dense(op.kind)) ? *mask : Eigen::MatrixXd();
  }
  if (mask && is_dense(op.kind)) y = y.cwiseProduct(*mask);
  return y;
}

Eigen::MatrixXd op_backward(const CandidateOp& op, const OpCache& cache, const Eigen::MatrixXd& grad_out,
                            CandidateOp& grads) {
  switch (op.kind) {
    case OpKind::Identity: return grad_out;
    case OpKind::DenseRelu:
    case OpKind::DenseTanh: {
      Eigen::MatrixXd d = cache.dropout_mask.size() ? grad_out.cwiseProduct(cache.dropout_mask) : grad_out;
      if (op.kind == OpKind::DenseRelu)
        d = d.cwiseProduct((cache.output.array() > 0.0).cast<double>().matrix());
      else
        d = d.cwiseProduct((1.0 - cache.output.array().square()).matrix());
      grads.weight.noalias() += d * cache.input.transpose();
      grads.bias += d.rowwise().sum();
      return op.weight.transpose() * d;
    }
    case OpKind::GruCell: {
      const auto& p = op.gru;
      auto& g = grads.gru;
      const bool residual = op.gru_uses_input_as_state();
      const Eigen::MatrixXd hp = residual ? cache.input : Eigen::MatrixXd::Zero(op.out_dim, cache.input.cols());
      const auto& z = cache.update;
      const auto& r = cache.reset;
      const auto& n = cache.candidate;
      const Eigen::MatrixXd dn = grad_out.cwiseProduct((1.0 - z.array()).matrix());
      const Eigen::MatrixXd dz = grad_out.cwiseProduct(hp - n);
      Eigen::MatrixXd dhp = grad_out.cwiseProduct(z);
      const Eigen::MatrixXd da_n = dn.cwiseProduct((1.0 - n.array().square()).matrix());
      const Eigen::MatrixXd gated = r.cwiseProduct(hp);
      const Eigen::MatrixXd d_gated = p.u_candidate.transpose() * da_n;
      const Eigen::MatrixXd dr = d_gated.cwiseProduct(hp);
      dhp += d_gated.cwiseProduct(r);
      const Eigen::MatrixXd da_z = (dz.array() * z.array() * (1.0 - z.array())).matrix();
      const Eigen::MatrixXd da_r = (dr.array() * r.array() * (1.0 - r.array())).matrix();
      dhp.noalias() += p.u_update.transpose() * da_z;
      dhp.noalias() += p.u_reset.transpose() * da_r;

      g.w_update.noalias() += da_z * cache.input.transpose();
      g.w_reset.noalias() += da_r * cache.input.transpose();
      g.w_candidate.noalias() += da_n * cache.input.transpose();
      g.u_update.noalias() += da_z * hp.transpose();
      g.u_reset.noalias() += da_r * hp.transpose();
      g.u_candidate.noalias() += da_n * gated.transpose();
      g.b_update += da_z.rowwise().sum();
      g.b_reset += da_r.rowwise().sum();
      g.b_candidate += da_n.rowwise().sum();

      Eigen::MatrixXd dx = p.w_update.transpose() * da_z;
      dx.noalias() += p.w_reset.transpose() * da_r;
      dx.noalias() += p.w_candidate.transpose() * da_n;
      if (residual) dx += dhp;
      return dx;
    }
  }
  return grad_out;
}

std::vector<std::span<double>> Supernet::tensors() {
  std::vector<std::span<double>> out;
  for (auto& layer : layers)
    for (auto& op : layer)
      for (auto t : op.tensors()) out.push_back(t);
  for (auto& a : alpha) out.emplace_back(a.data(), static_cast<std::size_t>(a.size()));
  out.emplace_back(head.weight.data(), static_cast<std::size_t>(head.weight.size()));
  out.emplace_back(head.bias.data(), static_cast<std::size_t>(head.bias.size()));
  return out;
}

std::vector<std::span<const double>> Supernet::tensors() const {
  auto mut = const_cast<Supernet*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

void Supernet::validate() const {
  if (layers.empty()) throw InvalidArgument("supernet has no layers");
  if (alpha.size() != layers.size()) throw InvalidArgument("alpha rows must match layer count");
  int prev_out = layers.front().front().in_dim;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].size() < 2) throw InvalidArgument("each supernet layer needs at least two candidates");
    if (alpha[l].size() != static_cast<Eigen::Index>(layers[l].size()))
      throw InvalidArgument("alpha row size must match candidate count");
    if (!alpha[l].allFinite()) throw InvalidArgument("architecture weights must be finite");
    const int out = layers[l].front().out_dim;
    for (const auto& op : layers[l]) {
      if (op.in_dim != prev_out || op.out_dim != out) throw InvalidArgument("inconsistent op dims within a layer");
    }
    prev_out = out;
  }
  if (head.weight.rows() != 2 || head.weight.cols() != prev_out || head.bias.size() != 2)
    throw InvalidArgument("classifier head must map the last layer to two logits");
}

Supernet make_supernet(int input_dim, const SupernetConfig& cfg, std::uint64_t seed) {
  if (cfg.num_layers < 1 || cfg.width < 1) throw InvalidArgument("supernet dims must be positive");
  Supernet net;
  int in = input_dim;
  for (int l = 0; l < cfg.num_layers; ++l) {
    std::vector<CandidateOp> layer;
    for (std::size_t o = 0; o < cfg.candidates.size(); ++o) {
      const auto kind = cfg.candidates[o];
      if (kind == OpKind::Identity && in != cfg.width) continue;
      layer.push_back(CandidateOp::make(kind, in, cfg.width,
                                        seed * 1000003ULL + static_cast<std::uint64_t>(l) * 101 + o));
    }
    if (layer.size() < 2) throw InvalidArgument("supernet layer ended up with fewer than two candidates");
    net.alpha.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layer.size())));
    net.layers.push_back(std::move(layer));
    in = cfg.width;
  }
  auto rng = keyed_rng({seed, 0x4EADULL});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  net.head.weight.resize(2, in);
  net.head.bias.resize(2);
  for (Eigen::Index i = 0; i < net.head.weight.size(); ++i) net.head.weight.data()[i] = uniform(rng, -bound, bound);
  for (Eigen::Index i = 0; i < 2; ++i) net.head.bias[i] = uniform(rng, -bound, bound);
  net.validate();
  return net;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& v) {
  const Eigen::ArrayXd e = (v.array() - v.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) out.col(j) = softmax(logits.col(j));
  return out;
}

namespace {

std::vector<Eigen::VectorXd> mixture_of(const Supernet& net) {
  std::vector<Eigen::VectorXd> mix;
  for (const auto& a : net.alpha) mix.push_back(softmax(a));
  return mix;
}

Eigen::MatrixXd head_logits(const LinearHead& head, const Eigen::MatrixXd& h) {
  Eigen::MatrixXd logits = head.weight * h;
  logits.colwise() += head.bias;
  return logits;
}

}  // namespace

Eigen::MatrixXd supernet_forward(const Supernet& net, const Eigen::MatrixXd& inputs) {
  return supernet_forward(net, inputs, mixture_of(net));
}

Eigen::MatrixXd supernet_forward(const Supernet& net, const Eigen::MatrixXd& inputs,
                                 const std::vector<Eigen::VectorXd>& mixture) {
  if (mixture.size() != net.layers.size()) throw InvalidArgument("mixture must have one row per layer");
  if (inputs.rows() != net.input_dim())
    throw InvalidArgument("classifier input dim " + std::to_string(inputs.rows()) + " does not match " +
                          std::to_string(net.input_dim()));
  Eigen::MatrixXd h = inputs;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(layer.front().out_dim, h.cols());
    for (std::size_t o = 0; o < layer.size(); ++o) out += mixture[l][static_cast<Eigen::Index>(o)] * op_forward(layer[o], h);
    h = std::move(out);
  }
  return softmax_columns(head_logits(net.head, h));
}

SupernetGradients supernet_gradients(const Supernet& net, const Eigen::MatrixXd& inputs, std::span<const int> labels,
                                     double dropout, std::uint64_t dropout_seed) {
  const auto B = inputs.cols();
  if (B == 0) throw InvalidArgument("empty classifier batch");
  if (static_cast<std::size_t>(B) != labels.size()) throw InvalidArgument("label count mismatch");
  if (inputs.rows() != net.input_dim()) throw InvalidArgument("classifier input dim mismatch");
  const auto mixture = mixture_of(net);

  std::vector<std::vector<OpCache>> caches(net.layers.size());
  std::vector<std::vector<Eigen::MatrixXd>> outputs(net.layers.size());
  Eigen::MatrixXd h = inputs;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    caches[l].resize(layer.size());
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(layer.front().out_dim, B);
    for (std::size_t o = 0; o < layer.size(); ++o) {
      Eigen::MatrixXd mask;
      if (dropout > 0.0 && is_dense(layer[o].kind)) {
        auto rng = keyed_rng({dropout_seed, static_cast<std::uint64_t>(l), static_cast<std::uint64_t>(o)});
        mask = dropout_mask(rng, layer[o].out_dim, B, dropout);
      }
      outputs[l].push_back(op_forward(layer[o], h, &caches[l][o], mask.size() ? &mask : nullptr));
      out += mixture[l][static_cast<Eigen::Index>(o)] * outputs[l].back();
    }
    h = std::move(out);
  }
  const Eigen::MatrixXd probs = softmax_columns(head_logits(net.head, h));

  SupernetGradients res;
  res.grads = zeros_like(net);
  Eigen::MatrixXd dlogits = probs;
  for (Eigen::Index j = 0; j < B; ++j) {
    const int y = labels[j];
    if (y < 0 || y > 1) throw InvalidArgument("labels must be 0 or 1");
    res.loss -= std::log(std::max(probs(y, j), 1e-300));
    dlogits(y, j) -= 1.0;
  }
  res.loss /= static_cast<double>(B);
  dlogits /= static_cast<double>(B);

  res.grads.head.weight = dlogits * h.transpose();
  res.grads.head.bias = dlogits.rowwise().sum();
  Eigen::MatrixXd dh = net.head.weight.transpose() * dlogits;

  res.alpha_per_sample.resize(net.layers.size());
  for (int l = static_cast<int>(net.layers.size()) - 1; l >= 0; --l) {
    const auto& layer = net.layers[l];
    const auto& w = mixture[l];
    const auto ops = static_cast<Eigen::Index>(layer.size());
    // d L / d w_o per sample, then through the softmax.
    Eigen::MatrixXd dw(ops, B);
    for (Eigen::Index o = 0; o < ops; ++o) dw.row(o) = dh.cwiseProduct(outputs[l][o]).colwise().sum();
    const Eigen::RowVectorXd mean_dw = w.transpose() * dw;
    Eigen::MatrixXd dalpha(ops, B);
    for (Eigen::Index o = 0; o < ops; ++o) dalpha.row(o) = w[o] * (dw.row(o) - mean_dw);
    res.grads.alpha[l] = dalpha.rowwise().sum();
    res.alpha_per_sample[l] = dalpha;

    Eigen::MatrixXd dprev = Eigen::MatrixXd::Zero(layer.front().in_dim, B);
    for (Eigen::Index o = 0; o < ops; ++o)
      dprev += op_backward(layer[o], caches[l][o], w[o] * dh, res.grads.layers[l][o]);
    dh = std::move(dprev);
  }
  return res;
}

TrainHistory train_supernet(Supernet& net, const Eigen::MatrixXd& x, std::span<const int> labels,
                            const ClassifierTrainConfig& cfg) {
  if (x.cols() == 0) throw InvalidArgument("classifier training set is empty");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw InvalidArgument("dropout must lie in [0, 1)");
  TrainHistory hist;
  training::AdamState adam;
  adam.config.lr = cfg.lr;
  adam.init(net.tensors());
  const auto n = x.cols();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto rng = keyed_rng({cfg.seed, static_cast<std::uint64_t>(epoch), 0xC1A55ULL});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const auto len = std::min<Eigen::Index>(cfg.batch_size, n - start);
      Eigen::MatrixXd xb(x.rows(), len);
      std::vector<int> yb(len);
      for (Eigen::Index j = 0; j < len; ++j) {
        xb.col(j) = x.col(order[start + j]);
        yb[j] = labels[order[start + j]];
      }
      auto g = supernet_gradients(net, xb, yb, cfg.dropout, rng());
      if (!std::isfinite(g.loss)) throw TrainingDiverged("non-finite classifier loss at epoch " + std::to_string(epoch));
      auto gt = g.grads.tensors();
      training::clip_grad_norm(gt, cfg.clip_norm);
      training::adam_step(net.tensors(), training::const_views(gt), adam);
      epoch_loss += g.loss;
      ++batches;
    }
    hist.epoch_loss.push_back(epoch_loss / batches);
  }
  return hist;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd PrunedArchitecture::forward(const Eigen::MatrixXd& inputs) const {
  if (ops.empty()) throw InvalidArgument("pruned architecture has no layers");
  Eigen::MatrixXd h = inputs;
  for (const auto& op : ops) h = op_forward(op, h);
  return softmax_columns(head_logits(head, h));
}

std::vector<std::span<double>> PrunedArchitecture::tensors() { return collect_tensors(ops, head, nullptr); }

std::vector<std::span<const double>> PrunedArchitecture::tensors() const {
  auto mut = const_cast<PrunedArchitecture*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

std::size_t PrunedArchitecture::parameter_count() const {
  std::size_t n = 0;
  for (auto t : tensors()) n += t.size();
  return n;
}

bool PrunedArchitecture::operator==(const PrunedArchitecture& other) const {
  if (chosen != other.chosen || ops.size() != other.ops.size()) return false;
  for (std::size_t i = 0; i < ops.size(); ++i)
    if (ops[i].kind != other.ops[i].kind) return false;
  auto a = tensors();
  auto b = other.tensors();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::equal(a[i].begin(), a[i].end(), b[i].begin(), b[i].end())) return false;
  return true;
}

std::vector<Eigen::VectorXd> saliency(const Supernet& net, const Eigen::MatrixXd& calibration,
                                      std::span<const int> labels) {
  if (calibration.cols() == 0) throw InvalidArgument("pruning needs a non-empty calibration batch");
  const auto g = supernet_gradients(net, calibration, labels, 0.0, 0);
  const double B = static_cast<double>(calibration.cols());
  std::vector<Eigen::VectorXd> out;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    // Columns hold d(mean loss)/d alpha; scale back to per-sample gradients.
    const Eigen::MatrixXd per_sample = g.alpha_per_sample[l] * B;
    Eigen::VectorXd s(per_sample.rows());
    for (Eigen::Index o = 0; o < per_sample.rows(); ++o)
      s[o] = (net.alpha[l][o] * per_sample.row(o).array()).abs().mean();
    out.push_back(s);
  }
  return out;
}

PrunedArchitecture prune_with_saliency(const Supernet& net, const std::vector<Eigen::VectorXd>& sal) {
  if (sal.size() != net.layers.size()) throw InvalidArgument("saliency must have one row per layer");
  PrunedArchitecture arch;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    int best = 0;
    for (Eigen::Index o = 1; o < sal[l].size(); ++o)
      if (sal[l][o] > sal[l][best]) best = static_cast<int>(o);
    arch.chosen.push_back(best);
    arch.ops.push_back(net.layers[l][best]);
  }
  arch.head = net.head;
  return arch;
}

PrunedArchitecture prune(const Supernet& net, const Eigen::MatrixXd& calibration, std::span<const int> labels) {
  return prune_with_saliency(net, saliency(net, calibration, labels));
}

std::vector<Eigen::VectorXd> one_hot_mixture(const Supernet& net, const PrunedArchitecture& arch) {
  std::vector<Eigen::VectorXd> mix;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.layers[l].size()));
    m[arch.chosen.at(l)] = 1.0;
    mix.push_back(m);
  }
  return mix;
}

TrainHistory fine_tune(PrunedArchitecture& arch, const Eigen::MatrixXd& x, std::span<const int> labels,
                       const ClassifierTrainConfig& cfg) {
  if (cfg.epochs == 0) return {};
  // A single candidate per layer has mixture weight exactly 1 and a zero
  // architecture gradient, so only the retained parameters move.
  auto net = as_single_path(arch);
  auto hist = train_supernet(net, x, labels, cfg);
  store_single_path(net, arch);
  return hist;
}

double accuracy(const PrunedArchitecture& arch, const LabelledEmbeddings& data) {
  if (data.size() == 0) return 0.0;
  const auto probs = arch.forward(data.embeddings);
  int correct = 0;
  for (int j = 0; j < data.size(); ++j) {
    const int pred = probs(1, j) > probs(0, j) ? 1 : 0;
    correct += pred == data.labels[j];
  }
  return static_cast<double>(correct) / data.size();
}

AdaptationReport adapt(PrunedArchitecture& arch, const LabelledEmbeddings& fresh, const LabelledEmbeddings& replay,
                       const LabelledEmbeddings& seen_eval, const LabelledEmbeddings& unseen_eval,
                       const AdaptConfig& cfg) {
  if (fresh.size() == 0) throw InvalidArgument("adaptation needs samples of the new variant");
  AdaptationReport rep;
  rep.pre_seen = accuracy(arch, seen_eval);
  rep.pre_unseen = accuracy(arch, unseen_eval);

  const auto t0 = std::chrono::steady_clock::now();
  auto net = as_single_path(arch);
  training::AdamState adam;
  adam.config.lr = cfg.train.lr;
  adam.init(net.tensors());
  const int replay_per_batch =
      replay.size() > 0 ? static_cast<int>(std::lround(cfg.train.batch_size * cfg.replay_fraction)) : 0;
  const int fresh_per_batch = std::max(1, cfg.train.batch_size - replay_per_batch);
  std::vector<int> order(fresh.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    auto rng = keyed_rng({cfg.train.seed, static_cast<std::uint64_t>(epoch), 0xADA97ULL});
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < fresh.size(); start += fresh_per_batch) {
      const int nf = std::min(fresh_per_batch, fresh.size() - start);
      const int nr = replay_per_batch;
      Eigen::MatrixXd xb(fresh.embeddings.rows(), nf + nr);
      std::vector<int> yb(nf + nr);
      for (int j = 0; j < nf; ++j) {
        xb.col(j) = fresh.embeddings.col(order[start + j]);
        yb[j] = fresh.labels[order[start + j]];
      }
      for (int j = 0; j < nr; ++j) {
        const int k = uniform_int(rng, 0, replay.size() - 1);
        xb.col(nf + j) = replay.embeddings.col(k);
        yb[nf + j] = replay.labels[k];
      }
      auto g = supernet_gradients(net, xb, yb, cfg.train.dropout, rng());
      if (!std::isfinite(g.loss)) throw TrainingDiverged("non-finite loss during adaptation");
      auto gt = g.grads.tensors();
      training::clip_grad_norm(gt, cfg.train.clip_norm);
      training::adam_step(net.tensors(), training::const_views(gt), adam);
    }
  }
  store_single_path(net, arch);
  rep.retrain_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  rep.post_seen = accuracy(arch, seen_eval);
  rep.post_unseen = accuracy(arch, unseen_eval);
  return rep;
}

// ---------------------------------------------------------------------------

void save_architecture(const std::string& json_path, const PrunedArchitecture& arch) {
  namespace fs = std::filesystem;
  const fs::path jp(json_path);
  fs::path bin = jp;
  bin.replace_extension(".bin");
  nlohmann::json j;
  j["format"] = kArchMagic;
  j["weights"] = bin.filename().string();
  auto& layers = j["layers"] = nlohmann::json::array();
  for (std::size_t l = 0; l < arch.ops.size(); ++l) {
    layers.push_back({{"kind", to_string(arch.ops[l].kind)},
                      {"supernet_index", arch.chosen[l]},
                      {"in", arch.ops[l].in_dim},
                      {"out", arch.ops[l].out_dim}});
  }
  j["head"] = {{"in", arch.head.weight.cols()}, {"out", arch.head.weight.rows()}};
  j["parameters"] = arch.parameter_count();

  io::Writer w;
  w.str(kArchMagic);
  w.u32(static_cast<std::uint32_t>(arch.ops.size()));
  for (const auto& op : arch.ops)
    for_each_op_array(op, [&](const auto& m) { w.matrix(m); });
  w.matrix(arch.head.weight);
  w.vector(arch.head.bias);
  io::write_file(bin.string(), w.bytes());
  std::ofstream f(jp, std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::Io, "cannot write " + json_path);
  f << j.dump(2) << '\n';
}

PrunedArchitecture load_architecture(const std::string& json_path) {
  namespace fs = std::filesystem;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Kind::MalformedHeader, std::string("architecture json: ") + e.what());
  }
  if (j.value("format", "") != kArchMagic)
    throw ParseError(ParseError::Kind::VersionMismatch, "unsupported architecture format: " + j.value("format", ""));
  const auto bin = fs::path(json_path).parent_path() / j.at("weights").get<std::string>();
  io::Reader r(io::read_file(bin.string()));
  if (r.str() != kArchMagic) throw ParseError(ParseError::Kind::BadMagic, "architecture weights: bad magic");
  const auto n = r.u32();
  if (n != j.at("layers").size()) throw ParseError(ParseError::Kind::MalformedHeader, "layer count mismatch");
  PrunedArchitecture arch;
  for (std::uint32_t l = 0; l < n; ++l) {
    const auto& jl = j["layers"][l];
    CandidateOp op;
    op.kind = op_kind_from_string(jl.at("kind").get<std::string>());
    op.in_dim = jl.at("in").get<int>();
    op.out_dim = jl.at("out").get<int>();
    if (op.kind == OpKind::GruCell) op.gru = encoder::GruLayerParams::zeros(op.in_dim, op.out_dim);
    for_each_op_array(op, [&](auto& m) { m = r.matrix(); });
    arch.chosen.push_back(jl.at("supernet_index").get<int>());
    arch.ops.push_back(std::move(op));
  }
  arch.head.weight = r.matrix();
  arch.head.bias = r.vector();
  return arch;
}

}  // namespace rdetect::nas
