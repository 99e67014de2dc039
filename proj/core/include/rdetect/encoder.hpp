#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rdetect/binary_io.hpp"
#include "rdetect/hidden.hpp"
#include "rdetect/trace.hpp"

namespace rdetect::encoder {

/// One GRU layer:
///   z  = sigmoid(Wz x + Uz h + bz)
///   r  = sigmoid(Wr x + Ur h + br)
///   n  = tanh(Wn x + Un (r * h) + bn)
///   h' = (1 - z) * n + z * h
struct GruLayerParams {
  Eigen::MatrixXd w_update, w_reset, w_candidate;  // hidden x input
  Eigen::MatrixXd u_update, u_reset, u_candidate;  // hidden x hidden
  Eigen::VectorXd b_update, b_reset, b_candidate;

  int input_dim() const { return static_cast<int>(w_update.cols()); }
  int hidden_dim() const { return static_cast<int>(w_update.rows()); }

  static GruLayerParams zeros(int input_dim, int hidden_dim);
  void validate() const;
};

/// Stacked GRU encoder. Layer k consumes layer k-1's hidden states; layer 0
/// consumes flattened trace windows (slots * width values, column-major).
struct EncoderParams {
  std::vector<GruLayerParams> layers;

  int input_dim() const { return layers.front().input_dim(); }
  int hidden_dim() const { return layers.back().hidden_dim(); }
  std::size_t parameter_count() const;

  /// Flat views over every weight array, in a fixed order. Used by the
  /// optimizer, clipping and checkpointing.
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;

  static EncoderParams zeros(int input_dim, int hidden_dim, int num_layers = 3);
  /// Uniform(-1/sqrt(hidden), 1/sqrt(hidden)) initialization.
  static EncoderParams random(int input_dim, int hidden_dim, std::uint64_t seed, int num_layers = 3);

  void validate() const;
  bool operator==(const EncoderParams& other) const;
};

/// Activations cached by the forward pass for exact backpropagation.
struct LayerTape {
  Eigen::MatrixXd inputs;  // input_dim x T
  Eigen::MatrixXd hidden;  // hidden x (T + 1); column 0 is the zero initial state
  Eigen::MatrixXd update, reset, candidate;  // hidden x T
};

struct EncoderTape {
  std::vector<LayerTape> layers;
  int length() const { return layers.empty() ? 0 : static_cast<int>(layers.front().inputs.cols()); }
};

struct ForwardResult {
  HiddenSequence hidden;
  EncoderTape tape;
};

struct BackwardResult {
  EncoderParams param_grads;
  Eigen::MatrixXd input_grads;  // input_dim x T
};

/// Flattens each window into a column: input_dim x T.
Eigen::MatrixXd flatten_windows(const trace::TraceSequence& seq);

ForwardResult gru_forward(const EncoderParams& params, const trace::TraceSequence& seq);
ForwardResult gru_forward(const EncoderParams& params, const Eigen::MatrixXd& inputs);

/// Backpropagates dL/dh^t (hidden x T, one column per top-layer state).
BackwardResult gru_backward(const EncoderParams& params, const EncoderTape& tape,
                            const Eigen::MatrixXd& grad_hidden);

/// Single GRU cell step shared by the batch and streaming paths so both
/// produce bit-identical states.
void gru_cell(const GruLayerParams& p, const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev,
              Eigen::VectorXd& update, Eigen::VectorXd& reset, Eigen::VectorXd& candidate,
              Eigen::VectorXd& h_next);

/// Per-stream recurrent carry for online encoding.
class EncoderStream {
 public:
  explicit EncoderStream(const EncoderParams& params) : params_(&params) {}

  void init();
  bool initialized() const { return initialized_; }
  int steps() const { return steps_; }

  /// Encodes one window and returns the new top-layer hidden state.
  Eigen::VectorXd step(const trace::TraceWindow& window);
  Eigen::VectorXd step(const Eigen::VectorXd& input);

 private:
  const EncoderParams* params_;
  std::vector<Eigen::VectorXd> hidden_;
  bool initialized_ = false;
  int steps_ = 0;
};

// Checkpoint format: magic "gru3 v1", layer count, then per layer the nine
// arrays as (rows, cols, row-major doubles).
void write_encoder(io::Writer& out, const EncoderParams& params);
EncoderParams read_encoder(io::Reader& in);
std::string serialize(const EncoderParams& params);
EncoderParams deserialize(const std::string& bytes);
void save_encoder(const std::string& path, const EncoderParams& params);
EncoderParams load_encoder(const std::string& path);

}  // namespace rdetect::encoder
