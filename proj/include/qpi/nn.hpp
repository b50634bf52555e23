#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qpi/tensor.hpp"

// Small reverse-mode engine for sequential CNNs. Activations are NCHW
// (batch first), fully-connected activations are [batch, features].
namespace qpi::nn {

enum class LayerKind { conv2d, maxpool2d, fullyconnected, relu, dropout, flatten };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out_channels = 0;  // conv2d
  std::size_t kernel = 1;        // conv2d, maxpool2d
  std::size_t stride = 1;        // conv2d, maxpool2d
  std::size_t padding = 0;       // conv2d zero padding on every side
  std::size_t out_features = 0;  // fullyconnected
  double rate = 0.0;             // dropout probability of zeroing a unit

  static LayerSpec conv2d(std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0);
  static LayerSpec maxpool2d(std::size_t kernel, std::size_t stride);
  static LayerSpec fullyconnected(std::size_t out_features);
  static LayerSpec relu();
  static LayerSpec dropout(double rate);
  static LayerSpec flatten();
};

enum class Mode {
  train,       // dropout sampled, scaled by 1/(1-p)
  eval,        // dropout is the identity
  mc_dropout,  // inference with dropout kept active, same masks as train
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  std::uint64_t seed = 0;
  // Global index of the first sample in the batch; dropout streams are keyed
  // by (seed, sample index, layer index) so batching never changes masks.
  std::uint64_t sample_offset = 0;
};

struct LayerRecord {
  Tensor input;
  std::vector<std::size_t> argmax;  // maxpool2d: flat input index per output element
  std::vector<double> mask;         // dropout: per-element multiplier; empty means identity
};

// Everything backward needs from one forward pass.
struct Tape {
  std::vector<LayerRecord> records;
  Tensor output;
  bool recorded() const { return !records.empty(); }
};

struct BackwardOptions {
  // Guided backpropagation: ReLUs pass gradient only where both the forward
  // input and the incoming gradient are positive.
  bool guided_relu = false;
  // When non-null, receives the gradient w.r.t. each layer's output.
  std::vector<Tensor>* layer_output_grads = nullptr;
};

struct LayerParams {
  Tensor weight;
  Tensor bias;
};

class Model {
 public:
  Model() = default;
  // input_shape excludes the batch axis: {C, H, W} or {features}.
  Model(Shape input_shape, std::vector<LayerSpec> layers);

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return shapes_.back(); }
  // Per-sample output shape of layer i.
  const Shape& layer_output_shape(std::size_t i) const { return shapes_.at(i + 1); }
  const Shape& layer_input_shape(std::size_t i) const { return shapes_.at(i); }
  std::size_t layer_count() const { return specs_.size(); }
  const LayerSpec& layer(std::size_t i) const { return specs_.at(i); }
  const std::vector<LayerSpec>& layers() const { return specs_; }

  LayerParams& params(std::size_t i) { return params_.at(i); }
  const LayerParams& params(std::size_t i) const { return params_.at(i); }

  // Trainable tensors in layer order (weight then bias), grads enabled.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
  void zero_grad();

  // He-normal weights, zero biases.
  void initialize(std::uint64_t seed);

  bool has_active_dropout() const;

  Tensor forward(const Tensor& input, const ForwardOptions& options) const;
  Tensor forward(const Tensor& input, const ForwardOptions& options, Tape& tape) const;

  // Runs layers [begin, end) on an activation shaped like layer begin's input.
  // Lets callers cache the deterministic prefix ahead of the first dropout.
  Tensor forward_range(const Tensor& activation, std::size_t begin, std::size_t end,
                       const ForwardOptions& options) const;

  // First dropout layer with a non-zero rate, or layer_count() if none.
  std::size_t first_stochastic_layer() const;

  // Accumulates parameter gradients into each parameter's grad buffer and
  // returns the gradient w.r.t. the input. Throws StateError on an empty tape.
  Tensor backward(const Tape& tape, const Tensor& grad_output, const BackwardOptions& options = {});

  // Same as backward but leaves parameter gradients untouched, so it is safe
  // to call concurrently on a shared model.
  Tensor backward_input(const Tape& tape, const Tensor& grad_output,
                        const BackwardOptions& options = {}) const;

 private:
  Tensor run_forward(const Tensor& input, std::size_t begin, std::size_t end,
                     const ForwardOptions& options, Tape* tape) const;
  Tensor run_backward(const Tape& tape, const Tensor& grad_output, const BackwardOptions& options,
                      std::vector<LayerParams>* grad_sink) const;

  Shape input_shape_;
  std::vector<LayerSpec> specs_;
  std::vector<Shape> shapes_;  // shapes_[0] = input, shapes_[i+1] = output of layer i
  std::vector<LayerParams> params_;
};

// Row-wise softmax over [batch, K].
Tensor softmax(const Tensor& logits);

struct CrossEntropyResult {
  double loss = 0.0;
  std::size_t clamped = 0;  // rows whose true-class probability was floored at 1e-12
};

// Mean negative log-likelihood of the true labels. Rows must sum to 1 (1e-6).
CrossEntropyResult cross_entropy(const Tensor& probs, std::span<const int> labels);

// d(mean cross-entropy of softmax(logits)) / d logits = (softmax - onehot) / N.
Tensor cross_entropy_logit_grad(const Tensor& logits, std::span<const int> labels);

}  // namespace qpi::nn
