#include "qpi/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "qpi/error.hpp"
#include "qpi/rng.hpp"

namespace qpi::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

std::string layer_name(std::size_t index, const LayerSpec& spec) {
  return "layer " + std::to_string(index) + " (" + std::string(to_string(spec.kind)) + ")";
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_height, out_width;
  std::size_t patch_rows() const { return channels * kernel * kernel; }
  std::size_t out_cells() const { return out_height * out_width; }
};

ConvGeometry conv_geometry(const Shape& in, const LayerSpec& spec) {
  ConvGeometry g{in[0], in[1], in[2], spec.kernel, spec.stride, spec.padding, 0, 0};
  g.out_height = (g.height + 2 * g.padding - g.kernel) / g.stride + 1;
  g.out_width = (g.width + 2 * g.padding - g.kernel) / g.stride + 1;
  return g;
}

void im2col(const double* image, const ConvGeometry& g, double* cols) {
  const std::size_t cells = g.out_cells();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * cells;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_width + ox] =
                inside ? image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                               static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* image) {
  const std::size_t cells = g.out_cells();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * cells;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                  static_cast<std::size_t>(ix)] += row[oy * g.out_width + ox];
          }
        }
      }
    }
  }
}

Shape with_batch(std::size_t batch, const Shape& shape) {
  Shape out{batch};
  out.insert(out.end(), shape.begin(), shape.end());
  return out;
}

Tensor conv_forward(const Tensor& in, const Shape& in_shape, const LayerSpec& spec,
                    const LayerParams& p) {
  const std::size_t batch = in.dim(0);
  const ConvGeometry g = conv_geometry(in_shape, spec);
  Tensor out(with_batch(batch, {spec.out_channels, g.out_height, g.out_width}));
  AlignedBuffer cols(g.patch_rows() * g.out_cells());
  ConstMatMap weight(p.weight.data().data(), spec.out_channels, g.patch_rows());
  const std::size_t in_stride = shape_volume(in_shape);
  const std::size_t out_stride = spec.out_channels * g.out_cells();
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(in.data().data() + n * in_stride, g, cols.data());
    ConstMatMap col_mat(cols.data(), g.patch_rows(), g.out_cells());
    MatMap out_mat(out.data().data() + n * out_stride, spec.out_channels, g.out_cells());
    out_mat.noalias() = weight * col_mat;
    for (std::size_t o = 0; o < spec.out_channels; ++o) out_mat.row(o).array() += p.bias[o];
  }
  return out;
}

Tensor conv_backward(const Tensor& in, const Tensor& grad_out, const Shape& in_shape,
                     const LayerSpec& spec, const LayerParams& p, LayerParams* sink) {
  const std::size_t batch = in.dim(0);
  const ConvGeometry g = conv_geometry(in_shape, spec);
  Tensor grad_in(in.shape());
  AlignedBuffer cols(g.patch_rows() * g.out_cells());
  AlignedBuffer grad_cols(cols.size());
  ConstMatMap weight(p.weight.data().data(), spec.out_channels, g.patch_rows());
  const std::size_t in_stride = shape_volume(in_shape);
  const std::size_t out_stride = spec.out_channels * g.out_cells();
  for (std::size_t n = 0; n < batch; ++n) {
    ConstMatMap dout(grad_out.data().data() + n * out_stride, spec.out_channels, g.out_cells());
    if (sink) {
      im2col(in.data().data() + n * in_stride, g, cols.data());
      ConstMatMap col_mat(cols.data(), g.patch_rows(), g.out_cells());
      MatMap dweight(sink->weight.grad().data(), spec.out_channels, g.patch_rows());
      dweight.noalias() += dout * col_mat.transpose();
      for (std::size_t o = 0; o < spec.out_channels; ++o) sink->bias.grad()[o] += dout.row(o).sum();
    }
    MatMap dcols(grad_cols.data(), g.patch_rows(), g.out_cells());
    dcols.noalias() = weight.transpose() * dout;
    col2im_add(grad_cols.data(), g, grad_in.data().data() + n * in_stride);
  }
  return grad_in;
}

Tensor fc_forward(const Tensor& in, const LayerSpec& spec, const LayerParams& p) {
  const std::size_t batch = in.dim(0);
  const std::size_t features = in.dim(1);
  Tensor out({batch, spec.out_features});
  ConstMatMap x(in.data().data(), batch, features);
  ConstMatMap w(p.weight.data().data(), spec.out_features, features);
  MatMap y(out.data().data(), batch, spec.out_features);
  y.noalias() = x * w.transpose();
  Eigen::Map<const Eigen::RowVectorXd> b(p.bias.data().data(), spec.out_features);
  y.rowwise() += b;
  return out;
}

Tensor fc_backward(const Tensor& in, const Tensor& grad_out, const LayerSpec& spec,
                   const LayerParams& p, LayerParams* sink) {
  const std::size_t batch = in.dim(0);
  const std::size_t features = in.dim(1);
  ConstMatMap x(in.data().data(), batch, features);
  ConstMatMap w(p.weight.data().data(), spec.out_features, features);
  ConstMatMap dy(grad_out.data().data(), batch, spec.out_features);
  if (sink) {
    MatMap dw(sink->weight.grad().data(), spec.out_features, features);
    dw.noalias() += dy.transpose() * x;
    Eigen::Map<Eigen::RowVectorXd> db(sink->bias.grad().data(), spec.out_features);
    db += dy.colwise().sum();
  }
  Tensor grad_in(in.shape());
  MatMap dx(grad_in.data().data(), batch, features);
  dx.noalias() = dy * w;
  return grad_in;
}

Tensor maxpool_forward(const Tensor& in, const Shape& in_shape, const LayerSpec& spec,
                       const Shape& out_shape, std::vector<std::size_t>* argmax) {
  const std::size_t batch = in.dim(0);
  const std::size_t channels = in_shape[0], height = in_shape[1], width = in_shape[2];
  const std::size_t oh = out_shape[1], ow = out_shape[2];
  Tensor out(with_batch(batch, out_shape));
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < batch * channels; ++plane) {
    const std::size_t base = plane * height * width;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = base + (oy * spec.stride) * width + ox * spec.stride;
        double best_value = in[best];
        for (std::size_t ky = 0; ky < spec.kernel; ++ky) {
          for (std::size_t kx = 0; kx < spec.kernel; ++kx) {
            const std::size_t idx = base + (oy * spec.stride + ky) * width + ox * spec.stride + kx;
            // Strict comparison keeps the first row-major maximum on ties.
            if (in[idx] > best_value) {
              best_value = in[idx];
              best = idx;
            }
          }
        }
        out[o] = best_value;
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::fullyconnected: return "fullyconnected";
    case LayerKind::relu: return "relu";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::maxpool2d, LayerKind::fullyconnected,
                      LayerKind::relu, LayerKind::dropout, LayerKind::flatten}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::conv2d(std::size_t out_channels, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::maxpool2d(std::size_t kernel, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::maxpool2d;
  s.kernel = kernel;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::fullyconnected(std::size_t out_features) {
  LayerSpec s;
  s.kind = LayerKind::fullyconnected;
  s.out_features = out_features;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

Model::Model(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), specs_(std::move(layers)) {
  if (input_shape_.empty() || shape_volume(input_shape_) == 0) {
    throw DimensionError("model input shape must be non-empty");
  }
  shapes_.push_back(input_shape_);
  params_.resize(specs_.size());
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const LayerSpec& s = specs_[i];
    const Shape& in = shapes_.back();
    const std::string name = layer_name(i, s);
    Shape out;
    switch (s.kind) {
      case LayerKind::conv2d:
      case LayerKind::maxpool2d: {
        if (in.size() != 3) throw DimensionError(name + " expects [C,H,W] input, got " + shape_string(in));
        const std::size_t pad = s.kind == LayerKind::conv2d ? s.padding : 0;
        if (s.kernel < 1 || s.stride < 1) throw ConfigError(name + ": kernel and stride must be >= 1");
        if (s.kernel > in[1] + 2 * pad || s.kernel > in[2] + 2 * pad) {
          throw DimensionError(name + ": kernel " + std::to_string(s.kernel) +
                               " exceeds input extent " + shape_string(in));
        }
        const std::size_t oh = (in[1] + 2 * pad - s.kernel) / s.stride + 1;
        const std::size_t ow = (in[2] + 2 * pad - s.kernel) / s.stride + 1;
        if (s.kind == LayerKind::conv2d) {
          if (s.out_channels < 1) throw ConfigError(name + ": out_channels must be >= 1");
          out = {s.out_channels, oh, ow};
          params_[i].weight = Tensor({s.out_channels, in[0], s.kernel, s.kernel});
          params_[i].bias = Tensor({s.out_channels});
        } else {
          out = {in[0], oh, ow};
        }
        break;
      }
      case LayerKind::fullyconnected:
        if (in.size() != 1) {
          throw DimensionError(name + " expects flat input, got " + shape_string(in) +
                               " (insert a flatten layer)");
        }
        if (s.out_features < 1) throw ConfigError(name + ": out_features must be >= 1");
        out = {s.out_features};
        params_[i].weight = Tensor({s.out_features, in[0]});
        params_[i].bias = Tensor({s.out_features});
        break;
      case LayerKind::dropout:
        if (!(s.rate >= 0.0 && s.rate < 1.0)) {
          throw ConfigError(name + ": dropout rate must lie in [0,1), got " + std::to_string(s.rate));
        }
        out = in;
        break;
      case LayerKind::relu:
        out = in;
        break;
      case LayerKind::flatten:
        out = {shape_volume(in)};
        break;
    }
    shapes_.push_back(out);
  }
  for (auto& p : params_) {
    if (!p.weight.empty()) {
      p.weight.enable_grad();
      p.bias.enable_grad();
    }
  }
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  for (auto& p : params_) {
    if (p.weight.empty()) continue;
    out.push_back(&p.weight);
    out.push_back(&p.bias);
  }
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& p : params_) {
    if (p.weight.empty()) continue;
    out.push_back(&p.weight);
    out.push_back(&p.bias);
  }
  return out;
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    if (params_[i].weight.empty()) continue;
    const std::string prefix = "layer" + std::to_string(i) + "." + std::string(to_string(specs_[i].kind));
    out.push_back(prefix + ".weight");
    out.push_back(prefix + ".bias");
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

void Model::zero_grad() {
  for (Tensor* t : parameters()) t->zero_grad();
}

void Model::initialize(std::uint64_t seed) {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    auto& p = params_[i];
    if (p.weight.empty()) continue;
    const std::size_t fan_in = p.weight.size() / p.weight.dim(0);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Rng rng(derive_seed(seed, {i}));
    for (double& w : p.weight.data()) w = rng.normal(0.0, stddev);
    std::fill(p.bias.data().begin(), p.bias.data().end(), 0.0);
  }
}

bool Model::has_active_dropout() const {
  return std::any_of(specs_.begin(), specs_.end(),
                     [](const LayerSpec& s) { return s.kind == LayerKind::dropout && s.rate > 0.0; });
}

Tensor Model::forward(const Tensor& input, const ForwardOptions& options) const {
  return run_forward(input, 0, specs_.size(), options, nullptr);
}

Tensor Model::forward(const Tensor& input, const ForwardOptions& options, Tape& tape) const {
  return run_forward(input, 0, specs_.size(), options, &tape);
}

Tensor Model::forward_range(const Tensor& activation, std::size_t begin, std::size_t end,
                            const ForwardOptions& options) const {
  if (begin > end || end > specs_.size()) throw DimensionError("forward_range: invalid layer range");
  return run_forward(activation, begin, end, options, nullptr);
}

std::size_t Model::first_stochastic_layer() const {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    if (specs_[i].kind == LayerKind::dropout && specs_[i].rate > 0.0) return i;
  }
  return specs_.size();
}

Tensor Model::run_forward(const Tensor& input, std::size_t begin, std::size_t end,
                          const ForwardOptions& options, Tape* tape) const {
  const Shape& expected = shapes_[begin];
  if (input.rank() != expected.size() + 1 ||
      !std::equal(expected.begin(), expected.end(), input.shape().begin() + 1)) {
    throw DimensionError((begin == 0 ? std::string("model input") : layer_name(begin, specs_[begin])) +
                         ": expected [batch]" + shape_string(expected) + ", got " +
                         shape_string(input.shape()));
  }
  const std::size_t batch = input.dim(0);
  if (tape) {
    tape->records.clear();
    tape->records.resize(specs_.size());
  }
  Tensor x = input;
  for (std::size_t i = begin; i < end; ++i) {
    const LayerSpec& s = specs_[i];
    LayerRecord* rec = tape ? &tape->records[i] : nullptr;
    if (rec) rec->input = x;
    switch (s.kind) {
      case LayerKind::conv2d:
        x = conv_forward(x, shapes_[i], s, params_[i]);
        break;
      case LayerKind::fullyconnected:
        x = fc_forward(x, s, params_[i]);
        break;
      case LayerKind::maxpool2d:
        x = maxpool_forward(x, shapes_[i], s, shapes_[i + 1], rec ? &rec->argmax : nullptr);
        break;
      case LayerKind::relu:
        for (double& v : x.data()) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::flatten:
        x = x.reshaped(with_batch(batch, shapes_[i + 1]));
        break;
      case LayerKind::dropout: {
        if (options.mode == Mode::eval || s.rate == 0.0) break;
        const double keep = 1.0 - s.rate;
        const double scale = 1.0 / keep;
        const std::size_t per_sample = shape_volume(shapes_[i]);
        std::vector<double> mask(x.size());
        for (std::size_t n = 0; n < batch; ++n) {
          Rng rng(derive_seed(options.seed, {options.sample_offset + n, i}));
          for (std::size_t j = 0; j < per_sample; ++j) {
            mask[n * per_sample + j] = rng.uniform() < keep ? scale : 0.0;
          }
        }
        for (std::size_t j = 0; j < x.size(); ++j) x[j] *= mask[j];
        if (rec) rec->mask = std::move(mask);
        break;
      }
    }
  }
  if (tape) tape->output = x;
  return x;
}

Tensor Model::backward(const Tape& tape, const Tensor& grad_output, const BackwardOptions& options) {
  return run_backward(tape, grad_output, options, &params_);
}

Tensor Model::backward_input(const Tape& tape, const Tensor& grad_output,
                             const BackwardOptions& options) const {
  return run_backward(tape, grad_output, options, nullptr);
}

Tensor Model::run_backward(const Tape& tape, const Tensor& grad_output, const BackwardOptions& options,
                           std::vector<LayerParams>* grad_sink) const {
  if (!tape.recorded() || tape.records.size() != specs_.size()) {
    throw StateError("backward called without a recorded forward pass");
  }
  if (grad_output.shape() != tape.output.shape()) {
    throw DimensionError("backward: gradient shape " + shape_string(grad_output.shape()) +
                         " does not match output " + shape_string(tape.output.shape()));
  }
  if (options.layer_output_grads) options.layer_output_grads->assign(specs_.size(), Tensor());
  Tensor g = grad_output;
  for (std::size_t step = specs_.size(); step-- > 0;) {
    const LayerSpec& s = specs_[step];
    const LayerRecord& rec = tape.records[step];
    if (options.layer_output_grads) (*options.layer_output_grads)[step] = g;
    LayerParams* sink = grad_sink ? &(*grad_sink)[step] : nullptr;
    switch (s.kind) {
      case LayerKind::conv2d:
        g = conv_backward(rec.input, g, shapes_[step], s, params_[step], sink);
        break;
      case LayerKind::fullyconnected:
        g = fc_backward(rec.input, g, s, params_[step], sink);
        break;
      case LayerKind::maxpool2d: {
        Tensor gin(rec.input.shape());
        for (std::size_t o = 0; o < g.size(); ++o) gin[rec.argmax[o]] += g[o];
        g = std::move(gin);
        break;
      }
      case LayerKind::relu:
        // Subgradient 0 at an input of exactly 0.
        for (std::size_t j = 0; j < g.size(); ++j) {
          const bool pass = rec.input[j] > 0.0 && (!options.guided_relu || g[j] > 0.0);
          if (!pass) g[j] = 0.0;
        }
        break;
      case LayerKind::flatten:
        g = g.reshaped(rec.input.shape());
        break;
      case LayerKind::dropout:
        if (!rec.mask.empty()) {
          for (std::size_t j = 0; j < g.size(); ++j) g[j] *= rec.mask[j];
        }
        break;
    }
  }
  return g;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects [batch, K], got " + shape_string(logits.shape()));
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * k;
    double* p = out.data().data() + r * k;
    const double m = *std::max_element(z, z + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += (p[j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < k; ++j) p[j] /= total;
  }
  return out;
}

CrossEntropyResult cross_entropy(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: probs " + shape_string(probs.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = probs.dim(0), k = probs.dim(1);
  constexpr double floor = 1e-12;
  CrossEntropyResult result;
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += probs[r * k + j];
    if (std::abs(total - 1.0) > 1e-6) {
      throw DomainError("cross_entropy: row " + std::to_string(r) + " sums to " + std::to_string(total));
    }
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw DomainError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0," +
                        std::to_string(k) + ")");
    }
    double p = probs[r * k + static_cast<std::size_t>(labels[r])];
    if (p < floor) {
      p = floor;
      ++result.clamped;
    }
    result.loss -= std::log(p);
  }
  if (rows) result.loss /= static_cast<double>(rows);
  return result;
}

Tensor cross_entropy_logit_grad(const Tensor& logits, std::span<const int> labels) {
  Tensor grad = softmax(logits);
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (rows != labels.size()) throw DimensionError("cross_entropy_logit_grad: label count mismatch");
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    grad[r * k + static_cast<std::size_t>(labels[r])] -= 1.0;
    for (std::size_t j = 0; j < k; ++j) grad[r * k + j] *= inv;
  }
  return grad;
}

}  // namespace qpi::nn
