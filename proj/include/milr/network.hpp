#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "milr/errors.hpp"
#include "milr/linalg.hpp"
#include "milr/tensor.hpp"

namespace milr {

enum class LayerKind : std::uint8_t { input = 0, conv2d = 1, bias = 2, dense = 3, relu = 4, maxpool = 5, flatten = 6 };

inline const char* layer_kind_name(LayerKind k) noexcept {
  switch (k) {
    case LayerKind::input: return "input";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::bias: return "bias";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

/// Which layer a bias is attached to; both broadcast over the last axis.
enum class BiasAttach : std::uint8_t { conv = 0, dense = 1 };

struct InputLayer {
  Shape shape;
};

template <Scalar T>
struct Conv2DLayer {
  Tensor<T> filters;  // (F, F, Z, Y)
  std::size_t stride = 1;
  Padding padding = Padding::valid;
};

template <Scalar T>
struct BiasLayer {
  Tensor<T> params;  // (C)
  BiasAttach attach = BiasAttach::dense;
};

template <Scalar T>
struct DenseLayer {
  Tensor<T> params;  // (N, P)
};

struct ReluLayer {};

/// Square window, stride equal to the window; a trailing remainder is dropped.
struct MaxPoolLayer {
  std::size_t size = 2;
};

struct FlattenLayer {};

template <Scalar T>
using LayerSpec = std::variant<InputLayer, Conv2DLayer<T>, BiasLayer<T>, DenseLayer<T>, ReluLayer, MaxPoolLayer, FlattenLayer>;

template <Scalar T>
LayerKind kind_of(const LayerSpec<T>& layer) noexcept {
  return static_cast<LayerKind>(layer.index());
}

/// `inference` is the normal forward pass. `linear` treats every activation as the identity,
/// which is how the recovery machinery moves checkpoints through a network.
enum class ActivationMode { inference, linear };

struct LayerShapes {
  Shape input;
  Shape output;
};

namespace detail {

template <Scalar T>
Shape layer_output_shape(const LayerSpec<T>& layer, const Shape& in) {
  return std::visit(
      [&](const auto& l) -> Shape {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, InputLayer>) {
          return l.shape;
        } else if constexpr (std::is_same_v<L, Conv2DLayer<T>>) {
          const Shape& f = l.filters.shape();
          if (in.size() != 3 || in[0] != in[1]) throw ShapeError("expects (M,M,Z) input, got " + shape_string(in));
          if (f.size() != 4 || f[0] != f[1]) throw ShapeError("filters must be (F,F,Z,Y), got " + shape_string(f));
          if (f[2] != in[2]) {
            throw ShapeError("filter channels " + std::to_string(f[2]) + " != incoming channels " + std::to_string(in[2]));
          }
          const ConvGeometry g = conv_geometry(in[0], f[0], l.stride, l.padding);
          return {g.output, g.output, f[3]};
        } else if constexpr (std::is_same_v<L, BiasLayer<T>>) {
          if (l.params.rank() != 1) throw ShapeError("bias params must be rank 1");
          const std::size_t want_rank = l.attach == BiasAttach::conv ? 3 : 1;
          if (in.size() != want_rank) throw ShapeError("bias attach does not match input " + shape_string(in));
          if (in.back() != l.params.dim(0)) {
            throw ShapeError("bias length " + std::to_string(l.params.dim(0)) + " != channel count " +
                             std::to_string(in.back()));
          }
          return in;
        } else if constexpr (std::is_same_v<L, DenseLayer<T>>) {
          if (l.params.rank() != 2) throw ShapeError("dense params must be (N,P)");
          if (in.size() != 1) throw ShapeError("dense expects a flat input, got " + shape_string(in));
          if (in[0] != l.params.dim(0)) {
            throw ShapeError("dense N=" + std::to_string(l.params.dim(0)) + " != incoming width " + std::to_string(in[0]));
          }
          return {l.params.dim(1)};
        } else if constexpr (std::is_same_v<L, ReluLayer>) {
          return in;
        } else if constexpr (std::is_same_v<L, MaxPoolLayer>) {
          if (in.size() != 3 || in[0] != in[1]) throw ShapeError("maxpool expects (M,M,Z) input");
          if (l.size == 0 || in[0] / l.size == 0) throw ShapeError("maxpool window larger than input");
          return {in[0] / l.size, in[1] / l.size, in[2]};
        } else {
          return {shape_product(in)};
        }
      },
      layer);
}

}  // namespace detail

/// Annotates every layer with its input/output shape. Fails on the first inconsistent link.
template <Scalar T>
std::vector<LayerShapes> infer_shapes(const std::vector<LayerSpec<T>>& layers) {
  if (layers.empty()) throw ShapeError("network has no layers");
  if (kind_of<T>(layers.front()) != LayerKind::input) throw ShapeError("first layer must be an input layer");
  std::vector<LayerShapes> chain;
  chain.reserve(layers.size());
  Shape current;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0 && kind_of<T>(layers[i]) == LayerKind::input) {
      throw ShapeError("layer " + std::to_string(i) + " (input): input layer only allowed first");
    }
    try {
      Shape out = detail::layer_output_shape<T>(layers[i], current);
      chain.push_back({i == 0 ? out : current, out});
      current = std::move(out);
    } catch (const Error& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" + layer_kind_name(kind_of<T>(layers[i])) + "): " + e.what());
    }
  }
  return chain;
}

/// Ordered layer list with a validated shape chain. Parameter payloads can be rewritten
/// in place (fault injection, recovery write-back); shapes and layer hyperparameters cannot.
template <Scalar T>
class Network {
 public:
  using scalar_type = T;

  explicit Network(std::vector<LayerSpec<T>> layers) : layers_(std::move(layers)), shapes_(infer_shapes<T>(layers_)) {}

  std::size_t size() const noexcept { return layers_.size(); }
  const LayerSpec<T>& layer(std::size_t i) const { return layers_.at(i); }
  LayerKind kind(std::size_t i) const { return kind_of<T>(layers_.at(i)); }
  const Shape& input_shape(std::size_t i) const { return shapes_.at(i).input; }
  const Shape& output_shape(std::size_t i) const { return shapes_.at(i).output; }
  const Shape& network_output_shape() const { return shapes_.back().output; }
  static constexpr DType dtype() noexcept { return dtype_of<T>; }

  bool has_params(std::size_t i) const {
    const LayerKind k = kind(i);
    return k == LayerKind::conv2d || k == LayerKind::bias || k == LayerKind::dense;
  }

  const Tensor<T>& params(std::size_t i) const {
    const Tensor<T>* p = params_ptr(i);
    if (!p) throw Error("layer " + std::to_string(i) + " has no parameters");
    return *p;
  }

  /// Mutable view of a layer's parameter payload.
  std::span<T> param_data(std::size_t i) {
    auto* p = const_cast<Tensor<T>*>(params_ptr(i));
    if (!p) throw Error("layer " + std::to_string(i) + " has no parameters");
    return p->data();
  }

  /// Replaces a layer's parameters; the new tensor must have the same shape.
  void set_params(std::size_t i, Tensor<T> values) {
    auto* p = const_cast<Tensor<T>*>(params_ptr(i));
    if (!p) throw Error("layer " + std::to_string(i) + " has no parameters");
    if (p->shape() != values.shape()) {
      throw DimensionError("set_params shape " + shape_string(values.shape()) + " != " + shape_string(p->shape()));
    }
    *p = std::move(values);
  }

  std::size_t param_count(std::size_t i) const { return has_params(i) ? params(i).size() : 0; }

  std::size_t total_param_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < size(); ++i) n += param_count(i);
    return n;
  }

  std::vector<std::size_t> parameterized_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (has_params(i)) out.push_back(i);
    return out;
  }

  template <Scalar U>
  Network<U> cast() const {
    if constexpr (std::is_same_v<T, U>) {
      return *this;
    } else {
      std::vector<LayerSpec<U>> out;
      out.reserve(layers_.size());
      for (const auto& l : layers_) {
        std::visit(
            [&](const auto& x) {
              using L = std::decay_t<decltype(x)>;
              if constexpr (std::is_same_v<L, Conv2DLayer<T>>) {
                out.emplace_back(Conv2DLayer<U>{x.filters.template cast<U>(), x.stride, x.padding});
              } else if constexpr (std::is_same_v<L, BiasLayer<T>>) {
                out.emplace_back(BiasLayer<U>{x.params.template cast<U>(), x.attach});
              } else if constexpr (std::is_same_v<L, DenseLayer<T>>) {
                out.emplace_back(DenseLayer<U>{x.params.template cast<U>()});
              } else {
                out.emplace_back(x);
              }
            },
            l);
      }
      return Network<U>(std::move(out));
    }
  }

  /// Bitwise equality of architecture and parameter payloads.
  friend bool operator==(const Network& a, const Network& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a.kind(i) != b.kind(i) || a.output_shape(i) != b.output_shape(i)) return false;
      if (a.has_params(i) && !(a.params(i) == b.params(i))) return false;
    }
    return true;
  }

 private:
  const Tensor<T>* params_ptr(std::size_t i) const {
    const auto& l = layers_.at(i);
    if (auto* c = std::get_if<Conv2DLayer<T>>(&l)) return &c->filters;
    if (auto* b = std::get_if<BiasLayer<T>>(&l)) return &b->params;
    if (auto* d = std::get_if<DenseLayer<T>>(&l)) return &d->params;
    return nullptr;
  }

  std::vector<LayerSpec<T>> layers_;
  std::vector<LayerShapes> shapes_;
};

/// Applies a single layer to one sample.
template <Scalar T>
Tensor<T> apply_layer(const LayerSpec<T>& layer, const Tensor<T>& x, ActivationMode mode = ActivationMode::inference) {
  return std::visit(
      [&](const auto& l) -> Tensor<T> {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, InputLayer>) {
          if (x.shape() != l.shape) throw DimensionError("input shape " + shape_string(x.shape()) + " != " + shape_string(l.shape));
          return x;
        } else if constexpr (std::is_same_v<L, Conv2DLayer<T>>) {
          return conv2d(x, l.filters, l.stride, l.padding);
        } else if constexpr (std::is_same_v<L, BiasLayer<T>>) {
          Tensor<T> y = x;
          const std::size_t c = l.params.size();
          auto yd = y.data();
          for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += l.params[i % c];
          return y;
        } else if constexpr (std::is_same_v<L, DenseLayer<T>>) {
          return matmul(x.reshaped({1, x.size()}), l.params).reshaped({l.params.dim(1)});
        } else if constexpr (std::is_same_v<L, ReluLayer>) {
          if (mode == ActivationMode::linear) return x;
          Tensor<T> y = x;
          for (T& v : y.data()) v = v > T{0} ? v : (std::isnan(v) ? v : T{0});
          return y;
        } else if constexpr (std::is_same_v<L, MaxPoolLayer>) {
          const std::size_t m = x.dim(0), z = x.dim(2), k = l.size, g = m / k;
          Tensor<T> y({g, g, z});
          for (std::size_t i = 0; i < g; ++i)
            for (std::size_t j = 0; j < g; ++j)
              for (std::size_t c = 0; c < z; ++c) {
                T best = x.at(i * k, j * k, c);
                for (std::size_t a = 0; a < k; ++a)
                  for (std::size_t b = 0; b < k; ++b) {
                    const T v = x.at(i * k + a, j * k + b, c);
                    if (v > best) best = v;
                  }
                y.at(i, j, c) = best;
              }
          return y;
        } else {
          return x.reshaped({x.size()});
        }
      },
      layer);
}

/// Runs layers [first, last) on a single sample. The input must match input_shape(first).
template <Scalar T>
Tensor<T> forward(const Network<T>& net, Tensor<T> x, std::size_t first = 0, std::optional<std::size_t> last = std::nullopt,
                  ActivationMode mode = ActivationMode::inference) {
  const std::size_t end = last.value_or(net.size());
  if (first > end || end > net.size()) throw DimensionError("forward range out of bounds");
  if (first < net.size() && x.shape() != net.input_shape(first)) {
    throw DimensionError("forward input shape " + shape_string(x.shape()) + " != layer " + std::to_string(first) +
                         " input shape " + shape_string(net.input_shape(first)));
  }
  for (std::size_t i = first; i < end; ++i) x = apply_layer(net.layer(i), x, mode);
  return x;
}

/// Lowest index of the largest output. NaN entries never win (index 0 if all are NaN).
template <Scalar T>
std::size_t argmax(const Tensor<T>& y) {
  std::size_t best = 0;
  while (best + 1 < y.size() && std::isnan(y[best])) ++best;
  for (std::size_t i = best + 1; i < y.size(); ++i)
    if (y[i] > y[best]) best = i;
  return std::isnan(y[best]) ? 0 : best;
}

template <Scalar T>
std::size_t predict_class(const Network<T>& net, const Tensor<T>& x) {
  return argmax(forward(net, x));
}

/// Fraction of samples whose argmax output equals the label.
template <Scalar T>
double classify_accuracy(const Network<T>& net, std::span<const Tensor<T>> inputs, std::span<const std::uint8_t> labels) {
  if (inputs.size() != labels.size()) throw DimensionError("inputs and labels differ in count");
  if (inputs.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (predict_class(net, inputs[i]) == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(inputs.size());
}

}  // namespace milr
