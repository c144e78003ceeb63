#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "milr/network.hpp"
#include "milr/rng.hpp"

namespace milr {

/// Incremental builder used by the built-in configs and by tests for toy networks.
/// Weights are Glorot-uniform, biases uniform in [-0.1, 0.1), all from one seeded stream.
template <Scalar T>
class NetworkBuilder {
 public:
  NetworkBuilder(Shape input, std::uint64_t seed) : rng_(seed), current_(input) { layers_.emplace_back(InputLayer{std::move(input)}); }

  NetworkBuilder& conv(std::size_t filter, std::size_t count, Padding padding = Padding::valid, std::size_t stride = 1) {
    const std::size_t z = current_.at(2);
    const double limit = std::sqrt(6.0 / static_cast<double>(filter * filter * (z + count)));
    layers_.emplace_back(Conv2DLayer<T>{Tensor<T>::random({filter, filter, z, count}, rng_, limit), stride, padding});
    current_ = {conv_geometry(current_[0], filter, stride, padding).output, conv_geometry(current_[0], filter, stride, padding).output, count};
    return *this;
  }

  NetworkBuilder& bias() {
    const BiasAttach attach = current_.size() == 3 ? BiasAttach::conv : BiasAttach::dense;
    layers_.emplace_back(BiasLayer<T>{Tensor<T>::random({current_.back()}, rng_, 0.1), attach});
    return *this;
  }

  NetworkBuilder& dense(std::size_t units) {
    const std::size_t n = current_.at(0);
    const double limit = std::sqrt(6.0 / static_cast<double>(n + units));
    layers_.emplace_back(DenseLayer<T>{Tensor<T>::random({n, units}, rng_, limit)});
    current_ = {units};
    return *this;
  }

  NetworkBuilder& relu() {
    layers_.emplace_back(ReluLayer{});
    return *this;
  }

  NetworkBuilder& maxpool(std::size_t size = 2) {
    layers_.emplace_back(MaxPoolLayer{size});
    current_ = {current_[0] / size, current_[1] / size, current_[2]};
    return *this;
  }

  NetworkBuilder& flatten() {
    layers_.emplace_back(FlattenLayer{});
    current_ = {shape_product(current_)};
    return *this;
  }

  Network<T> build() const { return Network<T>(layers_); }

 private:
  Rng rng_;
  Shape current_;
  std::vector<LayerSpec<T>> layers_;
};

/// 28x28x1 input, valid-padded 3x3 convs, 2x2 pooling; 1,669,290 parameters.
template <Scalar T>
Network<T> mnist_network(std::uint64_t seed) {
  return NetworkBuilder<T>({28, 28, 1}, seed)
      .conv(3, 32).bias().relu()
      .conv(3, 32).bias().relu()
      .maxpool(2)
      .conv(3, 64).bias().relu()
      .flatten()
      .dense(256).bias().relu()
      .dense(10).bias()
      .build();
}

/// VGG-style 32x32x3 network with same-padded 3x3 convs; 698,154 parameters.
template <Scalar T>
Network<T> cifar_small_network(std::uint64_t seed) {
  const Padding s = Padding::same;
  return NetworkBuilder<T>({32, 32, 3}, seed)
      .conv(3, 32, s).bias().relu()
      .conv(3, 32, s).bias().relu()
      .maxpool(2)
      .conv(3, 64, s).bias().relu()
      .conv(3, 64, s).bias().relu()
      .maxpool(2)
      .conv(3, 128, s).bias().relu()
      .conv(3, 128, s).bias().relu()
      .conv(3, 128, s).bias().relu()
      .maxpool(2)
      .flatten()
      .dense(128).bias().relu()
      .dense(10).bias()
      .build();
}

/// 5x5 same-padded convs with wide dense head; 2,389,786 parameters.
template <Scalar T>
Network<T> cifar_large_network(std::uint64_t seed) {
  const Padding s = Padding::same;
  return NetworkBuilder<T>({32, 32, 3}, seed)
      .conv(5, 96, s).bias().relu()
      .maxpool(2)
      .conv(5, 96, s).bias().relu()
      .maxpool(2)
      .conv(5, 80, s).bias().relu()
      .conv(5, 64, s).bias().relu()
      .conv(5, 64, s).bias().relu()
      .conv(5, 96, s).bias().relu()
      .flatten()
      .dense(256).bias().relu()
      .dense(10).bias()
      .build();
}

inline bool is_builtin_config(std::string_view name) {
  return name == "mnist" || name == "cifar-small" || name == "cifar-large";
}

template <Scalar T>
Network<T> builtin_network(std::string_view name, std::uint64_t seed) {
  if (name == "mnist") return mnist_network<T>(seed);
  if (name == "cifar-small") return cifar_small_network<T>(seed);
  if (name == "cifar-large") return cifar_large_network<T>(seed);
  throw Error("unknown built-in network '" + std::string(name) + "'");
}

/// One row of a Keras-style summary: a conv/dense layer absorbs the bias that follows it.
struct ArchitectureRow {
  std::string layer;
  Shape output;
  std::size_t trainable = 0;
};

template <Scalar T>
std::vector<ArchitectureRow> architecture_table(const Network<T>& net) {
  std::vector<ArchitectureRow> rows;
  for (std::size_t i = 1; i < net.size(); ++i) {
    switch (net.kind(i)) {
      case LayerKind::conv2d: rows.push_back({"Conv. 2D", net.output_shape(i), net.param_count(i)}); break;
      case LayerKind::dense: rows.push_back({"Dense", net.output_shape(i), net.param_count(i)}); break;
      case LayerKind::maxpool: rows.push_back({"Max Pooling", net.output_shape(i), 0}); break;
      case LayerKind::bias:
        if (!rows.empty()) rows.back().trainable += net.param_count(i);
        break;
      default: break;
    }
  }
  return rows;
}

}  // namespace milr
