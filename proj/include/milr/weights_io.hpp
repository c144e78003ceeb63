#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "milr/binary_io.hpp"
#include "milr/network.hpp"

namespace milr {

inline constexpr std::string_view kWeightsMagic{"MILRWGT\0", 8};
inline constexpr std::uint32_t kWeightsVersion = 1;

using AnyNetwork = std::variant<Network<float>, Network<double>>;

/// Layout per layer: u8 kind, u8 dtype, u8 rank, u32 dims[rank], attribute block, raw payload.
/// Attribute block: conv u32 stride + u8 padding; bias u8 attach; maxpool u32 size; others empty.
/// Input layers store their shape as dims and carry no payload; ReLU/Flatten store rank 0.
template <Scalar T>
std::vector<std::uint8_t> encode_weights(const Network<T>& net) {
  ByteWriter w;
  w.magic(kWeightsMagic);
  w.u32(kWeightsVersion);
  w.u32(static_cast<std::uint32_t>(net.size()));
  for (std::size_t i = 0; i < net.size(); ++i) {
    w.u8(static_cast<std::uint8_t>(net.kind(i)));
    w.u8(static_cast<std::uint8_t>(dtype_of<T>));
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, InputLayer>) {
            w.shape(l.shape);
          } else if constexpr (std::is_same_v<L, Conv2DLayer<T>>) {
            w.shape(l.filters.shape());
            w.u32(static_cast<std::uint32_t>(l.stride));
            w.u8(static_cast<std::uint8_t>(l.padding));
            w.payload<T>(l.filters.data());
          } else if constexpr (std::is_same_v<L, BiasLayer<T>>) {
            w.shape(l.params.shape());
            w.u8(static_cast<std::uint8_t>(l.attach));
            w.payload<T>(l.params.data());
          } else if constexpr (std::is_same_v<L, DenseLayer<T>>) {
            w.shape(l.params.shape());
            w.payload<T>(l.params.data());
          } else if constexpr (std::is_same_v<L, MaxPoolLayer>) {
            w.shape({});
            w.u32(static_cast<std::uint32_t>(l.size));
          } else {
            w.shape({});
          }
        },
        net.layer(i));
  }
  return w.buffer();
}

template <Scalar T>
void save_weights(const Network<T>& net, const std::filesystem::path& path) {
  ByteWriter w;
  const auto bytes = encode_weights(net);
  w.bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

namespace detail {

template <Scalar T>
Network<T> read_layers(ByteReader& r, std::size_t count, DType first_dtype, LayerKind first_kind) {
  std::vector<LayerSpec<T>> layers;
  layers.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    LayerKind kind = first_kind;
    if (i > 0) {
      const std::uint8_t tag = r.u8();
      if (tag > static_cast<std::uint8_t>(LayerKind::flatten)) {
        throw FormatError(r.what() + ": unknown layer type tag " + std::to_string(tag));
      }
      kind = static_cast<LayerKind>(tag);
      if (r.dtype() != first_dtype) throw FormatError(r.what() + ": mixed dtypes in one network");
    }
    Shape dims = r.shape();
    auto tensor = [&](Shape s) {
      const std::size_t n = shape_product(s);
      return Tensor<T>(std::move(s), r.payload<T>(n));
    };
    switch (kind) {
      case LayerKind::input: layers.emplace_back(InputLayer{std::move(dims)}); break;
      case LayerKind::conv2d: {
        const std::size_t stride = r.u32();
        const std::uint8_t pad = r.u8();
        if (pad > 1) throw FormatError(r.what() + ": bad padding tag");
        layers.emplace_back(Conv2DLayer<T>{tensor(std::move(dims)), stride, static_cast<Padding>(pad)});
        break;
      }
      case LayerKind::bias: {
        const std::uint8_t attach = r.u8();
        if (attach > 1) throw FormatError(r.what() + ": bad bias attach tag");
        layers.emplace_back(BiasLayer<T>{tensor(std::move(dims)), static_cast<BiasAttach>(attach)});
        break;
      }
      case LayerKind::dense: layers.emplace_back(DenseLayer<T>{tensor(std::move(dims))}); break;
      case LayerKind::relu: layers.emplace_back(ReluLayer{}); break;
      case LayerKind::maxpool: layers.emplace_back(MaxPoolLayer{r.u32()}); break;
      case LayerKind::flatten: layers.emplace_back(FlattenLayer{}); break;
    }
  }
  r.expect_end();
  return Network<T>(std::move(layers));
}

}  // namespace detail

/// Parses a weights buffer. The dtype comes from the file; the whole buffer is validated
/// before a network is returned.
inline AnyNetwork decode_weights(ByteReader r) {
  r.expect_magic(kWeightsMagic);
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion) {
    throw FormatError(r.what() + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  if (count == 0) throw FormatError(r.what() + ": network has no layers");
  const std::uint8_t tag = r.u8();
  if (tag > static_cast<std::uint8_t>(LayerKind::flatten)) throw FormatError(r.what() + ": unknown layer type tag");
  const DType dtype = r.dtype();
  if (dtype == DType::f32) return detail::read_layers<float>(r, count, dtype, static_cast<LayerKind>(tag));
  return detail::read_layers<double>(r, count, dtype, static_cast<LayerKind>(tag));
}

inline AnyNetwork load_weights(const std::filesystem::path& path) { return decode_weights(ByteReader::from_file(path)); }

template <Scalar T>
Network<T> load_weights_as(const std::filesystem::path& path) {
  AnyNetwork any = load_weights(path);
  return std::visit([](auto& n) { return n.template cast<T>(); }, any);
}

}  // namespace milr
