#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "milr/errors.hpp"
#include "milr/tensor.hpp"

namespace milr {

template <Scalar T>
struct Dataset {
  std::vector<Tensor<T>> inputs;
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }

  /// First n samples (or all of them when n is 0 or too large).
  Dataset take(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    Dataset d;
    d.inputs.assign(inputs.begin(), inputs.begin() + static_cast<std::ptrdiff_t>(n));
    d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return d;
  }
};

inline constexpr std::size_t kTestSetSize = 10000;

namespace detail {

inline std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t big_endian_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

}  // namespace detail

/// IDX image file (magic 0x00000803) plus IDX label file (0x00000801). Pixels scaled to
/// [0,1], shape (rows, cols, 1).
template <Scalar T>
Dataset<T> load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = detail::read_all(images);
  const auto lab = detail::read_all(labels);
  if (img.size() < 16 || detail::big_endian_u32(img, 0) != 0x00000803) throw FormatError(images.string() + ": not an IDX image file");
  if (lab.size() < 8 || detail::big_endian_u32(lab, 0) != 0x00000801) throw FormatError(labels.string() + ": not an IDX label file");
  const std::size_t n = detail::big_endian_u32(img, 4);
  const std::size_t rows = detail::big_endian_u32(img, 8), cols = detail::big_endian_u32(img, 12);
  if (rows == 0 || cols == 0) throw FormatError(images.string() + ": zero image dimension");
  if (img.size() != 16 + n * rows * cols) throw FormatError(images.string() + ": truncated payload");
  if (detail::big_endian_u32(lab, 4) != n) throw FormatError(labels.string() + ": label count does not match image count");
  if (lab.size() != 8 + n) throw FormatError(labels.string() + ": truncated payload");

  Dataset<T> d;
  d.inputs.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<T> px(rows * cols);
    for (std::size_t k = 0; k < px.size(); ++k) px[k] = static_cast<T>(img[16 + s * rows * cols + k]) / T(255);
    d.inputs.emplace_back(Shape{rows, cols, 1}, std::move(px));
    if (lab[8 + s] > 9) throw FormatError(labels.string() + ": label out of range");
    d.labels.push_back(lab[8 + s]);
  }
  return d;
}

/// MNIST test split from a directory holding t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte.
template <Scalar T>
Dataset<T> load_mnist_dir(const std::filesystem::path& dir) {
  auto d = load_mnist_idx<T>(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  if (d.size() != kTestSetSize) throw FormatError("MNIST test set has " + std::to_string(d.size()) + " images, expected 10000");
  return d;
}

/// CIFAR-10 binary batch: records of 1 label byte + 3072 bytes (1024 R, 1024 G, 1024 B,
/// row-major 32x32). Converted to (32, 32, 3), scaled to [0,1].
template <Scalar T>
Dataset<T> load_cifar_bin(const std::filesystem::path& path) {
  constexpr std::size_t side = 32, plane = side * side, record = 1 + 3 * plane;
  const auto b = detail::read_all(path);
  if (b.empty() || b.size() % record != 0) throw FormatError(path.string() + ": truncated payload");
  const std::size_t n = b.size() / record;
  Dataset<T> d;
  d.inputs.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const std::uint8_t* r = b.data() + s * record;
    if (r[0] > 9) throw FormatError(path.string() + ": label out of range");
    d.labels.push_back(r[0]);
    std::vector<T> px(3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) px[p * 3 + c] = static_cast<T>(r[1 + c * plane + p]) / T(255);
    d.inputs.emplace_back(Shape{side, side, 3}, std::move(px));
  }
  return d;
}

/// CIFAR-10 test split from a directory holding test_batch.bin.
template <Scalar T>
Dataset<T> load_cifar_dir(const std::filesystem::path& dir) {
  auto d = load_cifar_bin<T>(dir / "test_batch.bin");
  if (d.size() != kTestSetSize) throw FormatError("CIFAR-10 test batch has " + std::to_string(d.size()) + " images, expected 10000");
  return d;
}

}  // namespace milr
