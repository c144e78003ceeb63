#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "milr/errors.hpp"
#include "milr/tensor.hpp"

namespace milr {

/// Little-endian byte sink shared by the weights and sidecar formats.
class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  template <Scalar T>
  void payload(std::span<const T> values) {
    for (T v : values) {
      if constexpr (std::is_same_v<T, float>) {
        u32(std::bit_cast<std::uint32_t>(v));
      } else {
        u64(std::bit_cast<std::uint64_t>(v));
      }
    }
  }

  /// dtype tag, rank, dims[rank], raw payload.
  template <Scalar T>
  void tensor(const Tensor<T>& t) {
    u8(static_cast<std::uint8_t>(dtype_of<T>));
    shape(t.shape());
    payload<T>(t.data());
  }

  void shape(const Shape& s) {
    u8(static_cast<std::uint8_t>(s.size()));
    for (std::size_t d : s) u32(static_cast<std::uint32_t>(d));
  }

  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error("write to '" + path.string() + "' failed");
  }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> data, std::string what = "file") : data_(std::move(data)), what_(std::move(what)) {}

  static ByteReader from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(data), path.string());
  }

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) throw FormatError(what_ + ": bad magic");
    pos_ += m.size();
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }

  DType dtype() {
    const std::uint8_t tag = u8();
    if (tag > 1) throw FormatError(what_ + ": unknown dtype tag " + std::to_string(tag));
    return static_cast<DType>(tag);
  }

  Shape shape() {
    const std::size_t rank = u8();
    Shape s(rank);
    for (auto& d : s) {
      d = u32();
      if (d == 0) throw FormatError(what_ + ": zero dimension");
    }
    return s;
  }

  template <Scalar T>
  std::vector<T> payload(std::size_t count) {
    need(count * sizeof(T));
    std::vector<T> out(count);
    for (auto& v : out) {
      if constexpr (std::is_same_v<T, float>) {
        v = std::bit_cast<float>(u32());
      } else {
        v = std::bit_cast<double>(u64());
      }
    }
    return out;
  }

  /// Reads a tensor in either dtype and widens it to T.
  template <Scalar T>
  Tensor<T> tensor() {
    const DType d = dtype();
    Shape s = shape();
    const std::size_t n = shape_product(s);
    if (d == DType::f32) {
      auto v = payload<float>(n);
      return Tensor<float>(std::move(s), std::move(v)).template cast<T>();
    }
    auto v = payload<double>(n);
    return Tensor<double>(std::move(s), std::move(v)).template cast<T>();
  }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }
  void expect_end() const {
    if (!at_end()) throw FormatError(what_ + ": trailing bytes after payload");
  }
  const std::string& what() const noexcept { return what_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError(what_ + ": truncated payload");
  }

  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace milr
