#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <vector>

#include "milr/network.hpp"

namespace milr {

/// (39,32) SECDED codeword in the low 39 bits of a u64.
/// Bit b (0..37) holds Hamming position b+1: check bits at positions 1,2,4,8,16,32, the 32
/// data bits fill the remaining positions in ascending order. Bit 38 is overall parity.
using SecdedCodeword = std::uint64_t;

inline constexpr int kCodewordBits = 39;
inline constexpr int kHammingPositions = 38;

enum class SecdedStatus : std::uint8_t { clean = 0, corrected = 1, detected_uncorrectable = 2 };

struct SecdedResult {
  std::uint32_t word = 0;
  SecdedStatus status = SecdedStatus::clean;
};

namespace detail {

/// data bit d -> Hamming position (1-based).
constexpr std::array<int, 32> data_positions() {
  std::array<int, 32> pos{};
  int d = 0;
  for (int p = 1; p <= kHammingPositions && d < 32; ++p)
    if (!std::has_single_bit(static_cast<unsigned>(p))) pos[static_cast<std::size_t>(d++)] = p;
  return pos;
}

inline constexpr std::array<int, 32> kDataPositions = data_positions();

inline int syndrome(SecdedCodeword cw) {
  int s = 0;
  for (int p = 1; p <= kHammingPositions; ++p)
    if ((cw >> (p - 1)) & 1u) s ^= p;
  return s;
}

inline std::uint32_t extract_data(SecdedCodeword cw) {
  std::uint32_t w = 0;
  for (int d = 0; d < 32; ++d) w |= static_cast<std::uint32_t>((cw >> (kDataPositions[static_cast<std::size_t>(d)] - 1)) & 1u) << d;
  return w;
}

}  // namespace detail

inline SecdedCodeword secded_encode(std::uint32_t word) {
  SecdedCodeword cw = 0;
  for (int d = 0; d < 32; ++d)
    if ((word >> d) & 1u) cw |= SecdedCodeword{1} << (detail::kDataPositions[static_cast<std::size_t>(d)] - 1);
  const int s = detail::syndrome(cw);
  for (int k = 0; k < 6; ++k)
    if ((s >> k) & 1) cw |= SecdedCodeword{1} << ((1 << k) - 1);
  if (std::popcount(cw) & 1) cw |= SecdedCodeword{1} << kHammingPositions;
  return cw;
}

inline SecdedResult secded_decode(SecdedCodeword cw) {
  cw &= (SecdedCodeword{1} << kCodewordBits) - 1;
  const int s = detail::syndrome(cw);
  const bool parity = std::popcount(cw) & 1;
  if (s == 0 && !parity) return {detail::extract_data(cw), SecdedStatus::clean};
  if (!parity) return {detail::extract_data(cw), SecdedStatus::detected_uncorrectable};
  if (s > kHammingPositions) return {detail::extract_data(cw), SecdedStatus::detected_uncorrectable};
  // s == 0 means the overall parity bit itself flipped.
  if (s != 0) cw ^= SecdedCodeword{1} << (s - 1);
  return {detail::extract_data(cw), SecdedStatus::corrected};
}

/// Check bits (6 Hamming + parity) of the codeword, packed in the low 7 bits.
inline std::uint8_t secded_check_bits(SecdedCodeword cw) {
  std::uint8_t c = 0;
  for (int k = 0; k < 6; ++k) c |= static_cast<std::uint8_t>(((cw >> ((1 << k) - 1)) & 1u) << k);
  c |= static_cast<std::uint8_t>(((cw >> kHammingPositions) & 1u) << 6);
  return c;
}

/// Rebuilds a codeword from stored data bits and stored check bits.
inline SecdedCodeword secded_assemble(std::uint32_t word, std::uint8_t check) {
  SecdedCodeword cw = 0;
  for (int d = 0; d < 32; ++d)
    if ((word >> d) & 1u) cw |= SecdedCodeword{1} << (detail::kDataPositions[static_cast<std::size_t>(d)] - 1);
  for (int k = 0; k < 6; ++k)
    if ((check >> k) & 1u) cw |= SecdedCodeword{1} << ((1 << k) - 1);
  if ((check >> 6) & 1u) cw |= SecdedCodeword{1} << kHammingPositions;
  return cw;
}

/// Codeword bit index (0..38) of data bit d, for injectors that address whole codewords.
inline int secded_data_bit_position(int d) { return detail::kDataPositions[static_cast<std::size_t>(d)] - 1; }

/// Check bits for every 32-bit parameter word of a network (f64 parameters count as two words).
/// The data bits live in the network itself; scrubbing re-reads them from there.
struct EccMemory {
  std::vector<std::uint8_t> check;
  /// First word index of each layer (size = layer count + 1).
  std::vector<std::size_t> layer_offset;

  std::size_t word_count() const noexcept { return check.size(); }
};

namespace detail {

template <Scalar T>
std::uint32_t* word_ptr(Network<T>& net, std::size_t layer) {
  return reinterpret_cast<std::uint32_t*>(net.param_data(layer).data());
}

template <Scalar T>
std::size_t words_in(const Network<T>& net, std::size_t layer) {
  return net.param_count(layer) * sizeof(T) / 4;
}

}  // namespace detail

template <Scalar T>
EccMemory ecc_encode(const Network<T>& net) {
  EccMemory ecc;
  ecc.layer_offset.push_back(0);
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (net.has_params(i)) {
      const auto data = net.params(i).data();
      std::vector<std::uint32_t> words(detail::words_in(net, i));
      std::memcpy(words.data(), data.data(), words.size() * 4);
      for (std::uint32_t w : words) ecc.check.push_back(secded_check_bits(secded_encode(w)));
    }
    ecc.layer_offset.push_back(ecc.check.size());
  }
  return ecc;
}

struct ScrubLayer {
  std::size_t layer = 0;
  std::size_t corrected = 0;
  std::size_t uncorrectable = 0;
};

struct ScrubReport {
  std::vector<ScrubLayer> layers;
  std::size_t corrected() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.corrected;
    return n;
  }
  std::size_t uncorrectable() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.uncorrectable;
    return n;
  }
};

/// Decodes every word against the current parameter bits and writes corrections back
/// (data and check bits). Uncorrectable words are left as they are.
template <Scalar T>
ScrubReport scrub(Network<T>& net, EccMemory& ecc) {
  if (ecc.layer_offset.size() != net.size() + 1) throw DimensionError("ECC memory does not match the network");
  ScrubReport report;
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (!net.has_params(i)) continue;
    const std::size_t n = detail::words_in(net, i);
    if (ecc.layer_offset[i + 1] - ecc.layer_offset[i] != n) throw DimensionError("ECC memory does not match the network");
    ScrubLayer layer{i, 0, 0};
    std::uint32_t* words = detail::word_ptr(net, i);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint8_t& check = ecc.check[ecc.layer_offset[i] + k];
      std::uint32_t w;
      std::memcpy(&w, words + k, 4);
      const SecdedResult r = secded_decode(secded_assemble(w, check));
      if (r.status == SecdedStatus::corrected) {
        std::memcpy(words + k, &r.word, 4);
        check = secded_check_bits(secded_encode(r.word));
        ++layer.corrected;
      } else if (r.status == SecdedStatus::detected_uncorrectable) {
        ++layer.uncorrectable;
      }
    }
    report.layers.push_back(layer);
  }
  return report;
}

/// 7 check bits per 32-bit parameter word, in bytes.
template <Scalar T>
double ecc_overhead_bytes(const Network<T>& net) {
  return static_cast<double>(net.total_param_count() * sizeof(T) / 4) * 7.0 / 8.0;
}

}  // namespace milr
