#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "milr/errors.hpp"
#include "milr/network.hpp"
#include "milr/rng.hpp"
#include "milr/secded.hpp"

namespace milr {

enum class FaultKind : std::uint8_t { bit_flip = 0, whole_weight = 1, whole_layer = 2 };

inline const char* fault_kind_name(FaultKind k) noexcept {
  switch (k) {
    case FaultKind::bit_flip: return "bit-flip";
    case FaultKind::whole_weight: return "whole-weight";
    case FaultKind::whole_layer: return "whole-layer";
  }
  return "?";
}

/// What a flip's (index, bit) addresses: a parameter's IEEE bit pattern, or a bit of the
/// 39-bit SECDED codeword of a 32-bit parameter word.
enum class FlipTarget : std::uint8_t { parameter = 0, codeword = 1 };

/// Marks a flip of every bit of the parameter.
inline constexpr std::uint32_t kAllBits = 0xFFFFFFFFu;

struct Flip {
  std::size_t layer = 0;
  std::size_t index = 0;
  std::uint32_t bit = 0;
  friend bool operator==(const Flip&, const Flip&) = default;
};

struct FaultSpec {
  FaultKind kind = FaultKind::bit_flip;
  double rate = 0.0;
  std::size_t layer = 0;
  std::uint64_t seed = 0;
};

struct InjectionReport {
  FaultKind kind = FaultKind::bit_flip;
  FlipTarget target = FlipTarget::parameter;
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::vector<Flip> flips;
  /// whole-layer only: corrupted layer and number of replaced parameters.
  std::size_t layer = 0;
  std::size_t replaced = 0;

  std::size_t flip_count() const noexcept { return flips.size(); }

  /// Sorted, de-duplicated layers touched by the injection.
  std::vector<std::size_t> layers() const {
    if (kind == FaultKind::whole_layer) return {layer};
    std::set<std::size_t> s;
    for (const auto& f : flips) s.insert(f.layer);
    return {s.begin(), s.end()};
  }
};

namespace detail {

template <Scalar T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <Scalar T>
void flip_bit(T& v, std::uint32_t bit) {
  Bits<T> b;
  std::memcpy(&b, &v, sizeof(T));
  b ^= bit == kAllBits ? ~Bits<T>{0} : Bits<T>{1} << bit;
  std::memcpy(&v, &b, sizeof(T));
}

inline void flip_word_bit(std::uint32_t* words, std::size_t k, int bit) {
  std::uint32_t w;
  std::memcpy(&w, words + k, 4);
  w ^= std::uint32_t{1} << bit;
  std::memcpy(words + k, &w, 4);
}

/// Yields successive selected positions in [0, total) with per-position probability p,
/// by drawing geometric gaps instead of one Bernoulli per position.
class GeometricSkipper {
 public:
  GeometricSkipper(double p, std::uint64_t seed) : rng_(seed), log_q_(std::log1p(-p)), p_(p) {}

  /// First selected position at or after pos_plus_one, or `total` when exhausted.
  std::uint64_t next(std::uint64_t pos_plus_one, std::uint64_t total) {
    if (p_ <= 0.0) return total;
    if (p_ >= 1.0) return pos_plus_one;
    const double u = 1.0 - rng_.next_uniform();  // (0, 1]
    const double gap = std::floor(std::log(u) / log_q_);
    if (!(gap < static_cast<double>(total - pos_plus_one))) return total;
    return pos_plus_one + static_cast<std::uint64_t>(gap);
  }

 private:
  Rng rng_;
  double log_q_;
  double p_;
};

inline void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError(std::string(what) + " must be in [0, 1], got " + std::to_string(p));
}

template <Scalar T>
std::vector<std::size_t> param_offsets(const Network<T>& net) {
  std::vector<std::size_t> off{0};
  for (std::size_t i = 0; i < net.size(); ++i) off.push_back(off.back() + net.param_count(i));
  return off;
}

inline std::size_t layer_of(const std::vector<std::size_t>& offsets, std::uint64_t pos) {
  return static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), pos) - offsets.begin()) - 1;
}

}  // namespace detail

/// Flips every parameter bit independently with probability p.
template <Scalar T>
InjectionReport inject_bitflips(Network<T>& net, double p, std::uint64_t seed) {
  detail::check_probability(p, "bit error rate");
  InjectionReport rep{FaultKind::bit_flip, FlipTarget::parameter, p, seed, {}, 0, 0};
  constexpr std::uint64_t bits = sizeof(T) * 8;
  const auto offsets = detail::param_offsets(net);
  const std::uint64_t total = offsets.back() * bits;
  detail::GeometricSkipper skip(p, seed);
  for (std::uint64_t pos = skip.next(0, total); pos < total; pos = skip.next(pos + 1, total)) {
    const std::uint64_t param = pos / bits;
    const std::size_t layer = detail::layer_of(offsets, param);
    const std::size_t index = static_cast<std::size_t>(param - offsets[layer]);
    const auto bit = static_cast<std::uint32_t>(pos % bits);
    detail::flip_bit(net.param_data(layer)[index], bit);
    rep.flips.push_back({layer, index, bit});
  }
  return rep;
}

/// RBER on ECC-protected memory: every bit of every 39-bit codeword (data and check bits)
/// flips with probability p. Flip.index is the 32-bit word index within the layer.
template <Scalar T>
InjectionReport inject_bitflips(Network<T>& net, EccMemory& ecc, double p, std::uint64_t seed) {
  detail::check_probability(p, "bit error rate");
  if (ecc.layer_offset.size() != net.size() + 1) throw DimensionError("ECC memory does not match the network");
  InjectionReport rep{FaultKind::bit_flip, FlipTarget::codeword, p, seed, {}, 0, 0};
  std::array<int, kCodewordBits> data_bit{};
  data_bit.fill(-1);
  for (int d = 0; d < 32; ++d) data_bit[static_cast<std::size_t>(secded_data_bit_position(d))] = d;
  const std::uint64_t total = ecc.word_count() * std::uint64_t{kCodewordBits};
  detail::GeometricSkipper skip(p, seed);
  for (std::uint64_t pos = skip.next(0, total); pos < total; pos = skip.next(pos + 1, total)) {
    const std::uint64_t word = pos / kCodewordBits;
    const int cbit = static_cast<int>(pos % kCodewordBits);
    const std::size_t layer = detail::layer_of(ecc.layer_offset, word);
    const std::size_t index = static_cast<std::size_t>(word - ecc.layer_offset[layer]);
    const int d = data_bit[static_cast<std::size_t>(cbit)];
    if (d >= 0) {
      detail::flip_word_bit(detail::word_ptr(net, layer), index, d);
    } else {
      const int slot = cbit == kHammingPositions ? 6 : std::countr_zero(static_cast<unsigned>(cbit + 1));
      ecc.check[word] ^= static_cast<std::uint8_t>(1u << slot);
    }
    rep.flips.push_back({layer, index, static_cast<std::uint32_t>(cbit)});
  }
  return rep;
}

/// Each parameter is selected with probability q and all of its bits are flipped.
template <Scalar T>
InjectionReport inject_whole_weight(Network<T>& net, double q, std::uint64_t seed) {
  detail::check_probability(q, "whole-weight error rate");
  InjectionReport rep{FaultKind::whole_weight, FlipTarget::parameter, q, seed, {}, 0, 0};
  const auto offsets = detail::param_offsets(net);
  const std::uint64_t total = offsets.back();
  detail::GeometricSkipper skip(q, seed);
  for (std::uint64_t pos = skip.next(0, total); pos < total; pos = skip.next(pos + 1, total)) {
    const std::size_t layer = detail::layer_of(offsets, pos);
    const std::size_t index = static_cast<std::size_t>(pos - offsets[layer]);
    detail::flip_bit(net.param_data(layer)[index], kAllBits);
    rep.flips.push_back({layer, index, kAllBits});
  }
  return rep;
}

/// Flips all bits of one chosen parameter.
template <Scalar T>
InjectionReport flip_whole_weight_at(Network<T>& net, std::size_t layer, std::size_t index) {
  if (index >= net.param_count(layer)) throw DimensionError("parameter index out of range");
  detail::flip_bit(net.param_data(layer)[index], kAllBits);
  InjectionReport rep{FaultKind::whole_weight, FlipTarget::parameter, 0.0, 0, {}, 0, 0};
  rep.flips.push_back({layer, index, kAllBits});
  return rep;
}

/// Replaces every parameter of a layer with a fresh draw from [-1, 1), redrawing any value
/// that is bitwise equal to the original.
template <Scalar T>
InjectionReport corrupt_layer(Network<T>& net, std::size_t layer, std::uint64_t seed) {
  if (layer >= net.size() || !net.has_params(layer)) {
    throw DomainError("layer " + std::to_string(layer) + " has no parameters to corrupt");
  }
  Rng rng(seed);
  for (T& v : net.param_data(layer)) {
    T fresh = static_cast<T>(rng.next_unit());
    while (std::memcmp(&fresh, &v, sizeof(T)) == 0) fresh = static_cast<T>(rng.next_unit());
    v = fresh;
  }
  InjectionReport rep{FaultKind::whole_layer, FlipTarget::parameter, 1.0, seed, {}, layer, net.param_count(layer)};
  return rep;
}

template <Scalar T>
InjectionReport inject(Network<T>& net, const FaultSpec& spec) {
  switch (spec.kind) {
    case FaultKind::bit_flip: return inject_bitflips(net, spec.rate, spec.seed);
    case FaultKind::whole_weight: return inject_whole_weight(net, spec.rate, spec.seed);
    case FaultKind::whole_layer: return corrupt_layer(net, spec.layer, spec.seed);
  }
  throw DomainError("unknown fault kind");
}

/// Re-applies the recorded flips. Flips are XORs, so replaying a report undoes it.
/// Codeword reports need the ECC memory they were injected into.
template <Scalar T>
void replay(Network<T>& net, const InjectionReport& rep, EccMemory* ecc = nullptr) {
  if (rep.kind == FaultKind::whole_layer) throw DomainError("whole-layer corruption cannot be replayed");
  if (rep.target == FlipTarget::codeword && !ecc) throw DomainError("codeword flips need the ECC memory");
  for (const auto& f : rep.flips) {
    if (f.layer >= net.size() || !net.has_params(f.layer)) throw DimensionError("flip addresses a layer without parameters");
    if (rep.target == FlipTarget::parameter) {
      if (f.index >= net.param_count(f.layer)) throw DimensionError("flip index out of range");
      if (f.bit != kAllBits && f.bit >= sizeof(T) * 8) throw DimensionError("flip bit out of range");
      detail::flip_bit(net.param_data(f.layer)[f.index], f.bit);
      continue;
    }
    if (f.bit >= static_cast<std::uint32_t>(kCodewordBits)) throw DimensionError("codeword bit out of range");
    if (f.index >= detail::words_in(net, f.layer)) throw DimensionError("flip index out of range");
    const int cbit = static_cast<int>(f.bit);
    int d = -1;
    for (int k = 0; k < 32; ++k)
      if (secded_data_bit_position(k) == cbit) d = k;
    if (d >= 0) {
      detail::flip_word_bit(detail::word_ptr(net, f.layer), f.index, d);
    } else {
      const int slot = cbit == kHammingPositions ? 6 : std::countr_zero(static_cast<unsigned>(cbit + 1));
      ecc->check[ecc->layer_offset[f.layer] + f.index] ^= static_cast<std::uint8_t>(1u << slot);
    }
  }
}

/// One JSON object per report; flips as [layer, index, bit] triples (bit -1 = all bits).
inline nlohmann::json report_to_json(const InjectionReport& rep) {
  nlohmann::json flips = nlohmann::json::array();
  for (const auto& f : rep.flips) {
    flips.push_back({f.layer, f.index, f.bit == kAllBits ? std::int64_t{-1} : std::int64_t{f.bit}});
  }
  nlohmann::json j{{"kind", fault_kind_name(rep.kind)},
                   {"target", rep.target == FlipTarget::parameter ? "parameter" : "codeword"},
                   {"rate", rep.rate},
                   {"seed", rep.seed},
                   {"flip_count", rep.flips.size()},
                   {"flips", std::move(flips)}};
  if (rep.kind == FaultKind::whole_layer) {
    j["layer"] = rep.layer;
    j["replaced"] = rep.replaced;
  }
  return j;
}

inline InjectionReport report_from_json(const nlohmann::json& j) {
  InjectionReport rep;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "bit-flip") rep.kind = FaultKind::bit_flip;
    else if (kind == "whole-weight") rep.kind = FaultKind::whole_weight;
    else if (kind == "whole-layer") rep.kind = FaultKind::whole_layer;
    else throw FormatError("unknown fault kind '" + kind + "'");
    rep.target = j.at("target").get<std::string>() == "codeword" ? FlipTarget::codeword : FlipTarget::parameter;
    rep.rate = j.at("rate").get<double>();
    rep.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& f : j.at("flips")) {
      const auto bit = f.at(2).get<std::int64_t>();
      rep.flips.push_back({f.at(0).get<std::size_t>(), f.at(1).get<std::size_t>(),
                           bit < 0 ? kAllBits : static_cast<std::uint32_t>(bit)});
    }
    if (rep.kind == FaultKind::whole_layer) {
      rep.layer = j.at("layer").get<std::size_t>();
      rep.replaced = j.at("replaced").get<std::size_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed injection report: ") + e.what());
  }
  return rep;
}

inline std::string report_to_jsonl(const InjectionReport& rep) { return report_to_json(rep).dump() + "\n"; }

}  // namespace milr
