#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "milr/binary_io.hpp"
#include "milr/crc_grid.hpp"
#include "milr/milr_engine.hpp"

namespace milr {

inline constexpr std::string_view kSidecarMagic{"MILRCKP\0", 8};
inline constexpr std::uint32_t kSidecarVersion = 1;

namespace detail {

inline void write_stored(ByteWriter& w, const Tensor<double>& t, const MilrState& st) {
  if (st.payload_size() == 4) {
    w.tensor(t.cast<float>());
  } else {
    w.tensor(t);
  }
}

inline void write_optional(ByteWriter& w, const std::optional<Tensor<double>>& t, const MilrState& st) {
  w.u8(t ? 1 : 0);
  if (t) write_stored(w, *t, st);
}

inline std::optional<Tensor<double>> read_optional(ByteReader& r) {
  if (r.u8() == 0) return std::nullopt;
  return r.tensor<double>();
}

template <class E>
E read_enum(ByteReader& r, std::uint8_t max, const char* what) {
  const std::uint8_t v = r.u8();
  if (v > max) throw FormatError(r.what() + ": bad " + what + " tag " + std::to_string(v));
  return static_cast<E>(v);
}

}  // namespace detail

/// Header: magic, u32 version, u32 CRC polynomial, u64 detect_seed, u64 golden_seed,
/// u8 precision, u8 dtype, u32 layer count, checkpoints, then detection and recovery records.
/// Stored tensors use the weights-file tensor encoding in the sidecar precision; partial
/// checkpoints are always f64.
inline std::vector<std::uint8_t> encode_sidecar(const MilrState& st) {
  ByteWriter w;
  w.magic(kSidecarMagic);
  w.u32(kSidecarVersion);
  w.u32(kCrcPolynomial);
  w.u64(st.detect_seed);
  w.u64(st.golden_seed);
  w.u8(static_cast<std::uint8_t>(st.precision));
  w.u8(static_cast<std::uint8_t>(st.dtype));
  w.u32(static_cast<std::uint32_t>(st.layer_count));

  w.u32(static_cast<std::uint32_t>(st.checkpoint_ids.size()));
  for (std::size_t i = 0; i < st.checkpoint_ids.size(); ++i) {
    w.u32(static_cast<std::uint32_t>(st.checkpoint_ids[i]));
    detail::write_stored(w, st.checkpoints[i], st);
  }

  w.u32(static_cast<std::uint32_t>(st.detection.size()));
  for (const auto& d : st.detection) {
    w.u32(static_cast<std::uint32_t>(d.layer));
    w.u8(static_cast<std::uint8_t>(d.kind));
    w.u32(static_cast<std::uint32_t>(d.partial.size()));
    for (double v : d.partial) w.f64(v);
    w.u8(d.crc ? 1 : 0);
    if (d.crc) {
      w.u32(static_cast<std::uint32_t>(d.crc->planes));
      w.u32(static_cast<std::uint32_t>(d.crc->z));
      w.u32(static_cast<std::uint32_t>(d.crc->y));
      for (std::uint32_t c : d.crc->rows) w.u32(c);
      for (std::uint32_t c : d.crc->cols) w.u32(c);
    }
  }

  w.u32(static_cast<std::uint32_t>(st.recovery.size()));
  for (const auto& r : st.recovery) {
    w.u32(static_cast<std::uint32_t>(r.layer));
    w.u8(static_cast<std::uint8_t>(r.kind));
    w.u8(static_cast<std::uint8_t>(r.backward));
    w.u64(r.backward_seed);
    detail::write_optional(w, r.backward_outputs, st);
    w.u8(static_cast<std::uint8_t>(r.solve));
    w.u64(r.solve_seed);
    w.u32(static_cast<std::uint32_t>(r.dummy_count));
    detail::write_optional(w, r.solve_outputs, st);
  }
  return w.buffer();
}

inline void save_sidecar(const MilrState& st, const std::filesystem::path& path) {
  ByteWriter w;
  const auto bytes = encode_sidecar(st);
  w.bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

inline MilrState decode_sidecar(ByteReader r) {
  r.expect_magic(kSidecarMagic);
  const std::uint32_t version = r.u32();
  if (version != kSidecarVersion) throw FormatError(r.what() + ": unsupported sidecar version " + std::to_string(version));
  if (r.u32() != kCrcPolynomial) throw FormatError(r.what() + ": unknown CRC polynomial");
  MilrState st;
  st.detect_seed = r.u64();
  st.golden_seed = r.u64();
  st.precision = detail::read_enum<SidecarPrecision>(r, 1, "precision");
  st.dtype = r.dtype();
  st.layer_count = r.u32();

  const std::uint32_t n_ckpt = r.u32();
  for (std::uint32_t i = 0; i < n_ckpt; ++i) {
    st.checkpoint_ids.push_back(r.u32());
    st.checkpoints.push_back(r.tensor<double>());
  }
  if (!std::is_sorted(st.checkpoint_ids.begin(), st.checkpoint_ids.end())) throw FormatError(r.what() + ": unsorted checkpoints");

  const std::uint32_t n_det = r.u32();
  for (std::uint32_t i = 0; i < n_det; ++i) {
    DetectionRecord d;
    d.layer = r.u32();
    d.kind = detail::read_enum<LayerKind>(r, 6, "layer type");
    const std::uint32_t n = r.u32();
    d.partial = r.payload<double>(n);
    if (r.u8()) {
      CrcGrid g;
      g.planes = r.u32();
      g.z = r.u32();
      g.y = r.u32();
      if ((g.planes * g.z * g.row_groups() + g.planes * g.y * g.col_groups()) * 4 > r.remaining()) {
        throw FormatError(r.what() + ": truncated payload");
      }
      g.rows.resize(g.planes * g.z * g.row_groups());
      g.cols.resize(g.planes * g.y * g.col_groups());
      for (auto& c : g.rows) c = r.u32();
      for (auto& c : g.cols) c = r.u32();
      d.crc = std::move(g);
    }
    st.detection.push_back(std::move(d));
  }

  const std::uint32_t n_rec = r.u32();
  for (std::uint32_t i = 0; i < n_rec; ++i) {
    RecoveryRecord rec;
    rec.layer = r.u32();
    rec.kind = detail::read_enum<LayerKind>(r, 6, "layer type");
    rec.backward = detail::read_enum<BackwardStrategy>(r, 3, "backward strategy");
    rec.backward_seed = r.u64();
    rec.backward_outputs = detail::read_optional(r);
    rec.solve = detail::read_enum<SolveStrategy>(r, 3, "solve strategy");
    rec.solve_seed = r.u64();
    rec.dummy_count = r.u32();
    rec.solve_outputs = detail::read_optional(r);
    st.recovery.push_back(std::move(rec));
  }
  r.expect_end();
  return st;
}

inline MilrState load_sidecar(const std::filesystem::path& path) { return decode_sidecar(ByteReader::from_file(path)); }

}  // namespace milr
