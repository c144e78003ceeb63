#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include <boost/crc.hpp>

#include "milr/errors.hpp"
#include "milr/tensor.hpp"

namespace milr {

/// CRC-32C (Castagnoli). Stored in the sidecar header as the polynomial id.
inline constexpr std::uint32_t kCrcPolynomial = 0x1EDC6F41;
inline constexpr std::size_t kCrcGroup = 4;

inline std::uint32_t crc32c(const void* data, std::size_t bytes) {
  boost::crc_optimal<32, kCrcPolynomial, 0xFFFFFFFF, 0xFFFFFFFF, true, true> crc;
  crc.process_bytes(data, bytes);
  return crc.checksum();
}

/// Two-dimensional CRC over a (F, F, Z, Y) filter tensor. Each of the F*F planes is a Z x Y
/// matrix. Row words cover 4 consecutive y at fixed z, column words cover 4 consecutive z at
/// fixed y (the last group of an axis may be shorter).
///
/// rows[plane][z * ceil(Y/4) + gy], cols[plane][y * ceil(Z/4) + gz], flattened plane-major.
struct CrcGrid {
  std::size_t planes = 0;
  std::size_t z = 0;
  std::size_t y = 0;
  std::vector<std::uint32_t> rows;
  std::vector<std::uint32_t> cols;

  std::size_t row_groups() const noexcept { return (y + kCrcGroup - 1) / kCrcGroup; }
  std::size_t col_groups() const noexcept { return (z + kCrcGroup - 1) / kCrcGroup; }
  std::size_t word_count() const noexcept { return rows.size() + cols.size(); }
  std::size_t byte_size() const noexcept { return 4 * word_count(); }

  friend bool operator==(const CrcGrid&, const CrcGrid&) = default;
};

namespace detail {

template <Scalar T>
std::uint32_t row_crc(const T* plane, std::size_t y_count, std::size_t zi, std::size_t gy) {
  const std::size_t first = gy * kCrcGroup;
  const std::size_t n = std::min(kCrcGroup, y_count - first);
  return crc32c(plane + zi * y_count + first, n * sizeof(T));
}

template <Scalar T>
std::uint32_t col_crc(const T* plane, std::size_t z_count, std::size_t y_count, std::size_t yi, std::size_t gz) {
  T buf[kCrcGroup];
  const std::size_t first = gz * kCrcGroup;
  const std::size_t n = std::min(kCrcGroup, z_count - first);
  for (std::size_t k = 0; k < n; ++k) buf[k] = plane[(first + k) * y_count + yi];
  return crc32c(buf, n * sizeof(T));
}

inline void check_filter_shape(const Shape& s) {
  if (s.size() != 4 || s[0] != s[1]) throw DimensionError("CRC grid expects (F,F,Z,Y) filters, got " + shape_string(s));
}

}  // namespace detail

template <Scalar T>
CrcGrid build_crc_grid(const Tensor<T>& filters) {
  detail::check_filter_shape(filters.shape());
  CrcGrid g;
  g.planes = filters.dim(0) * filters.dim(1);
  g.z = filters.dim(2);
  g.y = filters.dim(3);
  const std::size_t ry = g.row_groups(), cz = g.col_groups();
  g.rows.reserve(g.planes * g.z * ry);
  g.cols.reserve(g.planes * g.y * cz);
  for (std::size_t p = 0; p < g.planes; ++p) {
    const T* plane = filters.data().data() + p * g.z * g.y;
    for (std::size_t zi = 0; zi < g.z; ++zi)
      for (std::size_t gy = 0; gy < ry; ++gy) g.rows.push_back(detail::row_crc(plane, g.y, zi, gy));
    for (std::size_t yi = 0; yi < g.y; ++yi)
      for (std::size_t gz = 0; gz < cz; ++gz) g.cols.push_back(detail::col_crc(plane, g.z, g.y, yi, gz));
  }
  return g;
}

/// Nudges re-solved weights (flat `indices`, as from crc_localize) by up to `radius` ulps
/// until each touched row group matches its stored CRC again. Groups with no match keep the
/// solved values. Returns the number of row groups that now match.
template <Scalar T>
std::size_t crc_snap(std::span<T> filters, const CrcGrid& grid, const std::vector<std::size_t>& indices, int radius = 4) {
  const std::size_t ry = grid.row_groups();
  std::map<std::size_t, std::vector<std::size_t>> groups;  // row word -> members
  for (std::size_t idx : indices) {
    const std::size_t row = idx / grid.y, yi = idx % grid.y;
    groups[row * ry + yi / kCrcGroup].push_back(idx);
  }
  std::size_t matched = 0;
  for (auto& [word, members] : groups) {
    const std::size_t row = word / ry, gy = word % ry;
    const std::size_t p = row / grid.z, zi = row % grid.z;
    T* plane = filters.data() + p * grid.z * grid.y;
    const auto crc_ok = [&] { return detail::row_crc(plane, grid.y, zi, gy) == grid.rows[word]; };
    if (crc_ok()) {
      ++matched;
      continue;
    }
    std::vector<T> base;
    for (std::size_t idx : members) base.push_back(filters[idx]);
    const auto step = [](T v, int k) {
      for (; k > 0; --k) v = std::nextafter(v, std::numeric_limits<T>::infinity());
      for (; k < 0; ++k) v = std::nextafter(v, -std::numeric_limits<T>::infinity());
      return v;
    };
    const int width = 2 * radius + 1;
    std::size_t combos = 1;
    for (std::size_t k = 0; k < members.size(); ++k) combos *= static_cast<std::size_t>(width);
    bool found = false;
    for (std::size_t c = 0; c < combos && !found; ++c) {
      std::size_t rest = c;
      for (std::size_t k = 0; k < members.size(); ++k, rest /= static_cast<std::size_t>(width)) {
        filters[members[k]] = step(base[k], static_cast<int>(rest % static_cast<std::size_t>(width)) - radius);
      }
      found = crc_ok();
    }
    if (found) {
      ++matched;
    } else {
      for (std::size_t k = 0; k < members.size(); ++k) filters[members[k]] = base[k];
    }
  }
  return matched;
}

/// Flat indices (into the filter tensor) of parameters whose row group and column group both
/// mismatch. Always contains every modified parameter unless a CRC collides.
template <Scalar T>
std::vector<std::size_t> crc_localize(const Tensor<T>& filters, const CrcGrid& grid) {
  detail::check_filter_shape(filters.shape());
  if (filters.dim(0) * filters.dim(1) != grid.planes || filters.dim(2) != grid.z || filters.dim(3) != grid.y) {
    throw DimensionError("CRC grid was built for a different filter shape");
  }
  const std::size_t ry = grid.row_groups(), cz = grid.col_groups();
  std::vector<std::size_t> flagged;
  std::vector<char> bad_col(grid.y * cz);
  for (std::size_t p = 0; p < grid.planes; ++p) {
    const T* plane = filters.data().data() + p * grid.z * grid.y;
    bool any = false;
    for (std::size_t yi = 0; yi < grid.y; ++yi)
      for (std::size_t gz = 0; gz < cz; ++gz) {
        const bool bad = detail::col_crc(plane, grid.z, grid.y, yi, gz) != grid.cols[(p * grid.y + yi) * cz + gz];
        bad_col[yi * cz + gz] = bad;
        any = any || bad;
      }
    for (std::size_t zi = 0; zi < grid.z; ++zi)
      for (std::size_t gy = 0; gy < ry; ++gy) {
        if (detail::row_crc(plane, grid.y, zi, gy) == grid.rows[(p * grid.z + zi) * ry + gy]) continue;
        if (!any) continue;
        const std::size_t last = std::min(grid.y, (gy + 1) * kCrcGroup);
        for (std::size_t yi = gy * kCrcGroup; yi < last; ++yi)
          if (bad_col[yi * cz + zi / kCrcGroup]) flagged.push_back((p * grid.z + zi) * grid.y + yi);
      }
  }
  std::sort(flagged.begin(), flagged.end());
  return flagged;
}

}  // namespace milr
