#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "milr/crc_grid.hpp"
#include "milr/errors.hpp"
#include "milr/linalg.hpp"
#include "milr/network.hpp"
#include "milr/rng.hpp"
#include "milr/tensor.hpp"

namespace milr {

/// Payload precision of stored golden data (checkpoints, dummy outputs).
/// `wide` keeps f64 payloads so f32 weights heal bit-exactly; `compact` stores them in the
/// network dtype and halves the sidecar. Partial checkpoints are f64 in both modes.
enum class SidecarPrecision : std::uint8_t { wide = 0, compact = 1 };

/// How recovery walks backward through a layer on its way to an earlier erroneous layer.
enum class BackwardStrategy : std::uint8_t {
  none = 0,          // never crossed backward (no parameterized layer before it in its bracket)
  invertible = 1,    // P >= N (dense) or Y >= F*F*Z (conv), or bias/activation/flatten
  dummy_padded = 2,  // extra random columns/filters whose outputs are stored
  checkpointed = 3,  // a full input checkpoint sits in front of the layer
};

/// How recovery solves for a layer's own parameters.
enum class SolveStrategy : std::uint8_t {
  direct = 0,        // golden input alone gives enough equations
  dummy_inputs = 1,  // extra random input rows/images whose outputs are stored
  partial_crc = 2,   // only CRC-localized filter weights are re-solved
  subtraction = 3,   // bias: output minus input
};

inline const char* backward_strategy_name(BackwardStrategy s) noexcept {
  switch (s) {
    case BackwardStrategy::none: return "none";
    case BackwardStrategy::invertible: return "invertible";
    case BackwardStrategy::dummy_padded: return "dummy-padded";
    case BackwardStrategy::checkpointed: return "checkpointed";
  }
  return "unknown";
}

inline const char* solve_strategy_name(SolveStrategy s) noexcept {
  switch (s) {
    case SolveStrategy::direct: return "direct";
    case SolveStrategy::dummy_inputs: return "dummy-inputs";
    case SolveStrategy::partial_crc: return "partial-crc";
    case SolveStrategy::subtraction: return "subtraction";
  }
  return "unknown";
}

struct PlanOptions {
  std::uint64_t seed = 0x4D494C52ULL;
  SidecarPrecision precision = SidecarPrecision::wide;
  /// Extra full checkpoints (layer-input indices) on top of the ones the planner picks.
  std::vector<std::size_t> forced_checkpoints;
};

struct DetectionRecord {
  std::size_t layer = 0;
  LayerKind kind = LayerKind::dense;
  /// dense: one value per column; conv: one per filter; bias: the parameter sum.
  std::vector<double> partial;
  std::optional<CrcGrid> crc;

  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

struct RecoveryRecord {
  std::size_t layer = 0;
  LayerKind kind = LayerKind::dense;
  BackwardStrategy backward = BackwardStrategy::none;
  std::uint64_t backward_seed = 0;
  std::optional<Tensor<double>> backward_outputs;
  SolveStrategy solve = SolveStrategy::direct;
  std::uint64_t solve_seed = 0;
  std::size_t dummy_count = 0;
  std::optional<Tensor<double>> solve_outputs;

  friend bool operator==(const RecoveryRecord&, const RecoveryRecord&) = default;
};

/// Everything MILR keeps beside the network. Checkpoint id c is the golden input of layer c;
/// id 1 is the network input and id == layer_count is the final output.
struct MilrState {
  std::uint64_t detect_seed = 0;
  std::uint64_t golden_seed = 0;
  SidecarPrecision precision = SidecarPrecision::wide;
  DType dtype = DType::f32;
  std::size_t layer_count = 0;
  std::vector<std::size_t> checkpoint_ids;
  std::vector<Tensor<double>> checkpoints;
  std::vector<DetectionRecord> detection;
  std::vector<RecoveryRecord> recovery;

  std::size_t payload_size() const noexcept { return precision == SidecarPrecision::wide ? 8 : dtype_size(dtype); }

  const Tensor<double>& checkpoint(std::size_t id) const {
    const auto it = std::lower_bound(checkpoint_ids.begin(), checkpoint_ids.end(), id);
    if (it == checkpoint_ids.end() || *it != id) throw PlanError("no checkpoint stored at layer " + std::to_string(id));
    return checkpoints[static_cast<std::size_t>(it - checkpoint_ids.begin())];
  }

  bool has_checkpoint(std::size_t id) const {
    return std::binary_search(checkpoint_ids.begin(), checkpoint_ids.end(), id);
  }

  /// Nearest checkpoint at or before `layer` and nearest at or after `layer + 1`.
  std::pair<std::size_t, std::size_t> bracket(std::size_t layer) const {
    auto hi = std::lower_bound(checkpoint_ids.begin(), checkpoint_ids.end(), layer + 1);
    if (hi == checkpoint_ids.begin() || hi == checkpoint_ids.end()) {
      throw PlanError("layer " + std::to_string(layer) + " is not bracketed by checkpoints");
    }
    return {*(hi - 1), *hi};
  }

  const DetectionRecord* detection_for(std::size_t layer) const {
    for (const auto& r : detection)
      if (r.layer == layer) return &r;
    return nullptr;
  }

  const RecoveryRecord* recovery_for(std::size_t layer) const {
    for (const auto& r : recovery)
      if (r.layer == layer) return &r;
    return nullptr;
  }

  std::size_t checkpoint_bytes() const {
    std::size_t n = 0;
    for (const auto& c : checkpoints) n += c.size() * payload_size();
    return n;
  }

  std::size_t detection_bytes() const {
    std::size_t n = 0;
    for (const auto& d : detection) n += d.partial.size() * 8 + (d.crc ? d.crc->byte_size() : 0);
    return n;
  }

  std::size_t recovery_bytes() const {
    std::size_t n = 0;
    for (const auto& r : recovery) {
      if (r.backward_outputs) n += r.backward_outputs->size() * payload_size() + 8;
      if (r.solve_outputs) n += r.solve_outputs->size() * payload_size() + 8;
    }
    return n;
  }

  /// Bytes of every stored tensor, CRC word and seed (detect and golden seeds included).
  std::size_t plan_cost_bytes() const { return 16 + checkpoint_bytes() + detection_bytes() + recovery_bytes(); }

  friend bool operator==(const MilrState&, const MilrState&) = default;
};

struct DetectionEntry {
  std::size_t layer = 0;
  std::size_t checkpoint_before = 0;
  std::size_t checkpoint_after = 0;
  bool partial_mismatch = false;
  /// Flat filter indices from the 2D CRC (partial-crc conv layers only).
  std::vector<std::size_t> crc_flagged;
};

struct DetectionLog {
  std::vector<DetectionEntry> entries;

  bool empty() const noexcept { return entries.empty(); }
  std::vector<std::size_t> layers() const {
    std::vector<std::size_t> out;
    for (const auto& e : entries) out.push_back(e.layer);
    return out;
  }
  bool contains(std::size_t layer) const {
    return std::any_of(entries.begin(), entries.end(), [&](const DetectionEntry& e) { return e.layer == layer; });
  }
};

enum class RecoveryStatus : std::uint8_t { recovered = 0, degraded = 1, failed = 2 };

inline const char* recovery_status_name(RecoveryStatus s) noexcept {
  switch (s) {
    case RecoveryStatus::recovered: return "recovered";
    case RecoveryStatus::degraded: return "degraded";
    case RecoveryStatus::failed: return "failed";
  }
  return "unknown";
}

struct LayerRecovery {
  std::size_t layer = 0;
  RecoveryStatus status = RecoveryStatus::failed;
  std::size_t params_written = 0;
  bool least_squares_fallback = false;
  bool shared_bracket = false;
  std::string detail;
};

struct RecoveryReport {
  std::vector<LayerRecovery> layers;

  std::size_t count(RecoveryStatus s) const {
    return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [&](const LayerRecovery& l) { return l.status == s; }));
  }
  bool all_recovered() const { return count(RecoveryStatus::recovered) == layers.size(); }
};

/// Relative tolerance for f64 networks, whose re-solved weights cannot come back bit-exact.
inline constexpr double kDetectTolerance = 1e-10;

namespace detail {

inline constexpr std::uint64_t kDetectStream = 1;
inline constexpr std::uint64_t kGoldenStream = 2;
inline constexpr std::uint64_t kBackwardStream = 0x100;
inline constexpr std::uint64_t kSolveStream = 0x200;

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.next_unit();
  return v;
}

/// Designated detection outputs of a parameterized layer plus, per output, sum |x*w| (the
/// scale used for the f64 tolerance). Accumulates in f64 with k ascending.
template <Scalar T>
std::pair<std::vector<double>, std::vector<double>> detection_outputs(const Network<T>& net, std::size_t layer,
                                                                      std::uint64_t detect_seed) {
  const auto w = net.params(layer).data();
  if (net.kind(layer) == LayerKind::bias) {
    double sum = 0.0, scale = 0.0;
    for (T v : w) {
      sum += static_cast<double>(v);
      scale += std::abs(static_cast<double>(v));
    }
    return {{sum}, {scale}};
  }
  const Shape& s = net.params(layer).shape();
  const std::size_t cols = s.back();
  const std::size_t k_count = w.size() / cols;
  const std::vector<double> x = random_values(k_count, derive_seed(detect_seed, layer));
  std::vector<double> out(cols, 0.0), scale(cols, 0.0);
  for (std::size_t k = 0; k < k_count; ++k) {
    const T* row = w.data() + k * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      const double t = x[k] * static_cast<double>(row[c]);
      out[c] += t;
      scale[c] += std::abs(t);
    }
  }
  return {out, scale};
}

template <Scalar T>
bool partial_matches(const std::vector<double>& stored, const std::vector<double>& now, const std::vector<double>& scale) {
  if (stored.size() != now.size()) return false;
  for (std::size_t i = 0; i < now.size(); ++i) {
    if constexpr (std::is_same_v<T, float>) {
      if (std::bit_cast<std::uint64_t>(stored[i]) != std::bit_cast<std::uint64_t>(now[i])) return false;
    } else {
      if (!(std::abs(stored[i] - now[i]) <= kDetectTolerance * scale[i])) return false;
    }
  }
  return true;
}

inline bool conv_covers_input(const ConvGeometry& g) {
  std::vector<char> covered(g.input, 0);
  for (std::size_t o = 0; o < g.output; ++o) {
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(o * g.stride) - static_cast<std::ptrdiff_t>(g.pad_before);
    for (std::size_t f = 0; f < g.filter; ++f) {
      const std::ptrdiff_t r = start + static_cast<std::ptrdiff_t>(f);
      if (r >= 0 && r < static_cast<std::ptrdiff_t>(g.input)) covered[static_cast<std::size_t>(r)] = 1;
    }
  }
  return std::all_of(covered.begin(), covered.end(), [](char c) { return c != 0; });
}

template <Scalar T>
ConvGeometry layer_geometry(const Network<T>& net, std::size_t layer) {
  const auto& c = std::get<Conv2DLayer<T>>(net.layer(layer));
  return conv_geometry(net.input_shape(layer)[0], c.filters.dim(0), c.stride, c.padding);
}

inline void store(Tensor<double>& t, SidecarPrecision precision, DType dtype) {
  if (precision == SidecarPrecision::compact) round_to_dtype(t, dtype);
}

/// Golden per-layer inputs of a linear-mode pass; acts[c] is the input of layer c, acts[L] the output.
inline std::vector<Tensor<double>> golden_activations(const Network<double>& g, const Tensor<double>& x0) {
  std::vector<Tensor<double>> acts;
  acts.reserve(g.size() + 1);
  acts.push_back(x0);
  for (std::size_t i = 0; i < g.size(); ++i) acts.push_back(apply_layer(g.layer(i), acts.back(), ActivationMode::linear));
  return acts;
}

/// (N-1) x P outputs of the dummy input rows for a dense solve, generated in row chunks.
inline Tensor<double> dense_dummy_row_outputs(const Tensor<double>& w, std::size_t rows, std::uint64_t seed) {
  const std::size_t n = w.dim(0), p = w.dim(1);
  Tensor<double> out({rows, p});
  const auto wm = as_matrix(w);
  Rng rng(seed);
  constexpr std::size_t kChunk = 512;
  RowMatrix chunk;
  for (std::size_t r0 = 0; r0 < rows; r0 += kChunk) {
    const std::size_t m = std::min(kChunk, rows - r0);
    chunk.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < chunk.rows(); ++i)
      for (Eigen::Index j = 0; j < chunk.cols(); ++j) chunk(i, j) = rng.next_unit();
    Eigen::Map<RowMatrix>(out.data().data() + r0 * p, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(p)) =
        -accurate_residual(RowMatrix(), chunk, wm, false);
  }
  return out;
}

/// conv2d through im2col and accurate_matmul.
inline Tensor<double> accurate_conv(const Tensor<double>& x, const Tensor<double>& filters, std::size_t stride, Padding padding) {
  const Shape& s = filters.shape();
  const Tensor<double> cols = im2col(x, s[0], stride, padding);
  const std::size_t g = conv_geometry(x.dim(0), s[0], stride, padding).output;
  return accurate_matmul(cols, filters.reshaped({s[0] * s[1] * s[2], s[3]})).reshaped({g, g, s[3]});
}

/// Refinement steps used by every recovery solve.
inline constexpr int kRefineSteps = 1;

}  // namespace detail

/// True when the layer's input can be recovered from its output without extra data.
template <Scalar T>
bool natively_invertible(const Network<T>& net, std::size_t layer) {
  switch (net.kind(layer)) {
    case LayerKind::dense: {
      const Shape& s = net.params(layer).shape();
      return s[1] >= s[0];
    }
    case LayerKind::conv2d: {
      const Shape& s = net.params(layer).shape();
      return s[3] >= s[0] * s[1] * s[2] && detail::conv_covers_input(detail::layer_geometry(net, layer));
    }
    case LayerKind::maxpool: return false;
    default: return true;
  }
}

/// Builds the recovery plan and all sidecar data for a pristine network.
///
/// Scanning left to right, `pending` is set once a parameterized layer has been seen since the
/// last checkpoint. A pending layer that cannot be inverted must either sit behind a full input
/// checkpoint or get dummy backward data; the cheaper of the two is taken. Pooling is never
/// invertible, so it always gets the checkpoint.
template <Scalar T>
MilrState initialize(const Network<T>& net, const PlanOptions& options = {}) {
  MilrState st;
  st.detect_seed = derive_seed(options.seed, detail::kDetectStream);
  st.golden_seed = derive_seed(options.seed, detail::kGoldenStream);
  st.precision = options.precision;
  st.dtype = dtype_of<T>;
  st.layer_count = net.size();
  const std::size_t L = net.size();
  const std::size_t unit = dtype_size(dtype_of<T>);

  const Network<double> g = net.template cast<double>();
  Rng golden_rng(st.golden_seed);
  const auto acts = detail::golden_activations(g, Tensor<double>::random(net.input_shape(0), golden_rng));

  std::vector<std::size_t> ids{std::min<std::size_t>(1, L), L};
  std::vector<BackwardStrategy> backward(L, BackwardStrategy::none);
  bool pending = false;
  for (std::size_t i = 1; i < L; ++i) {
    if (std::find(options.forced_checkpoints.begin(), options.forced_checkpoints.end(), i) != options.forced_checkpoints.end()) {
      ids.push_back(i);
      pending = false;
    }
    const LayerKind k = net.kind(i);
    if (k == LayerKind::maxpool) {
      if (pending) {
        ids.push_back(i);
        backward[i] = BackwardStrategy::checkpointed;
        pending = false;
      }
      continue;
    }
    if (!pending) {
      if (net.has_params(i)) pending = true;
      continue;
    }
    if (natively_invertible(net, i)) {
      backward[i] = BackwardStrategy::invertible;
    } else {
      const std::size_t ckpt_cost = shape_product(net.input_shape(i)) * unit;
      std::size_t dummy_cost = SIZE_MAX;
      const Shape& s = net.params(i).shape();
      if (k == LayerKind::dense) {
        dummy_cost = (s[0] - s[1]) * unit + 8;
      } else if (detail::conv_covers_input(detail::layer_geometry(net, i))) {
        const ConvGeometry geo = detail::layer_geometry(net, i);
        dummy_cost = geo.output * geo.output * (s[0] * s[1] * s[2] - s[3]) * unit + 8;
      }
      if (ckpt_cost <= dummy_cost) {
        ids.push_back(i);
        backward[i] = BackwardStrategy::checkpointed;
      } else {
        backward[i] = BackwardStrategy::dummy_padded;
      }
    }
    if (net.has_params(i)) pending = true;
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  st.checkpoint_ids = ids;
  for (std::size_t id : ids) {
    Tensor<double> c = acts[id];
    detail::store(c, st.precision, st.dtype);
    st.checkpoints.push_back(std::move(c));
  }

  for (std::size_t i : net.parameterized_layers()) {
    const LayerKind k = net.kind(i);
    const Tensor<double>& w = g.params(i);

    DetectionRecord d{i, k, detail::detection_outputs(net, i, st.detect_seed).first, std::nullopt};
    RecoveryRecord r;
    r.layer = i;
    r.kind = k;
    r.backward = backward[i];

    if (r.backward == BackwardStrategy::dummy_padded) {
      r.backward_seed = derive_seed(options.seed, detail::kBackwardStream + i);
      Rng rng(r.backward_seed);
      const Shape& s = w.shape();
      Tensor<double> outs;
      if (k == LayerKind::dense) {
        const Tensor<double> dummy = Tensor<double>::random({s[0], s[0] - s[1]}, rng);
        outs = accurate_matmul(acts[i].reshaped({1, s[0]}), dummy).reshaped({s[0] - s[1]});
      } else {
        const auto& c = std::get<Conv2DLayer<double>>(g.layer(i));
        const Tensor<double> dummy = Tensor<double>::random({s[0], s[1], s[2], s[0] * s[1] * s[2] - s[3]}, rng);
        outs = detail::accurate_conv(acts[i], dummy, c.stride, c.padding);
      }
      detail::store(outs, st.precision, st.dtype);
      r.backward_outputs = std::move(outs);
    }

    if (k == LayerKind::bias) {
      r.solve = SolveStrategy::subtraction;
    } else if (k == LayerKind::dense) {
      const std::size_t n = w.dim(0);
      if (n > 1) {
        r.solve = SolveStrategy::dummy_inputs;
        r.solve_seed = derive_seed(options.seed, detail::kSolveStream + i);
        r.dummy_count = n - 1;
        Tensor<double> outs = detail::dense_dummy_row_outputs(w, n - 1, r.solve_seed);
        detail::store(outs, st.precision, st.dtype);
        r.solve_outputs = std::move(outs);
      }
    } else {
      const auto& c = std::get<Conv2DLayer<double>>(g.layer(i));
      const ConvGeometry geo = detail::layer_geometry(net, i);
      const Shape& s = w.shape();
      const std::size_t g2 = geo.output * geo.output, fz = s[0] * s[1] * s[2];
      // The golden input only pins down as many weights as its im2col has independent rows.
      const std::size_t usable = g2 < fz ? g2 : matrix_rank(im2col(acts[i], s[0], c.stride, c.padding));
      if (usable < fz) {
        const std::size_t extra = (fz - usable + g2 - 1) / g2;
        const std::size_t dummy_cost = extra * g2 * s[3] * unit + 8;
        const CrcGrid grid = build_crc_grid(net.params(i));
        if (grid.byte_size() < dummy_cost) {
          r.solve = SolveStrategy::partial_crc;
          d.crc = grid;
        } else {
          r.solve = SolveStrategy::dummy_inputs;
          r.solve_seed = derive_seed(options.seed, detail::kSolveStream + i);
          r.dummy_count = extra;
          Rng rng(r.solve_seed);
          Tensor<double> outs({extra * g2, s[3]});
          for (std::size_t e = 0; e < extra; ++e) {
            const Tensor<double> y = detail::accurate_conv(Tensor<double>::random(net.input_shape(i), rng), w, c.stride, c.padding);
            std::copy(y.data().begin(), y.data().end(), outs.data().begin() + static_cast<std::ptrdiff_t>(e * y.size()));
          }
          detail::store(outs, st.precision, st.dtype);
          r.solve_outputs = std::move(outs);
        }
      }
    }
    st.detection.push_back(std::move(d));
    st.recovery.push_back(std::move(r));
  }
  return st;
}

namespace detail {

template <Scalar T>
void check_state(const Network<T>& net, const MilrState& st) {
  if (st.layer_count != net.size()) {
    throw PlanError("MILR state covers " + std::to_string(st.layer_count) + " layers, network has " +
                    std::to_string(net.size()));
  }
  if (st.dtype != dtype_of<T>) throw PlanError("MILR state was built for a different dtype");
}

}  // namespace detail

/// Re-runs one layer's detection check. Returns (partial mismatch, CRC-flagged indices).
///
/// f64 layers consult the CRC grid only after a partial mismatch: their re-solved weights
/// sit within the detection tolerance but not always on the original bits.
template <Scalar T>
std::pair<bool, std::vector<std::size_t>> detect_layer(const Network<T>& net, const MilrState& st, std::size_t layer) {
  const DetectionRecord* d = st.detection_for(layer);
  if (!d) throw PlanError("no detection record for layer " + std::to_string(layer));
  const auto [now, scale] = detail::detection_outputs(net, layer, st.detect_seed);
  const bool mismatch = !detail::partial_matches<T>(d->partial, now, scale);
  std::vector<std::size_t> flagged;
  if (d->crc && (mismatch || std::is_same_v<T, float>)) flagged = crc_localize(net.params(layer), *d->crc);
  return {mismatch, std::move(flagged)};
}

/// Compares every parameterized layer against its partial checkpoint (and CRC grid).
template <Scalar T>
DetectionLog detect(const Network<T>& net, const MilrState& st) {
  detail::check_state(net, st);
  DetectionLog log;
  for (const auto& d : st.detection) {
    auto [mismatch, flagged] = detect_layer(net, st, d.layer);
    if (!mismatch && flagged.empty()) continue;
    const auto [lo, hi] = st.bracket(d.layer);
    log.entries.push_back({d.layer, lo, hi, mismatch, std::move(flagged)});
  }
  return log;
}

/// Recovers a layer's input from its output, using the layer's backward strategy.
inline Tensor<double> backward_pass(const Network<double>& g, std::size_t layer, const Tensor<double>& y, const MilrState& st) {
  const Shape& in_shape = g.input_shape(layer);
  switch (g.kind(layer)) {
    case LayerKind::input:
    case LayerKind::relu: return y;
    case LayerKind::flatten: return y.reshaped(in_shape);
    case LayerKind::maxpool:
      throw PlanError("layer " + std::to_string(layer) + " (maxpool) cannot be inverted and has no checkpoint");
    case LayerKind::bias: {
      Tensor<double> x = y;
      const auto& b = g.params(layer);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] -= b[i % b.size()];
      return x;
    }
    default: break;
  }
  const RecoveryRecord* r = st.recovery_for(layer);
  if (!r || (r->backward != BackwardStrategy::invertible && r->backward != BackwardStrategy::dummy_padded)) {
    throw PlanError("layer " + std::to_string(layer) + " has no backward data in the recovery plan");
  }
  const Tensor<double>& w = g.params(layer);
  const Shape& s = w.shape();
  std::optional<Tensor<double>> dummy;
  if (r->backward == BackwardStrategy::dummy_padded) {
    Rng rng(r->backward_seed);
    const std::size_t alpha = g.kind(layer) == LayerKind::dense ? s[0] - s[1] : s[0] * s[1] * s[2] - s[3];
    dummy = g.kind(layer) == LayerKind::dense ? Tensor<double>::random({s[0], alpha}, rng)
                                              : Tensor<double>::random({s[0], s[1], s[2], alpha}, rng);
  }

  if (g.kind(layer) == LayerKind::dense) {
    // x W' = y'  ->  W'^T x^T = y'^T
    const std::size_t n = s[0], p = s[1], alpha = dummy ? dummy->dim(1) : 0;
    Tensor<double> a({p + alpha, n});
    Tensor<double> c({p + alpha, 1});
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t j = 0; j < p; ++j) a.at(j, k) = w.at(k, j);
      for (std::size_t j = 0; j < alpha; ++j) a.at(p + j, k) = dummy->at(k, j);
    }
    for (std::size_t j = 0; j < p; ++j) c[j] = y[j];
    for (std::size_t j = 0; j < alpha; ++j) c[p + j] = (*r->backward_outputs)[j];
    return least_squares(a, c, detail::kRefineSteps).x.reshaped(in_shape);
  }

  // conv: every receptive field p_r satisfies W'^T p_r = y'_r; solve all positions at once.
  const auto& conv = std::get<Conv2DLayer<double>>(g.layer(layer));
  const std::size_t k_count = s[0] * s[1] * s[2], ycount = s[3], alpha = dummy ? dummy->dim(3) : 0;
  const std::size_t g2 = y.dim(0) * y.dim(1);
  Tensor<double> a({ycount + alpha, k_count});
  Tensor<double> c({ycount + alpha, g2});
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t j = 0; j < ycount; ++j) a.at(j, k) = w[k * ycount + j];
    for (std::size_t j = 0; j < alpha; ++j) a.at(ycount + j, k) = (*dummy)[k * alpha + j];
  }
  for (std::size_t r2 = 0; r2 < g2; ++r2) {
    for (std::size_t j = 0; j < ycount; ++j) c.at(j, r2) = y[r2 * ycount + j];
    for (std::size_t j = 0; j < alpha; ++j) c.at(ycount + j, r2) = (*r->backward_outputs)[r2 * alpha + j];
  }
  const Tensor<double> patches = transpose(least_squares(a, c, detail::kRefineSteps).x);
  return col2im_average(patches, in_shape[0], in_shape[2], s[0], conv.stride, conv.padding);
}

/// Result of a parameter solve: new values for the listed flat indices (all when `indices` is empty).
struct ParamSolution {
  Tensor<double> values;
  std::vector<std::size_t> indices;
  bool least_squares_fallback = false;
};

/// Dense parameters from one golden row plus N-1 regenerated dummy rows: [x; D] W = [y; D W].
inline ParamSolution solve_dense_params(const Tensor<double>& x, const Tensor<double>& y, const RecoveryRecord& r) {
  const std::size_t n = x.size(), p = y.size();
  const std::size_t rows = 1 + (r.solve_outputs ? r.dummy_count : 0);
  Tensor<double> a({rows, n});
  Tensor<double> c({rows, p});
  std::copy(x.data().begin(), x.data().end(), a.data().begin());
  std::copy(y.data().begin(), y.data().end(), c.data().begin());
  if (r.solve_outputs) {
    Rng rng(r.solve_seed);
    for (std::size_t i = n; i < rows * n; ++i) a[i] = rng.next_unit();
    std::copy(r.solve_outputs->data().begin(), r.solve_outputs->data().end(), c.data().begin() + static_cast<std::ptrdiff_t>(p));
  }
  LeastSquaresSolution s = least_squares(a, c, detail::kRefineSteps);
  return {std::move(s.x), {}, s.rank_deficient || rows < n};
}

/// Full conv solve: im2col(x) W = y, stacked with the regenerated dummy input images.
inline ParamSolution solve_conv_params(const Network<double>& g, std::size_t layer, const Tensor<double>& x,
                                       const Tensor<double>& y, const RecoveryRecord& r) {
  const auto& conv = std::get<Conv2DLayer<double>>(g.layer(layer));
  const Shape& s = conv.filters.shape();
  const std::size_t f = s[0], k_count = s[0] * s[1] * s[2], ycount = s[3];
  const std::size_t g2 = y.dim(0) * y.dim(1);
  const std::size_t blocks = 1 + (r.solve_outputs ? r.dummy_count : 0);
  Tensor<double> a({blocks * g2, k_count});
  Tensor<double> c({blocks * g2, ycount});
  auto put = [&](std::size_t block, const Tensor<double>& input) {
    const Tensor<double> cols = im2col(input, f, conv.stride, conv.padding);
    std::copy(cols.data().begin(), cols.data().end(), a.data().begin() + static_cast<std::ptrdiff_t>(block * cols.size()));
  };
  put(0, x);
  std::copy(y.data().begin(), y.data().end(), c.data().begin());
  if (r.solve_outputs) {
    Rng rng(r.solve_seed);
    for (std::size_t e = 0; e < r.dummy_count; ++e) put(1 + e, Tensor<double>::random(x.shape(), rng));
    std::copy(r.solve_outputs->data().begin(), r.solve_outputs->data().end(),
              c.data().begin() + static_cast<std::ptrdiff_t>(g2 * ycount));
  }
  LeastSquaresSolution sol = least_squares(a, c, detail::kRefineSteps);
  return {std::move(sol.x).reshaped(s), {}, sol.rank_deficient};
}

/// Partial conv solve: only `flagged` weights are unknown. Known weights' contribution is
/// subtracted from the output and each filter's reduced system is solved on its own.
/// Throws SingularSystemError when a filter has more flagged weights than G^2 equations or its
/// reduced system is rank deficient.
inline ParamSolution solve_conv_params_partial(const Network<double>& g, std::size_t layer, const Tensor<double>& x,
                                               const Tensor<double>& y, const std::vector<std::size_t>& flagged) {
  const auto& conv = std::get<Conv2DLayer<double>>(g.layer(layer));
  const Tensor<double>& w = conv.filters;
  const std::size_t k_count = w.dim(0) * w.dim(1) * w.dim(2), ycount = w.dim(3);
  const Tensor<double> cols = im2col(x, w.dim(0), conv.stride, conv.padding);
  const std::size_t g2 = cols.dim(0);

  std::vector<std::vector<std::size_t>> per_filter(ycount);
  for (std::size_t idx : flagged) per_filter[idx % ycount].push_back(idx / ycount);
  for (std::size_t j = 0; j < ycount; ++j) {
    if (per_filter[j].size() > g2) {
      throw SingularSystemError("filter " + std::to_string(j) + " has " + std::to_string(per_filter[j].size()) +
                                " flagged weights but only " + std::to_string(g2) + " equations");
    }
  }

  ParamSolution out{Tensor<double>({flagged.empty() ? std::size_t{1} : flagged.size()}), {}, false};
  std::size_t pos = 0;
  for (std::size_t j = 0; j < ycount; ++j) {
    const auto& unknown = per_filter[j];
    if (unknown.empty()) continue;
    std::vector<char> is_unknown(k_count, 0);
    for (std::size_t k : unknown) is_unknown[k] = 1;
    Tensor<double> a({g2, unknown.size()});
    Tensor<double> c({g2, 1});
    for (std::size_t r2 = 0; r2 < g2; ++r2) {
      double residual = y[r2 * ycount + j];
      for (std::size_t k = 0; k < k_count; ++k)
        if (!is_unknown[k]) residual -= cols.at(r2, k) * w[k * ycount + j];
      c[r2] = residual;
      for (std::size_t u = 0; u < unknown.size(); ++u) a.at(r2, u) = cols.at(r2, unknown[u]);
    }
    LeastSquaresSolution sol = least_squares(a, c, detail::kRefineSteps);
    if (sol.rank_deficient) {
      throw SingularSystemError("reduced system for filter " + std::to_string(j) + " is rank deficient (rank " +
                                std::to_string(sol.rank) + " for " + std::to_string(unknown.size()) + " unknowns)");
    }
    for (std::size_t u = 0; u < unknown.size(); ++u) {
      out.values[pos++] = sol.x[u];
      out.indices.push_back(unknown[u] * ycount + j);
    }
  }
  return out;
}

/// Bias parameters: output - input, read at the first broadcast position.
inline Tensor<double> solve_bias_params(const Tensor<double>& x, const Tensor<double>& y, std::size_t channels) {
  if (x.shape() != y.shape()) throw DimensionError("bias input/output shapes differ");
  Tensor<double> b({channels});
  for (std::size_t i = 0; i < channels; ++i) b[i] = y[i] - x[i];
  return b;
}

/// Golden input of `layer`: forward (linear mode) from the nearest checkpoint at or before it.
inline Tensor<double> recovery_input(const Network<double>& g, const MilrState& st, std::size_t layer) {
  const std::size_t lo = st.bracket(layer).first;
  return forward(g, st.checkpoint(lo), lo, layer, ActivationMode::linear);
}

/// Golden output of `layer`: backward from the nearest checkpoint after it.
inline Tensor<double> recovery_output(const Network<double>& g, const MilrState& st, std::size_t layer) {
  const std::size_t hi = st.bracket(layer).second;
  Tensor<double> y = st.checkpoint(hi);
  for (std::size_t j = hi; j-- > layer + 1;) y = backward_pass(g, j, y, st);
  return y;
}

/// Heals every layer in the log, in ascending order, writing parameters back in place.
template <Scalar T>
RecoveryReport recover(Network<T>& net, const MilrState& st, const DetectionLog& log) {
  detail::check_state(net, st);
  RecoveryReport report;
  for (const auto& e : log.entries) {
    LayerRecovery out;
    out.layer = e.layer;
    out.shared_bracket = std::any_of(log.entries.begin(), log.entries.end(), [&](const DetectionEntry& o) {
      return o.layer != e.layer && o.checkpoint_before == e.checkpoint_before;
    });
    try {
      const RecoveryRecord* r = st.recovery_for(e.layer);
      if (!r) throw PlanError("no recovery record for layer " + std::to_string(e.layer));
      const Network<double> g = net.template cast<double>();

      if (r->solve == SolveStrategy::partial_crc) {
        if (e.crc_flagged.empty()) throw SingularSystemError("partial checkpoint mismatch but no CRC-localized weights");
        const ConvGeometry geo = detail::layer_geometry(net, e.layer);
        std::vector<std::size_t> per(net.params(e.layer).dim(3), 0);
        for (std::size_t idx : e.crc_flagged) ++per[idx % per.size()];
        if (*std::max_element(per.begin(), per.end()) > geo.output * geo.output) {
          throw SingularSystemError("more flagged weights per filter than G^2; layer is only partially recoverable");
        }
      }

      const Tensor<double> x = recovery_input(g, st, e.layer);
      const Tensor<double> y = recovery_output(g, st, e.layer);
      ParamSolution sol;
      switch (r->solve) {
        case SolveStrategy::subtraction: sol.values = solve_bias_params(x, y, net.params(e.layer).size()); break;
        case SolveStrategy::partial_crc: sol = solve_conv_params_partial(g, e.layer, x, y, e.crc_flagged); break;
        default:
          sol = r->kind == LayerKind::dense ? solve_dense_params(x, y, *r) : solve_conv_params(g, e.layer, x, y, *r);
          break;
      }
      if (!all_finite(sol.values)) throw SingularSystemError("solver produced non-finite parameters");
      auto dst = net.param_data(e.layer);
      if (sol.indices.empty()) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(sol.values[i]);
        out.params_written = dst.size();
      } else {
        for (std::size_t i = 0; i < sol.indices.size(); ++i) dst[sol.indices[i]] = static_cast<T>(sol.values[i]);
        out.params_written = sol.indices.size();
        if (r->solve == SolveStrategy::partial_crc) crc_snap(dst, *st.detection_for(e.layer)->crc, sol.indices);
      }
      out.least_squares_fallback = sol.least_squares_fallback;
      const auto [mismatch, flagged] = detect_layer(net, st, e.layer);
      const bool clean = !mismatch && flagged.empty();
      if (clean && !out.least_squares_fallback && !out.shared_bracket) {
        out.status = RecoveryStatus::recovered;
      } else {
        out.status = RecoveryStatus::degraded;
        out.detail = !clean ? "layer still fails detection after write-back"
                     : out.shared_bracket ? "another erroneous layer shares the bracket"
                                          : "least-squares fallback";
      }
    } catch (const Error& err) {
      out.status = RecoveryStatus::failed;
      out.detail = err.what();
    }
    report.layers.push_back(std::move(out));
  }
  return report;
}

/// detect() followed by recover().
template <Scalar T>
std::pair<DetectionLog, RecoveryReport> detect_and_recover(Network<T>& net, const MilrState& st) {
  DetectionLog log = detect(net, st);
  RecoveryReport report = recover(net, st, log);
  return {std::move(log), std::move(report)};
}

}  // namespace milr
