#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "milr/datasets.hpp"
#include "milr/errors.hpp"
#include "milr/fault_injector.hpp"
#include "milr/milr_engine.hpp"
#include "milr/network.hpp"
#include "milr/secded.hpp"

namespace milr {

enum class Arm : std::uint8_t { none = 0, ecc = 1, milr = 2, ecc_milr = 3 };

inline const char* arm_name(Arm a) noexcept {
  switch (a) {
    case Arm::none: return "none";
    case Arm::ecc: return "ecc";
    case Arm::milr: return "milr";
    case Arm::ecc_milr: return "ecc+milr";
  }
  return "?";
}

inline Arm parse_arm(std::string_view s) {
  if (s == "none") return Arm::none;
  if (s == "ecc") return Arm::ecc;
  if (s == "milr") return Arm::milr;
  if (s == "ecc+milr" || s == "ecc_milr") return Arm::ecc_milr;
  throw DomainError("unknown arm '" + std::string(s) + "' (none, ecc, milr, ecc+milr)");
}

inline bool uses_ecc(Arm a) noexcept { return a == Arm::ecc || a == Arm::ecc_milr; }
inline bool uses_milr(Arm a) noexcept { return a == Arm::milr || a == Arm::ecc_milr; }

struct TrialResult {
  Arm arm = Arm::none;
  double rate = 0.0;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  std::size_t flips = 0;
  double accuracy = 0.0;
  double normalized_accuracy = 0.0;
  /// Every layer left corrupted after the ECC step appears in the detection log. Empty for
  /// arms that do not run detection.
  std::optional<bool> detected_all;
  std::size_t recovered = 0;
  std::size_t failed = 0;
  double detect_s = 0.0;
  double recover_s = 0.0;
};

/// Evaluation samples and the pristine network's accuracy on them.
template <Scalar T>
struct Evaluation {
  Dataset<T> data;
  double baseline = 0.0;
};

template <Scalar T>
double evaluate(const Network<T>& net, const Dataset<T>& data) {
  return classify_accuracy<T>(net, data.inputs, data.labels);
}

template <Scalar T>
Evaluation<T> make_evaluation(const Network<T>& pristine, Dataset<T> data) {
  Evaluation<T> e{std::move(data), 0.0};
  e.baseline = evaluate(pristine, e.data);
  if (!(e.baseline > 0.0)) throw DomainError("error-free accuracy is 0; normalized accuracy is undefined");
  return e;
}

/// Random inputs in [0,1) labelled with the pristine network's own predictions, for runs
/// without a dataset. Accuracy then measures agreement with the error-free network.
template <Scalar T>
Dataset<T> self_labeled_dataset(const Network<T>& pristine, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset<T> d;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<T> x(pristine.input_shape(0));
    for (auto& v : x.data()) v = static_cast<T>(rng.next_uniform());
    d.labels.push_back(static_cast<std::uint8_t>(predict_class(pristine, x)));
    d.inputs.push_back(std::move(x));
  }
  return d;
}

template <Scalar T>
struct ExperimentContext {
  const Network<T>& pristine;
  const MilrState& state;
  const Evaluation<T>& eval;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <Scalar T>
std::vector<std::size_t> corrupted_layers(const Network<T>& net, const Network<T>& pristine) {
  std::vector<std::size_t> out;
  for (std::size_t i : pristine.parameterized_layers())
    if (!(net.params(i) == pristine.params(i))) out.push_back(i);
  return out;
}

}  // namespace detail

/// One trial: inject -> (scrub) -> (detect + recover) -> evaluate.
template <Scalar T>
TrialResult run_trial(const ExperimentContext<T>& ctx, Arm arm, FaultKind kind, double rate, std::size_t trial,
                      std::uint64_t seed) {
  TrialResult res{arm, rate, trial, seed, 0, 0.0, 0.0, std::nullopt, 0, 0, 0.0, 0.0};
  Network<T> net = ctx.pristine;
  std::optional<EccMemory> ecc;
  if (uses_ecc(arm)) ecc = ecc_encode(net);

  InjectionReport rep;
  if (kind == FaultKind::bit_flip) {
    rep = ecc ? inject_bitflips(net, *ecc, rate, seed) : inject_bitflips(net, rate, seed);
  } else if (kind == FaultKind::whole_weight) {
    rep = inject_whole_weight(net, rate, seed);
  } else {
    throw DomainError("run_trial handles bit-flip and whole-weight faults");
  }
  res.flips = rep.flip_count();
  if (ecc) scrub(net, *ecc);

  if (uses_milr(arm)) {
    const auto dirty = detail::corrupted_layers(net, ctx.pristine);
    auto t0 = std::chrono::steady_clock::now();
    const DetectionLog log = detect(net, ctx.state);
    res.detect_s = detail::seconds_since(t0);
    res.detected_all = std::all_of(dirty.begin(), dirty.end(), [&](std::size_t l) { return log.contains(l); });
    t0 = std::chrono::steady_clock::now();
    const RecoveryReport rr = recover(net, ctx.state, log);
    res.recover_s = detail::seconds_since(t0);
    res.recovered = rr.count(RecoveryStatus::recovered);
    res.failed = rr.layers.size() - res.recovered;
  }
  res.accuracy = evaluate(net, ctx.eval.data);
  res.normalized_accuracy = res.accuracy / ctx.eval.baseline;
  return res;
}

namespace detail {

template <Scalar T>
std::vector<TrialResult> run_grid(const ExperimentContext<T>& ctx, FaultKind kind, const std::vector<double>& rates,
                                  std::size_t trials, const std::vector<Arm>& arms, std::uint64_t seed_base) {
  std::vector<TrialResult> out;
  for (double rate : rates)
    for (std::size_t t = 0; t < trials; ++t)
      for (Arm a : arms) out.push_back(run_trial(ctx, a, kind, rate, t, seed_base + t));
  std::stable_sort(out.begin(), out.end(), [](const TrialResult& a, const TrialResult& b) {
    if (a.rate != b.rate) return a.rate < b.rate;
    if (a.trial != b.trial) return a.trial < b.trial;
    return a.arm < b.arm;
  });
  return out;
}

}  // namespace detail

/// Random bit errors with probability p per stored bit. ECC arms flip codeword bits.
template <Scalar T>
std::vector<TrialResult> run_rber(const ExperimentContext<T>& ctx, const std::vector<double>& rates, std::size_t trials,
                                  const std::vector<Arm>& arms, std::uint64_t seed_base) {
  return detail::run_grid(ctx, FaultKind::bit_flip, rates, trials, arms, seed_base);
}

/// Whole-weight errors with probability q per parameter. ECC cannot correct them, so the
/// usual arms are none and milr; ECC arms are accepted and show zero corrections.
template <Scalar T>
std::vector<TrialResult> run_whole_weight(const ExperimentContext<T>& ctx, const std::vector<double>& rates,
                                          std::size_t trials, const std::vector<Arm>& arms, std::uint64_t seed_base) {
  return detail::run_grid(ctx, FaultKind::whole_weight, rates, trials, arms, seed_base);
}

/// Largest |a - b| over a layer, divided by the layer's largest |b|.
template <Scalar T>
double layer_relative_error(const Tensor<T>& a, const Tensor<T>& b) {
  double diff = 0.0, mag = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    diff = std::isnan(d) ? INFINITY : std::max(diff, d);
    mag = std::max(mag, std::abs(static_cast<double>(b[i])));
  }
  return mag > 0.0 ? diff / mag : diff;
}

template <Scalar T>
constexpr double recovery_tolerance() {
  return std::is_same_v<T, float> ? 1e-6 : 1e-10;
}

struct WholeLayerRow {
  std::size_t layer = 0;
  LayerKind kind = LayerKind::input;
  SolveStrategy solve = SolveStrategy::direct;
  bool detected = false;
  /// "recovered", "degraded", "failed", or "N/A" for partially recoverable conv layers.
  std::string status;
  double relative_error = 0.0;
  double accuracy_corrupted = 0.0;
  double accuracy_recovered = 0.0;
  double normalized_corrupted = 0.0;
  double normalized_recovered = 0.0;
  double recover_s = 0.0;
};

/// Corrupts each parameterized layer in turn (bias layers separately), then detects and
/// recovers. A layer counts as recovered only if its parameters are back within tolerance.
template <Scalar T>
std::vector<WholeLayerRow> run_whole_layer(const ExperimentContext<T>& ctx, std::uint64_t seed) {
  std::vector<WholeLayerRow> rows;
  for (std::size_t layer : ctx.pristine.parameterized_layers()) {
    WholeLayerRow row;
    row.layer = layer;
    row.kind = ctx.pristine.kind(layer);
    const RecoveryRecord* rec = ctx.state.recovery_for(layer);
    if (rec) row.solve = rec->solve;
    Network<T> net = ctx.pristine;
    corrupt_layer(net, layer, derive_seed(seed, layer));
    row.accuracy_corrupted = evaluate(net, ctx.eval.data);
    const DetectionLog log = detect(net, ctx.state);
    row.detected = log.contains(layer);
    const auto t0 = std::chrono::steady_clock::now();
    const RecoveryReport rr = recover(net, ctx.state, log);
    row.recover_s = detail::seconds_since(t0);
    row.relative_error = layer_relative_error(net.params(layer), ctx.pristine.params(layer));
    row.accuracy_recovered = evaluate(net, ctx.eval.data);
    row.normalized_corrupted = row.accuracy_corrupted / ctx.eval.baseline;
    row.normalized_recovered = row.accuracy_recovered / ctx.eval.baseline;

    RecoveryStatus st = RecoveryStatus::failed;
    for (const auto& l : rr.layers)
      if (l.layer == layer) st = l.status;
    if (row.solve == SolveStrategy::partial_crc && st == RecoveryStatus::failed) {
      row.status = "N/A";
    } else if (st == RecoveryStatus::recovered && row.relative_error <= recovery_tolerance<T>()) {
      row.status = "recovered";
    } else {
      row.status = st == RecoveryStatus::recovered ? "degraded" : recovery_status_name(st);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Tukey box-plot summary: quartiles by linear interpolation, whiskers at the most extreme
/// samples within 1.5 IQR of the box.
struct BoxStats {
  std::size_t count = 0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double whisker_low = 0.0;
  double whisker_high = 0.0;
  std::vector<double> outliers;
};

inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline BoxStats box_stats(std::vector<double> v) {
  if (v.empty()) throw DomainError("box statistics of an empty sample");
  std::sort(v.begin(), v.end());
  BoxStats b;
  b.count = v.size();
  b.median = quantile_sorted(v, 0.5);
  b.q1 = quantile_sorted(v, 0.25);
  b.q3 = quantile_sorted(v, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.whisker_low = b.q1;
  b.whisker_high = b.q3;
  for (double x : v) {
    if (x < lo || x > hi) {
      b.outliers.push_back(x);
      continue;
    }
    b.whisker_low = std::min(b.whisker_low, x);
    b.whisker_high = std::max(b.whisker_high, x);
  }
  return b;
}

struct BoxRow {
  Arm arm = Arm::none;
  double rate = 0.0;
  BoxStats stats;
};

/// Box statistics of normalized accuracy per (arm, rate).
inline std::vector<BoxRow> summarize(const std::vector<TrialResult>& results) {
  std::vector<BoxRow> rows;
  std::vector<std::pair<Arm, double>> keys;
  for (const auto& r : results)
    if (std::find(keys.begin(), keys.end(), std::pair{r.arm, r.rate}) == keys.end()) keys.emplace_back(r.arm, r.rate);
  std::sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });
  for (const auto& [arm, rate] : keys) {
    std::vector<double> v;
    for (const auto& r : results)
      if (r.arm == arm && r.rate == rate) v.push_back(r.normalized_accuracy);
    rows.push_back({arm, rate, box_stats(std::move(v))});
  }
  return rows;
}

inline constexpr std::string_view kTrialCsvHeader =
    "arm,rate,trial,seed,flips,accuracy,normalized_accuracy,detected_all,recovered,failed,detect_s,recover_s";

inline std::string trial_csv_row(const TrialResult& r) {
  char buf[512];
  const char* det = r.detected_all ? (*r.detected_all ? "true" : "false") : "";
  std::snprintf(buf, sizeof buf, "%s,%.17g,%zu,%llu,%zu,%.17g,%.17g,%s,%zu,%zu,%.6f,%.6f", arm_name(r.arm), r.rate, r.trial,
                static_cast<unsigned long long>(r.seed), r.flips, r.accuracy, r.normalized_accuracy, det, r.recovered,
                r.failed, r.detect_s, r.recover_s);
  return buf;
}

inline void write_trials_csv(const std::vector<TrialResult>& results, std::ostream& out) {
  out << kTrialCsvHeader << "\n";
  for (const auto& r : results) out << trial_csv_row(r) << "\n";
}

inline void write_box_csv(const std::vector<BoxRow>& rows, std::ostream& out) {
  out << "arm,rate,count,median,q1,q3,whisker_low,whisker_high,outliers\n";
  for (const auto& b : rows) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%zu", arm_name(b.arm), b.rate, b.stats.count,
                  b.stats.median, b.stats.q1, b.stats.q3, b.stats.whisker_low, b.stats.whisker_high, b.stats.outliers.size());
    out << buf << "\n";
  }
}

/// Availability trade-off. A(n) is linear through (0, accuracy_clean) and
/// (errors_anchor, accuracy_anchor), clamped at 0.
struct AvailabilityParams {
  double detect_s = 0.0;       // T_d
  double detect_runs = 2.0;    // I
  double recover_s = 0.0;      // T_r
  double between_errors_s = 0.0;  // T_be
  double accuracy_clean = 1.0;
  double errors_anchor = 1.0;
  double accuracy_anchor = 1.0;

  double accuracy(double errors) const {
    const double a = accuracy_clean + (accuracy_anchor - accuracy_clean) * errors / errors_anchor;
    return std::max(a, 0.0);
  }
};

/// n(a): the tolerated error count at availability a, in the nested-fraction form.
inline double tolerated_errors(const AvailabilityParams& p, double a) {
  if (!(a > 0.0 && a < 1.0)) throw DomainError("availability must be in (0, 1), got " + std::to_string(a));
  const double cost = (p.detect_s * p.detect_runs + p.recover_s) / p.between_errors_s;
  return 1.0 / ((1.0 / a - 1.0) / cost);
}

inline std::vector<std::pair<double, double>> availability_curve(const AvailabilityParams& p, const std::vector<double>& grid) {
  if (!(p.detect_s > 0 && p.recover_s > 0 && p.between_errors_s > 0 && p.detect_runs > 0)) {
    throw DomainError("availability times and detection runs must be positive");
  }
  if (!(p.errors_anchor > 0)) throw DomainError("accuracy anchor error count must be positive");
  std::vector<std::pair<double, double>> out;
  for (double a : grid) out.emplace_back(a, p.accuracy(tolerated_errors(p, a)));
  return out;
}

struct StorageReport {
  std::size_t backup_bytes = 0;
  double ecc_bytes = 0.0;
  std::size_t milr_bytes = 0;
  double ecc_plus_milr_bytes = 0.0;
};

template <Scalar T>
StorageReport storage_report(const Network<T>& net, const MilrState& st) {
  StorageReport r;
  r.backup_bytes = net.total_param_count() * sizeof(T);
  r.ecc_bytes = ecc_overhead_bytes(net);
  r.milr_bytes = st.plan_cost_bytes();
  r.ecc_plus_milr_bytes = r.ecc_bytes + static_cast<double>(r.milr_bytes);
  return r;
}

}  // namespace milr
