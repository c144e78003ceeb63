// milr: command-line front end for MILR detection/recovery and the fault-injection experiments.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "milr/milr.hpp"

using json = nlohmann::json;

namespace {

struct Options {
  std::string network = "mnist";
  std::string dtype = "f32";
  std::uint64_t seed = 1;
  std::string weights;
  std::string sidecar;
  std::string precision = "wide";
  std::string out;
  std::string dataset;
  std::size_t samples = 200;
  std::size_t trials = 10;
  std::vector<double> rates;
  std::vector<std::string> arms;
  // inject
  std::string kind = "bit-flip";
  double rate = 0.0;
  std::size_t layer = 0;
  std::string report;
  std::string replay;
  // availability
  double detect_s = 0.010;
  double detect_runs = 2.0;
  double recover_s = 1.0;
  double between_errors_s = 3600.0;
  double accuracy_clean = 1.0;
  double errors_anchor = 100.0;
  double accuracy_anchor = 0.9;
  std::vector<double> grid;
};

milr::SidecarPrecision parse_precision(const std::string& s) {
  if (s == "wide") return milr::SidecarPrecision::wide;
  if (s == "compact") return milr::SidecarPrecision::compact;
  throw milr::DomainError("unknown sidecar precision '" + s + "' (wide, compact)");
}

/// Built-in config (random weights from --seed) or a weights file. --weights replaces the
/// parameters and must match the chosen architecture.
template <milr::Scalar T>
milr::Network<T> load_network(const Options& o) {
  std::optional<milr::Network<T>> net;
  if (milr::is_builtin_config(o.network)) {
    net = milr::builtin_network<T>(o.network, o.seed);
  } else {
    net = milr::load_weights_as<T>(o.network);
  }
  if (!o.weights.empty()) {
    auto trained = milr::load_weights_as<T>(o.weights);
    if (trained.size() != net->size()) throw milr::ShapeError("--weights does not match the --network architecture");
    for (std::size_t i = 0; i < net->size(); ++i)
      if (trained.kind(i) != net->kind(i) || trained.output_shape(i) != net->output_shape(i)) {
        throw milr::ShapeError("--weights layer " + std::to_string(i) + " does not match the --network architecture");
      }
    net = std::move(trained);
  }
  return *net;
}

template <milr::Scalar T>
milr::MilrState load_or_init_state(const Options& o, const milr::Network<T>& net) {
  if (!o.sidecar.empty()) return milr::load_sidecar(o.sidecar);
  milr::PlanOptions po;
  po.seed = o.seed;
  po.precision = parse_precision(o.precision);
  return milr::initialize(net, po);
}

template <milr::Scalar T>
milr::Dataset<T> load_dataset(const Options& o, const milr::Network<T>& net) {
  const milr::Shape& in = net.input_shape(0);
  if (o.dataset.empty()) return milr::self_labeled_dataset(net, o.samples, milr::derive_seed(o.seed, 0x5A));
  milr::Dataset<T> d;
  if (in == milr::Shape{28, 28, 1}) {
    d = milr::load_mnist_dir<T>(o.dataset);
  } else if (in == milr::Shape{32, 32, 3}) {
    d = milr::load_cifar_dir<T>(o.dataset);
  } else {
    throw milr::ShapeError("no dataset loader for input shape " + milr::shape_string(in));
  }
  return d.take(o.samples);
}

void emit(const Options& o, const std::string& text) {
  if (o.out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(o.out);
  if (!f) throw milr::FormatError("cannot write " + o.out);
  f << text;
}

bool wants_json(const Options& o) { return o.out.size() >= 5 && o.out.substr(o.out.size() - 5) == ".json"; }

json log_json(const milr::DetectionLog& log) {
  json j = json::array();
  for (const auto& e : log.entries) {
    j.push_back({{"layer", e.layer},
                 {"checkpoint_before", e.checkpoint_before},
                 {"checkpoint_after", e.checkpoint_after},
                 {"partial_mismatch", e.partial_mismatch},
                 {"crc_flagged", e.crc_flagged.size()}});
  }
  return j;
}

json report_json(const milr::RecoveryReport& rep) {
  json j = json::array();
  for (const auto& l : rep.layers) {
    j.push_back({{"layer", l.layer},
                 {"status", milr::recovery_status_name(l.status)},
                 {"params_written", l.params_written},
                 {"least_squares_fallback", l.least_squares_fallback},
                 {"shared_bracket", l.shared_bracket},
                 {"detail", l.detail}});
  }
  return j;
}

template <milr::Scalar T>
int cmd_init(const Options& o) {
  const auto net = load_network<T>(o);
  milr::PlanOptions po;
  po.seed = o.seed;
  po.precision = parse_precision(o.precision);
  const auto st = milr::initialize(net, po);
  if (o.out.empty()) throw milr::DomainError("init needs --out <sidecar path>");
  milr::save_sidecar(st, o.out);
  std::cout << "checkpoints:";
  for (auto id : st.checkpoint_ids) std::cout << " " << id;
  std::cout << "\n";
  for (const auto& r : st.recovery) {
    std::printf("layer %2zu %-8s backward=%-13s solve=%s\n", r.layer, milr::layer_kind_name(r.kind),
                milr::backward_strategy_name(r.backward), milr::solve_strategy_name(r.solve));
  }
  std::printf("sidecar bytes: %zu\n", st.plan_cost_bytes());
  return 0;
}

template <milr::Scalar T>
int cmd_detect(const Options& o) {
  const auto net = load_network<T>(o);
  const auto st = load_or_init_state(o, net);
  const auto log = milr::detect(net, st);
  emit(o, json{{"erroneous_layers", log_json(log)}}.dump(2) + "\n");
  return 0;
}

template <milr::Scalar T>
int cmd_recover(const Options& o) {
  auto net = load_network<T>(o);
  if (o.sidecar.empty()) throw milr::DomainError("recover needs the --sidecar written by init for the pristine network");
  const auto st = milr::load_sidecar(o.sidecar);
  const auto [log, rep] = milr::detect_and_recover(net, st);
  std::cout << json{{"erroneous_layers", log_json(log)}, {"recovery", report_json(rep)}}.dump(2) << "\n";
  if (!o.out.empty()) milr::save_weights(net, o.out);
  return rep.all_recovered() ? 0 : 3;
}

milr::FaultKind parse_kind(const std::string& s) {
  if (s == "bit-flip") return milr::FaultKind::bit_flip;
  if (s == "whole-weight") return milr::FaultKind::whole_weight;
  if (s == "whole-layer") return milr::FaultKind::whole_layer;
  throw milr::DomainError("unknown fault kind '" + s + "' (bit-flip, whole-weight, whole-layer)");
}

template <milr::Scalar T>
int cmd_inject(const Options& o) {
  auto net = load_network<T>(o);
  if (o.out.empty()) throw milr::DomainError("inject needs --out <weights path>");
  milr::InjectionReport rep;
  if (!o.replay.empty()) {
    std::ifstream in(o.replay);
    if (!in) throw milr::FormatError("cannot open " + o.replay);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw milr::FormatError(std::string("malformed injection report: ") + e.what());
      }
      rep = milr::report_from_json(j);
      milr::replay(net, rep);
    }
  } else {
    rep = milr::inject(net, milr::FaultSpec{parse_kind(o.kind), o.rate, o.layer, o.seed});
  }
  milr::save_weights(net, o.out);
  if (!o.report.empty()) {
    std::ofstream f(o.report, std::ios::app);
    if (!f) throw milr::FormatError("cannot write " + o.report);
    f << milr::report_to_jsonl(rep);
  }
  std::printf("%s: %zu flips, layers:", milr::fault_kind_name(rep.kind), rep.kind == milr::FaultKind::whole_layer ? rep.replaced : rep.flip_count());
  for (auto l : rep.layers()) std::printf(" %zu", l);
  std::printf("\n");
  return 0;
}

template <milr::Scalar T>
int cmd_predict(const Options& o) {
  const auto net = load_network<T>(o);
  const auto data = load_dataset(o, net);
  const double acc = milr::evaluate(net, data);
  std::printf("samples %zu accuracy %.6f\n", data.size(), acc);
  return 0;
}

std::vector<milr::Arm> parse_arms(const Options& o, std::vector<milr::Arm> fallback) {
  if (o.arms.empty()) return fallback;
  std::vector<milr::Arm> arms;
  for (const auto& a : o.arms) arms.push_back(milr::parse_arm(a));
  return arms;
}

template <milr::Scalar T>
int cmd_experiment(const Options& o, const std::string& which) {
  const auto net = load_network<T>(o);
  const auto st = load_or_init_state(o, net);
  const auto eval = milr::make_evaluation(net, load_dataset(o, net));
  const milr::ExperimentContext<T> ctx{net, st, eval};
  std::ostringstream out;
  if (which == "whole-layer") {
    const auto rows = milr::run_whole_layer(ctx, o.seed);
    out << "layer,type,solve,detected,status,relative_error,accuracy_corrupted,accuracy_recovered,"
           "normalized_corrupted,normalized_recovered,recover_s\n";
    for (const auto& r : rows) {
      char buf[512];
      std::snprintf(buf, sizeof buf, "%zu,%s,%s,%s,%s,%.3e,%.6f,%.6f,%.6f,%.6f,%.3f", r.layer, milr::layer_kind_name(r.kind),
                    milr::solve_strategy_name(r.solve), r.detected ? "true" : "false", r.status.c_str(), r.relative_error,
                    r.accuracy_corrupted, r.accuracy_recovered, r.normalized_corrupted, r.normalized_recovered, r.recover_s);
      out << buf << "\n";
    }
    emit(o, out.str());
    return 0;
  }
  const auto rates = o.rates.empty() ? std::vector<double>{0.0, 1e-6, 1e-5} : o.rates;
  std::vector<milr::TrialResult> results;
  if (which == "rber") {
    results = milr::run_rber(ctx, rates, o.trials, parse_arms(o, {milr::Arm::none, milr::Arm::ecc, milr::Arm::milr, milr::Arm::ecc_milr}), o.seed);
  } else {
    results = milr::run_whole_weight(ctx, rates, o.trials, parse_arms(o, {milr::Arm::none, milr::Arm::milr}), o.seed);
  }
  if (wants_json(o)) {
    json j = json::array();
    for (const auto& r : results) {
      j.push_back({{"arm", milr::arm_name(r.arm)}, {"rate", r.rate}, {"trial", r.trial}, {"seed", r.seed},
                   {"flips", r.flips}, {"accuracy", r.accuracy}, {"normalized_accuracy", r.normalized_accuracy},
                   {"detected_all", r.detected_all ? json(*r.detected_all) : json(nullptr)}, {"recovered", r.recovered},
                   {"failed", r.failed}, {"detect_s", r.detect_s}, {"recover_s", r.recover_s}});
    }
    emit(o, j.dump(2) + "\n");
  } else {
    milr::write_trials_csv(results, out);
    emit(o, out.str());
  }
  std::ostringstream box;
  milr::write_box_csv(milr::summarize(results), box);
  std::cerr << box.str();
  return 0;
}

int cmd_availability(const Options& o) {
  milr::AvailabilityParams p;
  p.detect_s = o.detect_s;
  p.detect_runs = o.detect_runs;
  p.recover_s = o.recover_s;
  p.between_errors_s = o.between_errors_s;
  p.accuracy_clean = o.accuracy_clean;
  p.errors_anchor = o.errors_anchor;
  p.accuracy_anchor = o.accuracy_anchor;
  std::vector<double> grid = o.grid;
  if (grid.empty())
    for (double a : {0.9, 0.99, 0.999, 0.9999, 0.99999, 0.999999}) grid.push_back(a);
  std::ostringstream out;
  out << "availability,tolerated_errors,min_accuracy\n";
  for (const auto& [a, acc] : milr::availability_curve(p, grid)) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g", a, milr::tolerated_errors(p, a), acc);
    out << buf << "\n";
  }
  emit(o, out.str());
  return 0;
}

template <milr::Scalar T>
int cmd_storage(const Options& o) {
  const auto net = load_network<T>(o);
  std::ostringstream out;
  out << "precision,backup_bytes,ecc_bytes,milr_bytes,ecc_plus_milr_bytes\n";
  for (const char* prec : {"compact", "wide"}) {
    milr::PlanOptions po;
    po.seed = o.seed;
    po.precision = parse_precision(prec);
    const auto r = milr::storage_report(net, milr::initialize(net, po));
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.2f,%zu,%.2f", prec, r.backup_bytes, r.ecc_bytes, r.milr_bytes, r.ecc_plus_milr_bytes);
    out << buf << "\n";
  }
  emit(o, out.str());
  return 0;
}

template <class F>
int with_dtype(const Options& o, F&& f) {
  if (o.dtype == "f32") return f(float{});
  if (o.dtype == "f64") return f(double{});
  throw milr::DomainError("unknown dtype '" + o.dtype + "' (f32, f64)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MILR: algebraic self-healing for CNN parameters"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--network", o.network, "mnist, cifar-small, cifar-large, or a weights file");
    c->add_option("--dtype", o.dtype, "f32 or f64");
    c->add_option("--seed", o.seed, "Seed for random weights, MILR data and injections");
    c->add_option("--weights", o.weights, "Trained weights file for the chosen architecture");
    c->add_option("--out", o.out, "Output path (.csv or .json where applicable)");
  };
  auto state_opts = [&](CLI::App* c) {
    c->add_option("--sidecar", o.sidecar, "MILR sidecar written by init");
    c->add_option("--sidecar-precision", o.precision, "wide (f64 payloads) or compact (network dtype)");
  };
  auto data_opts = [&](CLI::App* c) {
    c->add_option("--dataset", o.dataset, "Directory with the MNIST IDX or CIFAR-10 binary test files");
    c->add_option("--samples", o.samples, "Evaluation samples (0 = all)");
  };

  auto* init = app.add_subcommand("init", "Build the MILR sidecar for a network");
  common(init);
  init->add_option("--sidecar-precision", o.precision, "wide (f64 payloads) or compact (network dtype)");

  auto* detect = app.add_subcommand("detect", "List layers whose parameters changed");
  common(detect);
  state_opts(detect);

  auto* recover = app.add_subcommand("recover", "Detect and heal erroneous layers");
  common(recover);
  recover->add_option("--sidecar", o.sidecar, "MILR sidecar written by init")->required();

  auto* inject = app.add_subcommand("inject", "Inject faults into a network and write the result");
  common(inject);
  inject->add_option("--kind", o.kind, "bit-flip, whole-weight or whole-layer");
  inject->add_option("--rate", o.rate, "Bit or whole-weight error probability");
  inject->add_option("--layer", o.layer, "Layer for whole-layer corruption");
  inject->add_option("--report", o.report, "Append the injection report as a JSON line");
  inject->add_option("--replay", o.replay, "Re-apply (undo) flips from a JSON-lines report");

  auto* predict = app.add_subcommand("predict", "Classification accuracy");
  common(predict);
  data_opts(predict);

  auto* experiment = app.add_subcommand("experiment", "Fault-injection experiments");
  experiment->require_subcommand(1);
  for (const char* name : {"rber", "whole-weight", "whole-layer"}) {
    auto* e = experiment->add_subcommand(name);
    common(e);
    state_opts(e);
    data_opts(e);
    e->add_option("--trials", o.trials, "Trials per rate");
    e->add_option("--rates", o.rates, "Error rates")->delimiter(',');
    e->add_option("--arms", o.arms, "none, ecc, milr, ecc+milr")->delimiter(',');
  }

  auto* avail = app.add_subcommand("availability", "Minimum accuracy versus required availability");
  avail->add_option("--out", o.out, "CSV output path");
  avail->add_option("--detect-s", o.detect_s, "Detection time T_d (s)");
  avail->add_option("--detect-runs", o.detect_runs, "Detection runs between errors I");
  avail->add_option("--recover-s", o.recover_s, "Recovery time T_r (s)");
  avail->add_option("--between-errors-s", o.between_errors_s, "Time between errors T_be (s)");
  avail->add_option("--accuracy-clean", o.accuracy_clean, "Accuracy with zero errors");
  avail->add_option("--errors-anchor", o.errors_anchor, "Error count of the second accuracy anchor");
  avail->add_option("--accuracy-anchor", o.accuracy_anchor, "Accuracy at the second anchor");
  avail->add_option("--grid", o.grid, "Availability values in (0,1)")->delimiter(',');

  auto* storage = app.add_subcommand("storage-report", "Backup, ECC and MILR storage in bytes");
  common(storage);

  CLI11_PARSE(app, argc, argv);

  try {
    if (init->parsed()) return with_dtype(o, [&]<class T>(T) { return cmd_init<T>(o); });
    if (detect->parsed()) return with_dtype(o, [&]<class T>(T) { return cmd_detect<T>(o); });
    if (recover->parsed()) return with_dtype(o, [&]<class T>(T) { return cmd_recover<T>(o); });
    if (inject->parsed()) return with_dtype(o, [&]<class T>(T) { return cmd_inject<T>(o); });
    if (predict->parsed()) return with_dtype(o, [&]<class T>(T) { return cmd_predict<T>(o); });
    if (avail->parsed()) return cmd_availability(o);
    if (storage->parsed()) return with_dtype(o, [&]<class T>(T) { return cmd_storage<T>(o); });
    for (auto* e : experiment->get_subcommands()) {
      const std::string name = e->get_name();
      return with_dtype(o, [&]<class T>(T) { return cmd_experiment<T>(o, name); });
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
