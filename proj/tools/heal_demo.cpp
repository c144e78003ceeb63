// Corrupts one layer of a small CNN, then lets MILR find and rebuild it.

#include <cstdio>

#include "milr/milr.hpp"

int main() {
  using namespace milr;
  auto net = NetworkBuilder<float>({12, 12, 1}, 42).conv(3, 4).bias().relu().maxpool(2).flatten().dense(16).bias().relu().dense(10).bias().build();
  const Network<float> pristine = net;

  const MilrState state = initialize(net);
  std::printf("checkpoints:");
  for (auto id : state.checkpoint_ids) std::printf(" %zu", id);
  std::printf("   sidecar %zu bytes, parameters %zu bytes\n", state.plan_cost_bytes(), net.total_param_count() * sizeof(float));

  int misses = 0;
  for (std::size_t layer : net.parameterized_layers()) {
    Network<float> hit = pristine;
    corrupt_layer(hit, layer, 7 + layer);
    const auto [log, report] = detect_and_recover(hit, state);
    const auto& r = report.layers.at(0);
    std::printf("layer %2zu %-6s detected=%d  %-9s  bit-exact=%d\n", layer, layer_kind_name(net.kind(layer)), log.contains(layer) ? 1 : 0,
                recovery_status_name(r.status), hit == pristine ? 1 : 0);
    misses += hit != pristine;
  }
  return misses == 0 ? 0 : 1;
}
