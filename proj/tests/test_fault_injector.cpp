#include <cmath>
#include <cstring>
#include <set>

#include <gtest/gtest.h>

#include "milr/configs.hpp"
#include "milr/fault_injector.hpp"

using namespace milr;

namespace {

Network<float> small_net() { return NetworkBuilder<float>({6, 6, 2}, 3).conv(3, 4).bias().relu().flatten().dense(5).bias().build(); }

std::size_t differing_bits(const Network<float>& a, const Network<float>& b) {
  std::size_t n = 0;
  for (std::size_t layer : a.parameterized_layers())
    for (std::size_t i = 0; i < a.param_count(layer); ++i) {
      std::uint32_t x, y;
      std::memcpy(&x, &a.params(layer)[i], 4);
      std::memcpy(&y, &b.params(layer)[i], 4);
      n += static_cast<std::size_t>(std::popcount(x ^ y));
    }
  return n;
}

}  // namespace

TEST(Injector, ZeroRateChangesNothing) {
  auto net = small_net();
  const auto before = net;
  EXPECT_EQ(inject_bitflips(net, 0.0, 1).flip_count(), 0u);
  EXPECT_EQ(inject_whole_weight(net, 0.0, 1).flip_count(), 0u);
  EXPECT_EQ(net, before);
}

TEST(Injector, RateOneTwiceRestores) {
  auto net = small_net();
  const auto before = net;
  const auto rep = inject_bitflips(net, 1.0, 1);
  EXPECT_EQ(rep.flip_count(), before.total_param_count() * 32);
  EXPECT_EQ(differing_bits(net, before), before.total_param_count() * 32);
  inject_bitflips(net, 1.0, 2);
  EXPECT_EQ(net, before);
}

TEST(Injector, FlipCountIsBinomial) {
  auto net = mnist_network<float>(1);
  const double n = static_cast<double>(net.total_param_count()) * 32, p = 1e-5;
  const double mean = n * p, sigma = std::sqrt(n * p * (1 - p));
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto copy = net;
    const auto rep = inject_bitflips(copy, p, seed);
    EXPECT_LT(std::abs(static_cast<double>(rep.flip_count()) - mean), 4 * sigma) << seed;
    EXPECT_EQ(differing_bits(copy, net), rep.flip_count());
  }
}

TEST(Injector, FlipsLandInProportionToLayerSize) {
  auto net = mnist_network<float>(1);
  const auto rep = inject_bitflips(net, 1e-4, 9);
  std::size_t dense1 = 0;
  for (const auto& f : rep.flips) dense1 += f.layer == 12;
  const double share = static_cast<double>(dense1) / static_cast<double>(rep.flip_count());
  EXPECT_NEAR(share, 1638400.0 / 1669290.0, 0.01);
}

TEST(Injector, SameSeedSameFlips) {
  auto a = small_net(), b = small_net();
  EXPECT_EQ(inject_bitflips(a, 0.01, 5).flips, inject_bitflips(b, 0.01, 5).flips);
  EXPECT_EQ(a, b);
  auto c = small_net();
  EXPECT_NE(inject_bitflips(c, 0.01, 6).flips, inject_bitflips(a, 0.01, 5).flips);
}

TEST(Injector, WholeWeightFlipsExactly32Bits) {
  auto net = small_net();
  const auto before = net;
  const auto rep = inject_whole_weight(net, 0.05, 4);
  ASSERT_GT(rep.flip_count(), 0u);
  EXPECT_EQ(differing_bits(net, before), 32 * rep.flip_count());
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& f : rep.flips) {
    EXPECT_EQ(f.bit, kAllBits);
    EXPECT_TRUE(seen.insert({f.layer, f.index}).second);
  }
}

TEST(Injector, RejectsBadRates) {
  auto net = small_net();
  EXPECT_THROW(inject_bitflips(net, -0.1, 1), DomainError);
  EXPECT_THROW(inject_whole_weight(net, 1.5, 1), DomainError);
  EXPECT_THROW(inject_bitflips(net, NAN, 1), DomainError);
}

TEST(Injector, CorruptLayerChangesEveryValueDeterministically) {
  auto a = small_net(), b = small_net();
  const auto before = a;
  const auto rep = corrupt_layer(a, 1, 11);
  corrupt_layer(b, 1, 11);
  EXPECT_EQ(a, b);
  EXPECT_EQ(rep.replaced, before.param_count(1));
  for (std::size_t i = 0; i < before.param_count(1); ++i) {
    EXPECT_NE(a.params(1)[i], before.params(1)[i]);
    EXPECT_GE(a.params(1)[i], -1.0f);
    EXPECT_LT(a.params(1)[i], 1.0f);
  }
  EXPECT_EQ(a.params(2), before.params(2));
  EXPECT_THROW(corrupt_layer(a, 3, 1), DomainError);
}

TEST(Injector, ReplayUndoes) {
  auto net = small_net();
  const auto before = net;
  const auto rep = inject_bitflips(net, 0.02, 8);
  replay(net, rep);
  EXPECT_EQ(net, before);
  const auto ww = inject_whole_weight(net, 0.1, 8);
  replay(net, ww);
  EXPECT_EQ(net, before);
  EXPECT_THROW(replay(net, corrupt_layer(net, 1, 1)), DomainError);
}

TEST(Injector, CodewordFlipsReplayOnEccMemory) {
  auto net = small_net();
  auto ecc = ecc_encode(net);
  const auto before_net = net;
  const auto before_check = ecc.check;
  const auto rep = inject_bitflips(net, ecc, 0.05, 3);
  ASSERT_GT(rep.flip_count(), 0u);
  EXPECT_EQ(rep.target, FlipTarget::codeword);
  replay(net, rep, &ecc);
  EXPECT_EQ(net, before_net);
  EXPECT_EQ(ecc.check, before_check);
  EXPECT_THROW(replay(net, rep), DomainError);
}

TEST(Injector, JsonRoundTrip) {
  auto net = small_net();
  for (const auto& rep : {inject_bitflips(net, 0.01, 1), inject_whole_weight(net, 0.05, 2), corrupt_layer(net, 5, 3)}) {
    const auto back = report_from_json(nlohmann::json::parse(report_to_jsonl(rep)));
    EXPECT_EQ(back.kind, rep.kind);
    EXPECT_EQ(back.target, rep.target);
    EXPECT_EQ(back.rate, rep.rate);
    EXPECT_EQ(back.seed, rep.seed);
    EXPECT_EQ(back.flips, rep.flips);
    EXPECT_EQ(back.layer, rep.layer);
    EXPECT_EQ(back.replaced, rep.replaced);
  }
  EXPECT_THROW(report_from_json(nlohmann::json::parse(R"({"kind":"bit-flip"})")), FormatError);
  EXPECT_THROW(report_from_json(nlohmann::json::parse(R"({"kind":"cosmic","target":"parameter","rate":0,"seed":1,"flips":[]})")), FormatError);
}

TEST(Injector, F64FlipsUse64BitPositions) {
  auto net = small_net().cast<double>();
  const auto rep = inject_bitflips(net, 1.0, 1);
  EXPECT_EQ(rep.flip_count(), net.total_param_count() * 64);
}
