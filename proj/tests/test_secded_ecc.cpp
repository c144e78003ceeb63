#include <bit>
#include <cstring>

#include <gtest/gtest.h>

#include "milr/configs.hpp"
#include "milr/fault_injector.hpp"
#include "milr/secded.hpp"

using namespace milr;

namespace {

const std::uint32_t kWords[] = {0u, 1u, 0xFFFFFFFFu, 0xDEADBEEFu, 0x3F800000u, 0x80000000u, 0x12345678u};

}  // namespace

TEST(Secded, ZeroEncodesToZero) { EXPECT_EQ(secded_encode(0), 0u); }

TEST(Secded, CleanWordsDecodeClean) {
  for (std::uint32_t w : kWords) {
    const auto r = secded_decode(secded_encode(w));
    EXPECT_EQ(r.status, SecdedStatus::clean);
    EXPECT_EQ(r.word, w);
  }
}

TEST(Secded, EverySingleFlipIsCorrected) {
  for (std::uint32_t w : kWords)
    for (int b = 0; b < kCodewordBits; ++b) {
      const auto r = secded_decode(secded_encode(w) ^ (SecdedCodeword{1} << b));
      EXPECT_EQ(r.status, SecdedStatus::corrected) << b;
      EXPECT_EQ(r.word, w) << b;
    }
}

TEST(Secded, EveryDoubleFlipIsDetected) {
  for (std::uint32_t w : kWords)
    for (int a = 0; a < kCodewordBits; ++a)
      for (int b = a + 1; b < kCodewordBits; ++b) {
        const auto r = secded_decode(secded_encode(w) ^ (SecdedCodeword{1} << a) ^ (SecdedCodeword{1} << b));
        EXPECT_EQ(r.status, SecdedStatus::detected_uncorrectable) << a << "," << b;
      }
}

TEST(Secded, MinimumDistanceIsFour) {
  // linear code: min distance = min weight of a nonzero codeword; sample all single and double data bits.
  int best = 64;
  for (int a = 0; a < 32; ++a)
    for (int b = a; b < 32; ++b) {
      const std::uint32_t w = (1u << a) | (1u << b);
      best = std::min(best, std::popcount(secded_encode(w)));
    }
  EXPECT_EQ(best, 4);
  EXPECT_LT(secded_encode(0xFFFFFFFFu) >> kCodewordBits, 1u);
}

TEST(Secded, AssembleSplitsCheckBits) {
  for (std::uint32_t w : kWords) {
    const auto cw = secded_encode(w);
    EXPECT_EQ(secded_assemble(w, secded_check_bits(cw)), cw);
    EXPECT_LT(secded_check_bits(cw), 128u);
  }
}

TEST(Ecc, ScrubCorrectsOneBitPerWordAndIsIdempotent) {
  const auto pristine = NetworkBuilder<float>({6, 6, 1}, 2).conv(3, 4).bias().flatten().dense(5).build();
  auto net = pristine;
  auto ecc = ecc_encode(net);
  // one flip in every parameter
  for (std::size_t layer : net.parameterized_layers())
    for (std::size_t i = 0; i < net.param_count(layer); ++i) {
      std::uint32_t u;
      std::memcpy(&u, &net.param_data(layer)[i], 4);
      u ^= 1u << ((i * 7 + layer) % 32);
      std::memcpy(&net.param_data(layer)[i], &u, 4);
    }
  const auto first = scrub(net, ecc);
  EXPECT_EQ(first.corrected(), pristine.total_param_count());
  EXPECT_EQ(first.uncorrectable(), 0u);
  EXPECT_EQ(net, pristine);
  const auto second = scrub(net, ecc);
  EXPECT_EQ(second.corrected(), 0u);
  EXPECT_EQ(net, pristine);
}

TEST(Ecc, WholeWeightFlipIsNotCorrected) {
  auto net = NetworkBuilder<float>({4}, 1).dense(3).build();
  auto ecc = ecc_encode(net);
  const float before = net.params(1)[2];
  flip_whole_weight_at(net, 1, 2);
  const auto rep = scrub(net, ecc);
  // 32 flipped data bits: even weight with syndrome 24, so detected but not correctable
  EXPECT_EQ(rep.uncorrectable(), 1u);
  EXPECT_EQ(rep.corrected(), 0u);
  EXPECT_NE(std::bit_cast<std::uint32_t>(net.params(1)[2]), std::bit_cast<std::uint32_t>(before));
}

TEST(Ecc, F64UsesTwoWordsPerParameter) {
  const auto net = NetworkBuilder<double>({4}, 1).dense(3).bias().build();
  EXPECT_EQ(ecc_encode(net).word_count(), 2u * 15);
}

TEST(Ecc, OverheadIsSevenThirtySecondsOfParameterBytes) {
  const auto net = mnist_network<float>(1);
  EXPECT_DOUBLE_EQ(ecc_overhead_bytes(net), 1669290.0 * 4 * 7 / 32);
  EXPECT_EQ(ecc_encode(net).word_count(), 1669290u);
}

TEST(Ecc, CodewordInjectionAtRateOneIsUncorrectable) {
  auto net = NetworkBuilder<float>({4}, 1).dense(2).build();
  auto ecc = ecc_encode(net);
  const auto rep = inject_bitflips(net, ecc, 1.0, 3);
  EXPECT_EQ(rep.flip_count(), 8u * kCodewordBits);
  // all 39 bits flipped: syndrome 39 is nonzero, so no word decodes as clean
  const auto s = scrub(net, ecc);
  EXPECT_EQ(s.corrected() + s.uncorrectable(), 8u);
}
