#include <cstdio>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "milr/configs.hpp"
#include "milr/weights_io.hpp"

using namespace milr;

namespace {

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / ("milr_test_" + name); }

Network<double> identity_dense(std::size_t n) {
  Tensor<double> w({n, n});
  for (std::size_t i = 0; i < n; ++i) w.at(i, i) = 1.0;
  return Network<double>({InputLayer{{n}}, DenseLayer<double>{w}, BiasLayer<double>{Tensor<double>({n}), BiasAttach::dense}});
}

}  // namespace

TEST(Shapes, MnistChain) {
  const auto net = mnist_network<float>(1);
  std::vector<Shape> outputs;
  for (std::size_t i = 0; i < net.size(); ++i)
    if (net.kind(i) == LayerKind::conv2d || net.kind(i) == LayerKind::dense || net.kind(i) == LayerKind::maxpool) outputs.push_back(net.output_shape(i));
  const std::vector<Shape> expected{{26, 26, 32}, {24, 24, 32}, {12, 12, 32}, {10, 10, 64}, {256}, {10}};
  EXPECT_EQ(outputs, expected);
}

TEST(Shapes, MnistParameterCounts) {
  const auto rows = architecture_table(mnist_network<float>(1));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].trainable, 3u * 3 * 1 * 32 + 32);
  EXPECT_EQ(rows[3].trainable, 3u * 3 * 32 * 64 + 64);
  EXPECT_EQ(rows[4].trainable, 10u * 10 * 64 * 256 + 256);
  EXPECT_EQ(mnist_network<float>(1).total_param_count(), 1669290u);
}

TEST(Shapes, BrokenChainIsRejected) {
  std::vector<LayerSpec<float>> layers{InputLayer{{4}}, DenseLayer<float>{Tensor<float>({5, 2})}};
  EXPECT_THROW(Network<float>{layers}, Error);
  std::vector<LayerSpec<float>> conv{InputLayer{{6, 6, 2}}, Conv2DLayer<float>{Tensor<float>({3, 3, 1, 4}), 1, Padding::valid}};
  EXPECT_THROW(Network<float>{conv}, Error);
}

TEST(Forward, IdentityDense) {
  const auto net = identity_dense(4);
  Tensor<double> x({4}, {1, -2, 3, -4});
  EXPECT_EQ(forward(net, x), x);
}

TEST(Forward, Relu) {
  Network<float> net({InputLayer{{3}}, ReluLayer{}});
  EXPECT_EQ(forward(net, Tensor<float>({3}, {-1, 0, 2})), Tensor<float>({3}, {0, 0, 2}));
}

TEST(Forward, MaxPool) {
  Network<float> net({InputLayer{{2, 2, 1}}, MaxPoolLayer{2}});
  EXPECT_EQ(forward(net, Tensor<float>({2, 2, 1}, {1, 2, 3, 4})), Tensor<float>({1, 1, 1}, {4}));
}

TEST(Forward, MaxPoolDropsRemainder) {
  Network<float> net({InputLayer{{5, 5, 1}}, MaxPoolLayer{2}});
  EXPECT_EQ(net.output_shape(1), (Shape{2, 2, 1}));
}

TEST(Forward, CompositionSplitsAnywhere) {
  const auto net = mnist_network<float>(2);
  Rng rng(3);
  const auto x = Tensor<float>::random({28, 28, 1}, rng);
  const auto full = forward(net, x);
  for (std::size_t k : {1u, 4u, 7u, 11u, 15u}) EXPECT_EQ(forward(net, forward(net, x, 0, k), k), full) << k;
}

TEST(Forward, NanParametersDoNotTrap) {
  auto net = identity_dense(3);
  net.param_data(1)[0] = NAN;
  const auto y = forward(net, Tensor<double>({3}, {1, 1, 1}));
  EXPECT_TRUE(std::isnan(y[0]));
  EXPECT_EQ(argmax(y), 1u);
}

TEST(Accuracy, DeterministicAndSelfConsistent) {
  const auto net = NetworkBuilder<float>({6, 6, 1}, 4).conv(3, 2).bias().relu().flatten().dense(10).build();
  Rng rng(5);
  std::vector<Tensor<float>> xs;
  std::vector<std::uint8_t> self;
  for (int i = 0; i < 50; ++i) {
    xs.push_back(Tensor<float>::random({6, 6, 1}, rng));
    self.push_back(static_cast<std::uint8_t>(predict_class(net, xs.back())));
  }
  EXPECT_EQ(classify_accuracy<float>(net, xs, self), 1.0);
  EXPECT_EQ(classify_accuracy<float>(net, xs, self), classify_accuracy<float>(net, xs, self));
}

TEST(Accuracy, RandomLabelsNearChance) {
  const auto net = NetworkBuilder<float>({4, 4, 1}, 8).flatten().dense(10).build();
  Rng rng(6);
  std::vector<Tensor<float>> xs;
  std::vector<std::uint8_t> labels;
  for (int i = 0; i < 1000; ++i) {
    xs.push_back(Tensor<float>::random({4, 4, 1}, rng));
    labels.push_back(static_cast<std::uint8_t>(rng.next_below(10)));
  }
  const double acc = classify_accuracy<float>(net, xs, labels);
  EXPECT_GE(acc, 0.05);
  EXPECT_LE(acc, 0.15);
}

TEST(Accuracy, TieGoesToLowestIndex) { EXPECT_EQ(argmax(Tensor<float>({4}, {1, 3, 3, 2})), 1u); }

TEST(WeightsFile, RoundTripIsBitExact) {
  const auto net = mnist_network<float>(9);
  const auto path = temp_file("mnist.wgt");
  save_weights(net, path);
  const auto back = load_weights(path);
  ASSERT_TRUE(std::holds_alternative<Network<float>>(back));
  EXPECT_EQ(std::get<Network<float>>(back), net);
  std::filesystem::remove(path);
}

TEST(WeightsFile, F64KeepsDtype) {
  const auto net = cifar_small_network<double>(3);
  const auto back = decode_weights(ByteReader(encode_weights(net), "buffer"));
  ASSERT_TRUE(std::holds_alternative<Network<double>>(back));
  EXPECT_EQ(std::get<Network<double>>(back), net);
}

TEST(WeightsFile, StrideAndPaddingSurvive) {
  const auto net = NetworkBuilder<float>({9, 9, 2}, 1).conv(3, 3, Padding::valid, 2).bias().conv(3, 2, Padding::same).maxpool(2).flatten().dense(3).build();
  const auto back = std::get<Network<float>>(decode_weights(ByteReader(encode_weights(net), "buffer")));
  EXPECT_EQ(back, net);
  EXPECT_EQ(std::get<Conv2DLayer<float>>(back.layer(1)).stride, 2u);
  EXPECT_EQ(std::get<Conv2DLayer<float>>(back.layer(3)).padding, Padding::same);
}

TEST(WeightsFile, TruncationIsAnError) {
  auto bytes = encode_weights(mnist_network<float>(1));
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{20}, std::size_t{3}}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_weights(ByteReader(part, "cut")), FormatError) << cut;
  }
}

TEST(WeightsFile, BadMagicAndVersion) {
  auto bytes = encode_weights(identity_dense(2));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_weights(ByteReader(bad, "magic")), FormatError);
  bad = bytes;
  bad[8] = 7;
  EXPECT_THROW(decode_weights(ByteReader(bad, "version")), FormatError);
  bytes.push_back(0);
  EXPECT_THROW(decode_weights(ByteReader(bytes, "trailing")), FormatError);
}

TEST(WeightsFile, MissingFile) { EXPECT_THROW(load_weights("/nonexistent/milr.wgt"), FormatError); }
