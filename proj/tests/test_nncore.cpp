#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "fmtd/serialize.hpp"
#include "fmtd/train.hpp"
#include "oracles.hpp"

using namespace fmtd;

namespace {

ArchitectureSpec fc_arch(std::size_t in, std::size_t classes) {
  return ArchitectureSpec({1, 1, in}, {Softmax{classes}});
}

ModelParams<double> identity_fc2() {
  auto m = init_model<double>(fc_arch(2, 2), 0);
  m.tensors[0].tensor = Tensor<double>({2, 2}, {1, 0, 0, 1});
  m.tensors[1].tensor = Tensor<double>({2}, {0, 0});
  return m;
}

}  // namespace

TEST(Arch, ShapesOfCnnA) {
  const auto shapes = arch::cnn_a().shapes();
  ASSERT_EQ(shapes.size(), 9u);
  EXPECT_EQ(shapes[1].h, 24u);
  EXPECT_EQ(shapes[2].h, 12u);
  EXPECT_EQ(shapes[5].h, 4u);
  EXPECT_EQ(shapes[5].c, 64u);
  EXPECT_EQ(shapes.back().c, 10u);
}

TEST(Arch, ParseRoundTrip) {
  const auto a = ArchitectureSpec::parse("input 28x28x1; conv 32 3x3; pool 2x2; fc 200; softmax 10");
  EXPECT_EQ(ArchitectureSpec::parse(a.to_string()).to_string(), a.to_string());
  EXPECT_EQ(a.classes(), 10u);
}

TEST(Arch, ImpossibleShapeNamesLayer) {
  try {
    ArchitectureSpec({4, 4, 1}, {Conv{2, 5, 5}, Softmax{2}}).shapes();
    FAIL() << "expected shape_error";
  } catch (const shape_error& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
  }
}

TEST(Model, LayoutNamesAndDims) {
  const auto m = init_model(arch::cnn_a_small(), 1);
  ASSERT_EQ(m.tensors.size(), 14u);
  EXPECT_EQ(m.tensors[0].name, "layer0.weight");
  EXPECT_EQ(m.tensors[0].tensor.dims(), (std::vector<std::size_t>{8, 3, 3, 1}));
  EXPECT_EQ(m.tensors[12].tensor.dims(), (std::vector<std::size_t>{10, 64}));
  EXPECT_NO_THROW(m.check_consistent());
}

TEST(Forward, ZeroWeightsGiveUniformProbs) {
  auto m = init_model(arch::cnn_a_small(16), 3);
  for (auto& t : m.tensors)
    for (auto& v : t.tensor.values()) v = 0.0f;
  std::mt19937_64 rng(1);
  const auto preds = forward(m, oracle::random_batch(rng, 3, {16, 16, 1}).cast<float>());
  for (const auto& p : preds)
    for (double q : p.probs) EXPECT_NEAR(q, 0.1, 1e-12);
}

TEST(Forward, HandComputedSoftmax) {
  const auto p = forward(identity_fc2(), Tensor<double>({1, 2}, {2, 0}))[0];
  EXPECT_DOUBLE_EQ(p.logits[0], 2.0);
  EXPECT_DOUBLE_EQ(p.logits[1], 0.0);
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(p.probs[0], e2 / (e2 + 1), 1e-15);
  EXPECT_NEAR(p.probs[1], 1 / (e2 + 1), 1e-15);
  EXPECT_EQ(p.label, 0u);
}

TEST(Forward, ProbabilitiesNormalised) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 10; ++i) {
    const auto arch = oracle::random_small_arch(rng);
    const auto preds = forward(oracle::random_model(arch, i), oracle::random_batch(rng, 4, arch.input()));
    for (const auto& p : preds) {
      double s = 0;
      for (double q : p.probs) s += q;
      EXPECT_LT(std::abs(s - 1.0), 1e-6);
    }
  }
}

TEST(Forward, RejectsWrongInputShape) {
  EXPECT_THROW(forward(init_model(arch::cnn_a_small(), 0), Tensor<float>({1, 27, 28, 1})), shape_error);
}

TEST(Loss, ConfidentCorrectPredictionHasZeroLoss) {
  auto m = init_model<double>(fc_arch(2, 2), 0);
  m.tensors[0].tensor = Tensor<double>({2, 2}, {1000, 0, 0, 0});
  const std::size_t labels[] = {0};
  const auto r = loss_and_param_gradients(m, Tensor<double>({1, 2}, {1, 0}), labels);
  EXPECT_EQ(r.loss, 0.0);
  for (const auto& g : r.grads) EXPECT_TRUE(g.all_finite());
}

TEST(Loss, UniformPredictionIsLnTen) {
  auto m = init_model<double>(fc_arch(3, 10), 0);
  for (auto& t : m.tensors)
    for (auto& v : t.tensor.values()) v = 0.0;
  const std::size_t labels[] = {4, 7};
  const auto r = loss_and_param_gradients(m, Tensor<double>({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}), labels);
  EXPECT_NEAR(r.loss, std::log(10.0), 1e-12);
}

TEST(Loss, InvalidLabelThrows) {
  const std::size_t labels[] = {2};
  EXPECT_THROW(loss_and_param_gradients(identity_fc2(), Tensor<double>({1, 2}, {0, 0}), labels), config_error);
}

TEST(Gradients, ThreeParameterToyNetMatchesFiniteDifferences) {
  // One input, two classes: weights [2,1] and biases [2] -> 4 parameters; freeze one bias by value only.
  auto m = init_model<double>(fc_arch(1, 2), 5);
  m.tensors[0].tensor = Tensor<double>({2, 1}, {0.7, -0.3});
  m.tensors[1].tensor = Tensor<double>({2}, {0.1, 0.0});
  const std::size_t labels[] = {1};
  EXPECT_LT(oracle::worst_param_gradient_error(m, Tensor<double>({1, 1}, {0.8}), {labels[0]}), 1e-4);
}

TEST(Gradients, RandomConvNetsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 8; ++i) {
    const auto arch = oracle::random_small_arch(rng);
    const auto m = oracle::random_model(arch, 100 + i);
    const auto x = oracle::random_batch(rng, 3, arch.input());
    std::vector<std::size_t> labels;
    for (int k = 0; k < 3; ++k) labels.push_back(rng() % arch.classes());
    EXPECT_LT(oracle::worst_param_gradient_error(m, x, labels), 1e-4) << arch.to_string();
    const auto in = arch.input();
    const Tensor<double> x0({in.h, in.w, in.c}, std::vector<double>(x.row(0).begin(), x.row(0).end()));
    EXPECT_LT(oracle::worst_input_gradient_error(m, x0, CrossEntropyObjective{labels[0]}), 1e-4)
        << arch.to_string();
  }
}

TEST(InputGradient, ConstantObjectiveHasZeroGradient) {
  auto m = init_model<double>(ArchitectureSpec({1, 1, 3}, {Dense{4}, Softmax{2}}), 2);
  for (auto& v : m.tensors[0].tensor.values()) v = 0.0;
  const auto g = input_gradient(m, Tensor<double>({1, 1, 3}, {0.2, 0.5, 0.9}), CrossEntropyObjective{1});
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(InputGradient, LogisticRegressionClosedForm) {
  // Two-class softmax with logits z = W x + b; d CE / dx = sum_k (p_k - y_k) W_k.
  auto m = init_model<double>(fc_arch(3, 2), 0);
  const std::vector<double> w = {0.5, -1.0, 2.0, -0.25, 0.75, 0.1};
  m.tensors[0].tensor = Tensor<double>({2, 3}, w);
  m.tensors[1].tensor = Tensor<double>({2}, {0.3, -0.2});
  const std::vector<double> x = {0.1, 0.6, 0.4};
  double z[2];
  for (int k = 0; k < 2; ++k) z[k] = w[3 * k] * x[0] + w[3 * k + 1] * x[1] + w[3 * k + 2] * x[2] + (k ? -0.2 : 0.3);
  const double p0 = 1.0 / (1.0 + std::exp(z[1] - z[0]));
  const double p[2] = {p0, 1 - p0}, y[2] = {0, 1};
  const auto g = input_gradient(m, Tensor<double>({1, 1, 3}, x), CrossEntropyObjective{1});
  for (int j = 0; j < 3; ++j) {
    const double expect = (p[0] - y[0]) * w[j] + (p[1] - y[1]) * w[3 + j];
    EXPECT_NEAR(g[j], expect, 1e-12);
  }
}

TEST(InputGradient, CwMarginMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const auto arch = ArchitectureSpec::parse("input 6x6x1; conv 2 3x3; pool 2x2; fc 5; softmax 3");
  const auto m = oracle::random_model(arch, 8);
  const auto x = oracle::random_batch(rng, 1, arch.input());
  const Tensor<double> x0({6, 6, 1}, std::vector<double>(x.values().begin(), x.values().end()));
  EXPECT_LT(oracle::worst_input_gradient_error(m, x0, CwMarginObjective{2, 100.0}), 1e-4);
}

TEST(InputGradient, InvalidObjectiveClassThrows) {
  EXPECT_THROW(input_gradient(identity_fc2(), Tensor<double>({1, 1, 2}, {0, 0}), CrossEntropyObjective{5}),
               config_error);
}

TEST(Sgd, ZeroGradientLeavesParamsUnchanged) {
  auto m = init_model<double>(fc_arch(2, 2), 3);
  const auto before = m;
  SgdState<double> st;
  sgd_momentum_step(m, {Tensor<double>({2, 2}), Tensor<double>({2})}, st, 0.1, 0.9);
  EXPECT_EQ(m, before);
}

TEST(Sgd, HandArithmeticTwoSteps) {
  auto m = init_model<double>(fc_arch(1, 2), 0);
  m.tensors[0].tensor = Tensor<double>({2, 1}, {1.0, 1.0});
  SgdState<double> st;
  const std::vector<Tensor<double>> g = {Tensor<double>({2, 1}, {1.0, 1.0}), Tensor<double>({2}, {0.0, 0.0})};
  sgd_momentum_step(m, g, st, 0.1, 0.9);
  EXPECT_NEAR(m.tensors[0].tensor[0], 0.9, 1e-15);
  EXPECT_NEAR(st.velocity[0][0], -0.1, 1e-15);
  sgd_momentum_step(m, g, st, 0.1, 0.9);
  EXPECT_NEAR(st.velocity[0][0], -0.19, 1e-15);
  EXPECT_NEAR(m.tensors[0].tensor[0], 0.71, 1e-15);
}

TEST(Sgd, ShapeMismatchThrows) {
  auto m = init_model<double>(fc_arch(2, 2), 3);
  SgdState<double> st;
  EXPECT_THROW(sgd_momentum_step(m, {Tensor<double>({2, 3}), Tensor<double>({2})}, st, 0.1, 0.9), shape_error);
}

TEST(Train, DecayScheduleAppliesEveryInterval) {
  TrainHyper h;
  h.learning_rate = 0.1;
  h.lr_decay = 0.5;
  h.momentum = 0.9;
  h.momentum_decay = 1.0;
  h.decay_interval_epochs = 2;
  EXPECT_DOUBLE_EQ(h.schedule(1).first, 0.1);
  EXPECT_DOUBLE_EQ(h.schedule(2).first, 0.1);
  EXPECT_DOUBLE_EQ(h.schedule(3).first, 0.05);
  EXPECT_DOUBLE_EQ(h.schedule(5).first, 0.025);
}

TEST(Train, PlateauRuleReturnsEpochTwo) {
  PlateauTracker p(5);
  const double seq[] = {.90, .91, .91, .91, .91, .91, .91};
  int stopped = 0;
  for (int e = 0; e < 7; ++e) {
    p.update(seq[e]);
    if (p.should_stop()) {
      stopped = e + 1;
      break;
    }
  }
  EXPECT_EQ(stopped, 7);
  EXPECT_EQ(p.best_epoch(), 2);
}

TEST(Train, SeparableBlobsReachNinetyNinePercent) {
  // Two Gaussian blobs far apart in 4-D.
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 0.05);
  auto make = [&](std::size_t n) {
    LabeledDataset ds{Tensor<float>({n, 1, 1, 4}), std::vector<std::size_t>(n), 2, "blobs"};
    for (std::size_t i = 0; i < n; ++i) {
      ds.labels[i] = i % 2;
      for (std::size_t j = 0; j < 4; ++j)
        ds.images[i * 4 + j] = static_cast<float>(std::clamp((ds.labels[i] ? 0.75 : 0.25) + nd(rng), 0.0, 1.0));
    }
    return ds;
  };
  const auto tr = make(400), va = make(200);
  TrainHyper h;
  h.max_epochs = 20;
  h.batch_size = 32;
  h.dropout_rate = 0.0;
  h.learning_rate = 0.05;
  const auto r = train(init_model(ArchitectureSpec({1, 1, 4}, {Dense{8}, Softmax{2}}), 1), tr, va, h,
                       StopRule::fixed_epochs, 2);
  EXPECT_GE(r.history.best_val_accuracy, 0.99);
  EXPECT_EQ(r.history.epochs_run(), 20);
  EXPECT_GE(evaluate_dataset(Network<float>(r.model), va).accuracy, 0.99);
}

TEST(Train, DeterministicForSameSeed) {
  const auto ds = make_synthetic({2, 40, 8, 3});
  const auto sp = split(ds, {20, 1});
  TrainHyper h;
  h.max_epochs = 3;
  h.batch_size = 16;
  const auto arch = ArchitectureSpec::parse("input 8x8x1; conv 2 3x3; pool 2x2; fc 6; softmax 2");
  const auto a = train(init_model(arch, 5), sp.train, sp.validation, h, StopRule::fixed_epochs, 9);
  const auto b = train(init_model(arch, 5), sp.train, sp.validation, h, StopRule::fixed_epochs, 9);
  EXPECT_EQ(encode_model(a.model), encode_model(b.model));
}

TEST(Train, DivergenceReportsLastGoodEpoch) {
  const auto ds = make_synthetic({2, 40, 8, 3});
  const auto sp = split(ds, {20, 1});
  TrainHyper h;
  h.max_epochs = 5;
  h.learning_rate = 1e30;
  h.batch_size = 16;
  try {
    train(init_model(ArchitectureSpec::parse("input 8x8x1; fc 6; softmax 2"), 5), sp.train, sp.validation, h,
          StopRule::fixed_epochs, 9);
    FAIL() << "expected numeric_error";
  } catch (const numeric_error& e) {
    EXPECT_EQ(e.last_good_epoch(), 0);
  }
}

TEST(Serialize, RoundTripIsBitwise) {
  const auto m = init_model(arch::cnn_a_small(), 17);
  const auto dir = oracle::temp_dir("ser");
  save_model(m, dir / "m.fmtd");
  const auto back = load_model(dir / "m.fmtd");
  EXPECT_EQ(back.arch.to_string(), m.arch.to_string());
  ASSERT_EQ(back.tensors.size(), m.tensors.size());
  for (std::size_t i = 0; i < m.tensors.size(); ++i) EXPECT_EQ(back.tensors[i], m.tensors[i]);
  EXPECT_EQ(encode_model(back), read_file_bytes(dir / "m.fmtd"));
  EXPECT_EQ(model_hash(back), model_hash(m));
  EXPECT_EQ(back, m);
}

TEST(Serialize, EqualityIgnoresProvenance) {
  auto a = init_model(arch::cnn_a_small(), 17);
  auto b = a;
  b.provenance = "fork 3 of base 1a2b";
  EXPECT_EQ(a, b);
  b.tensors[0].tensor[0] += 1.0f;
  EXPECT_NE(a, b);
}

TEST(Serialize, TamperedPayloadFailsChecksum) {
  auto bytes = encode_model(init_model(arch::cnn_a_small(), 17));
  bytes[bytes.size() / 2] ^= 0x01;
  try {
    decode_model(bytes);
    FAIL();
  } catch (const format_error& e) {
    EXPECT_EQ(e.which(), format_error::kind::checksum);
  }
}

TEST(Serialize, WrongMagicIsRejected) {
  auto bytes = encode_model(init_model(arch::cnn_a_small(), 17));
  bytes[0] = 'X';
  try {
    decode_model(bytes);
    FAIL();
  } catch (const format_error& e) {
    EXPECT_EQ(e.which(), format_error::kind::bad_magic);
    EXPECT_NE(std::string(e.what()).find("not an fMTD model"), std::string::npos);
  }
}

TEST(Serialize, TruncationAndVersionAreDistinct) {
  auto bytes = encode_model(init_model(arch::cnn_a_small(), 17));
  auto cut = bytes;
  cut.resize(cut.size() - 100);
  try {
    decode_model(cut);
    FAIL();
  } catch (const format_error& e) {
    EXPECT_EQ(e.which(), format_error::kind::truncated);
  }
  bytes[4] = 9;
  try {
    decode_model(bytes);
    FAIL();
  } catch (const format_error& e) {
    EXPECT_EQ(e.which(), format_error::kind::version);
  }
}

TEST(Serialize, LayoutIsLittleEndianWithCrcTrailer) {
  const auto bytes = encode_model(init_model(ArchitectureSpec::parse("input 1x1x2; softmax 2"), 1));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FMTD");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  const std::uint32_t crc = crc32_of(bytes.data(), bytes.size() - 4);
  const std::size_t n = bytes.size();
  EXPECT_EQ(crc, std::uint32_t(bytes[n - 4]) | std::uint32_t(bytes[n - 3]) << 8 | std::uint32_t(bytes[n - 2]) << 16 |
                     std::uint32_t(bytes[n - 1]) << 24);
}
