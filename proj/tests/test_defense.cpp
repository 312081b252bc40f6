#include <gtest/gtest.h>

#include <random>

#include "fmtd/defense.hpp"
#include "oracles.hpp"

using namespace fmtd;

namespace {

using Labels = std::vector<std::size_t>;

Labels repeat(std::initializer_list<std::pair<std::size_t, std::size_t>> runs) {
  Labels out;
  for (auto [label, count] : runs) out.insert(out.end(), count, label);
  return out;
}

// Label-only ensemble driven through the serial rule in a fixed order.
DefenseOutcome serial_in_order(const Labels& arriving, double ts) {
  std::vector<std::size_t> order(arriving.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  return fuse_serial(order, ts, [&](std::size_t i) { return arriving[i]; });
}

}  // namespace

TEST(Detect, UnanimousIsCleanAtTOne) { EXPECT_EQ(detect(repeat({{4, 20}}), 1.0), Verdict::clean); }

TEST(Detect, SingleDissentIsAdversarialAtTOne) {
  EXPECT_EQ(detect(repeat({{3, 19}, {5, 1}}), 1.0), Verdict::adversarial);
}

TEST(Detect, BoundaryIsNonStrict) {
  EXPECT_EQ(detect(repeat({{0, 12}, {1, 3}, {2, 3}, {7, 2}}), 0.6), Verdict::clean);
  EXPECT_EQ(detect(repeat({{0, 11}, {1, 9}}), 0.6), Verdict::adversarial);
}

TEST(Majority, Examples) {
  EXPECT_EQ(majority(Labels{7, 7, 7}), 7u);
  EXPECT_EQ(majority(Labels{1, 1, 2, 2, 3}), 1u);
  EXPECT_EQ(majority(Labels{3, 2, 3, 2}), 2u);
  // Ground truth 1 with target 0: most forks recover 1, a few drift elsewhere.
  EXPECT_EQ(majority(repeat({{1, 14}, {0, 3}, {5, 2}, {8, 1}})), 1u);
  EXPECT_THROW(majority(Labels{}), config_error);
}

TEST(ClassifyFull, UnanimousAutonomous) {
  const auto o = fuse_full(repeat({{6, 5}}), {1.0, 1.0, Mode::autonomous, 0}, nullptr, 0);
  EXPECT_EQ(o.verdict, Verdict::clean);
  EXPECT_EQ(o.final_label, 6u);
  EXPECT_FALSE(o.human_invoked);
  EXPECT_EQ(o.models_used, 5u);
}

TEST(ClassifyFull, SplitLabelsInvokeHuman) {
  HumanOracle oracle;
  oracle.add(42, 9);
  const auto o = fuse_full(repeat({{1, 3}, {2, 2}}), {1.0, 1.0, Mode::human_in_the_loop, 0}, &oracle, 42);
  EXPECT_EQ(o.verdict, Verdict::adversarial);
  EXPECT_TRUE(o.human_invoked);
  EXPECT_EQ(o.final_label, 9u);
  EXPECT_EQ(o.fused_label, 1u);
}

TEST(ClassifyFull, HumanModeWithoutOracleIsConfigError) {
  EXPECT_THROW(fuse_full(repeat({{1, 3}, {2, 2}}), {1.0, 1.0, Mode::human_in_the_loop, 0}, nullptr, 1), config_error);
}

TEST(ClassifyFull, RealNetworksOfOneModel) {
  const auto m = init_model(ArchitectureSpec::parse("input 4x4x1; fc 5; softmax 3"), 3);
  const CompiledEnsemble nets(4, Network<float>(m));
  const Tensor<float> x({4, 4, 1}, 0.3f);
  const auto labels = ensemble_outputs(nets, x);
  EXPECT_EQ(labels, Labels(4, labels[0]));
  const auto o = classify_full(nets, {x, 0}, {1.0, 1.0, Mode::autonomous, 0});
  EXPECT_EQ(o.verdict, Verdict::clean);
  EXPECT_EQ(ensemble_outputs(CompiledEnsemble(1, Network<float>(m)), x).size(), 1u);
}

TEST(Serial, FirstThreeAgreeStopsAtThree) {
  const auto o = serial_in_order(Labels{2, 2, 2, 5, 5, 5, 5}, 1.0);
  EXPECT_EQ(o.verdict, Verdict::clean);
  EXPECT_EQ(o.models_used, 3u);
  EXPECT_EQ(o.fused_label, 2u);
}

TEST(Serial, AllDistinctUsesEveryModel) {
  const auto o = serial_in_order(Labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 0.34);
  EXPECT_EQ(o.verdict, Verdict::adversarial);
  EXPECT_EQ(o.models_used, 10u);
}

TEST(Serial, HalfThresholdStopsOnTwoOfThree) {
  const auto o = serial_in_order(Labels{4, 4, 8, 4}, 0.5);
  EXPECT_EQ(o.verdict, Verdict::clean);
  EXPECT_EQ(o.models_used, 3u);
  EXPECT_EQ(o.fused_label, 4u);
}

TEST(Serial, GrowsUntilThresholdMet) {
  // After 3: 2/3 < 0.75; after 4: 3/4 >= 0.75.
  const auto o = serial_in_order(Labels{1, 1, 2, 1, 2, 2}, 0.75);
  EXPECT_EQ(o.verdict, Verdict::clean);
  EXPECT_EQ(o.models_used, 4u);
}

TEST(Serial, NeedsThreeModels) {
  EXPECT_THROW(serial_in_order(Labels{1, 1}, 1.0), config_error);
}

TEST(Serial, OrderIsSeededPermutation) {
  const auto a = serial_order(20, 5, 17);
  EXPECT_EQ(a, serial_order(20, 5, 17));
  EXPECT_NE(a, serial_order(20, 5, 18));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Invariants, RandomLabelSetsSatisfyDefenseProperties) {
  std::mt19937_64 rng(77);
  HumanOracle oracle;
  for (std::uint64_t id = 0; id < 500; ++id) {
    const std::size_t n = 3 + rng() % 18;
    const std::size_t spread = 1 + rng() % 4;
    Labels labels(n);
    const std::size_t base = rng() % 10;
    for (auto& l : labels) l = (rng() % 3 == 0) ? (base + rng() % spread) % 10 : base;
    oracle.add(id, rng() % 10);
    const double T = 0.05 + 0.95 * static_cast<double>(rng() % 100) / 99.0;
    const double Ts = 0.05 + 0.95 * static_cast<double>(rng() % 100) / 99.0;
    const DefenseConfig auto_cfg{T, Ts, Mode::autonomous, 3};
    const DefenseConfig human_cfg{T, Ts, Mode::human_in_the_loop, 3};

    const auto full = fuse_full(labels, auto_cfg, nullptr, id);
    const auto full_h = fuse_full(labels, human_cfg, &oracle, id);
    const auto serial = fuse_serial_labels(labels, auto_cfg, nullptr, id);
    const auto serial_h = fuse_serial_labels(labels, human_cfg, &oracle, id);

    // Serial cost bound and label consistency.
    EXPECT_GE(serial.models_used, 3u);
    EXPECT_LE(serial.models_used, n);
    EXPECT_EQ(serial.per_model_labels.size(), serial.models_used);
    EXPECT_EQ(serial.fused_label, majority(serial.per_model_labels));

    // Mode equivalence on negatives.
    if (full.verdict == Verdict::clean) {
      EXPECT_EQ(full.final_label, full_h.final_label);
    }
    if (serial.verdict == Verdict::clean) {
      EXPECT_EQ(serial.final_label, serial_h.final_label);
    }
    EXPECT_EQ(full.final_label, full.fused_label);

    // Monotone sensitivity in the threshold.
    for (double lower : {T * 0.5, T * 0.9}) {
      if (full.verdict == Verdict::clean) {
        EXPECT_EQ(detect(labels, lower), Verdict::clean);
      }
    }
    if (serial.verdict == Verdict::clean) {
      const DefenseConfig lower{T, Ts * 0.8, Mode::autonomous, 3};
      EXPECT_EQ(fuse_serial_labels(labels, lower, nullptr, id).verdict, Verdict::clean);
    }

    // Unanimity equivalence.
    const Labels same(n, base);
    const auto fu = fuse_full(same, auto_cfg, nullptr, id);
    const auto su = fuse_serial_labels(same, auto_cfg, nullptr, id);
    EXPECT_EQ(fu.verdict, Verdict::clean);
    EXPECT_EQ(su.verdict, Verdict::clean);
    EXPECT_EQ(fu.final_label, su.final_label);
    EXPECT_EQ(su.models_used, 3u);
  }
}

TEST(Config, ThresholdsValidated) {
  EXPECT_THROW((DefenseConfig{0.0, 1.0, Mode::autonomous, 0}.validate()), config_error);
  EXPECT_THROW((DefenseConfig{1.0, 1.5, Mode::autonomous, 0}.validate()), config_error);
  EXPECT_EQ(parse_mode("human-in-the-loop"), Mode::human_in_the_loop);
  EXPECT_THROW(parse_mode("robot"), config_error);
}
