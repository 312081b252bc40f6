#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fmtd/data.hpp"
#include "oracles.hpp"

using namespace fmtd;

namespace {

std::size_t nearest_template(std::span<const float> img, std::size_t classes, std::size_t side) {
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t k = 0; k < classes; ++k) {
    const auto t = synthetic_template(k, classes, side);
    double d = 0;
    for (std::size_t i = 0; i < t.size(); ++i) d += (img[i] - t[i]) * (img[i] - t[i]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

double template_accuracy(const LabeledDataset& ds) {
  const std::size_t side = ds.images.dim(1);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) ok += nearest_template(ds.images.row(i), ds.class_count, side) == ds.labels[i];
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

}  // namespace

TEST(Idx, WriteThenLoadRoundTrip) {
  const auto ds = make_synthetic({3, 5, 6, 1});
  const auto dir = oracle::temp_dir("idx");
  write_idx(ds, dir / "x-images-idx3-ubyte", dir / "x-labels-idx1-ubyte");
  const auto back = load_idx_dir(dir, "x");
  EXPECT_EQ(back.images.dims(), (std::vector<std::size_t>{15, 6, 6, 1}));
  EXPECT_EQ(back.labels, ds.labels);
  for (std::size_t i = 0; i < ds.images.size(); ++i) EXPECT_NEAR(back.images[i], ds.images[i], 0.5 / 255 + 1e-7);
  EXPECT_NO_THROW(back.validate());
}

TEST(Idx, CountMismatchIsRejected) {
  const auto ds = make_synthetic({2, 3, 4, 1});
  const auto dir = oracle::temp_dir("idx-mismatch");
  write_idx(ds, dir / "a-images-idx3-ubyte", dir / "a-labels-idx1-ubyte");
  write_idx(ds.head(5), dir / "b-images-idx3-ubyte", dir / "b-labels-idx1-ubyte");
  try {
    load_idx(dir / "a-images-idx3-ubyte", dir / "b-labels-idx1-ubyte");
    FAIL();
  } catch (const format_error& e) {
    EXPECT_EQ(e.which(), format_error::kind::count_mismatch);
  }
}

TEST(Idx, HeaderInconsistenciesAreRejected) {
  const auto ds = make_synthetic({2, 3, 4, 1});
  const auto dir = oracle::temp_dir("idx-bad");
  write_idx(ds, dir / "a-images-idx3-ubyte", dir / "a-labels-idx1-ubyte");
  auto img = read_file_bytes(dir / "a-images-idx3-ubyte");
  img.pop_back();
  write_file_bytes(dir / "t-images-idx3-ubyte", img);
  EXPECT_THROW(load_idx(dir / "t-images-idx3-ubyte", dir / "a-labels-idx1-ubyte"), format_error);
  img[3] = 0x01;
  write_file_bytes(dir / "m-images-idx3-ubyte", img);
  try {
    load_idx(dir / "m-images-idx3-ubyte", dir / "a-labels-idx1-ubyte");
    FAIL();
  } catch (const format_error& e) {
    EXPECT_EQ(e.which(), format_error::kind::bad_magic);
  }
}

TEST(Idx, MissingDirectoryIsIoError) {
  try {
    load_idx_dir("/nonexistent/fmtd", "train");
    FAIL();
  } catch (const io_error& e) {
    EXPECT_NE(std::string(e.what()).find("dataset not found"), std::string::npos);
  }
}

TEST(Synthetic, Deterministic) {
  const auto a = make_synthetic({2, 100, 8, 7});
  const auto b = make_synthetic({2, 100, 8, 7});
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.images, make_synthetic({2, 100, 8, 8}).images);
}

TEST(Synthetic, PixelsInUnitInterval) {
  const auto ds = make_synthetic({5, 30, 10, 2, 0.3});
  EXPECT_NO_THROW(ds.validate());
}

TEST(Synthetic, ZeroNoiseTemplateMatcherIsPerfect) {
  EXPECT_EQ(template_accuracy(make_synthetic({6, 20, 8, 1, 0.0})), 1.0);
}

TEST(Synthetic, DefaultNoiseTemplateMatcherAtLeast95) {
  EXPECT_GE(template_accuracy(make_synthetic({10, 50, 10, 3})), 0.95);
  EXPECT_GE(template_accuracy(make_synthetic({2, 100, 8, 7})), 0.95);
}

TEST(Synthetic, TooFewClassesThrows) { EXPECT_THROW(make_synthetic({1, 10, 8, 0}), config_error); }

TEST(Split, ZeroValidationIsPermutation) {
  const auto ds = make_synthetic({3, 10, 4, 1});
  const auto s = split(ds, {0, 5});
  EXPECT_EQ(s.validation.size(), 0u);
  ASSERT_EQ(s.train.size(), ds.size());
  auto idx = s.train_index;
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], i);
}

TEST(Split, SameSeedSamePartition) {
  const auto ds = make_synthetic({3, 40, 4, 1});
  EXPECT_EQ(split(ds, {30, 5}).validation_index, split(ds, {30, 5}).validation_index);
  EXPECT_NE(split(ds, {30, 5}).validation_index, split(ds, {30, 6}).validation_index);
}

TEST(Split, DisjointExhaustiveAndReassemblable) {
  const auto ds = make_synthetic({4, 25, 5, 2});
  const auto s = split(ds, {37, 3});
  EXPECT_EQ(s.train.size() + s.validation.size(), ds.size());
  std::vector<std::pair<std::size_t, std::vector<float>>> rows;
  for (std::size_t i = 0; i < s.train.size(); ++i) {
    const auto r = s.train.images.row(i);
    rows.push_back({s.train_index[i], {r.begin(), r.end()}});
  }
  for (std::size_t i = 0; i < s.validation.size(); ++i) {
    const auto r = s.validation.images.row(i);
    rows.push_back({s.validation_index[i], {r.begin(), r.end()}});
  }
  std::sort(rows.begin(), rows.end());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ASSERT_EQ(rows[i].first, i);
    const auto r = ds.images.row(i);
    EXPECT_TRUE(std::equal(r.begin(), r.end(), rows[i].second.begin()));
  }
}

TEST(Split, LabelDistributionWithinTwoPoints) {
  // Unbalanced source: class k has 100 + 37k examples.
  std::vector<std::size_t> labels;
  for (std::size_t k = 0; k < 10; ++k) labels.insert(labels.end(), 100 + 37 * k, k);
  const std::size_t n = labels.size();
  LabeledDataset ds{Tensor<float>({n, 1, 1, 1}), labels, 10, "skew"};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = split(ds, {1000, seed});
    ASSERT_EQ(s.validation.size(), 1000u);
    for (std::size_t k = 0; k < 10; ++k) {
      const double src = static_cast<double>(std::count(labels.begin(), labels.end(), k)) / static_cast<double>(n);
      const double val = static_cast<double>(std::count(s.validation.labels.begin(), s.validation.labels.end(), k)) /
                         1000.0;
      EXPECT_LE(std::abs(src - val), 0.02);
    }
  }
}

TEST(Split, OversizedValidationThrows) {
  const auto ds = make_synthetic({2, 5, 4, 1});
  EXPECT_THROW(split(ds, {10, 0}), config_error);
}
