#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "fmtd/error.hpp"
#include "fmtd/rng.hpp"
#include "fmtd/serialize.hpp"
#include "fmtd/tensor.hpp"

namespace fmtd {

/// Images [n, h, w, c] in [0,1] with one label per image.
struct LabeledDataset {
  Tensor<float> images;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  std::size_t example_size() const { return images.row_size(); }

  std::vector<std::size_t> example_dims() const {
    return {images.dims().begin() + 1, images.dims().end()};
  }

  Tensor<float> example(std::size_t i) const {
    const auto r = images.row(i);
    return Tensor<float>(example_dims(), std::vector<float>(r.begin(), r.end()));
  }

  /// Rows `idx` in the given order.
  LabeledDataset subset(std::span<const std::size_t> idx, std::string subset_name = {}) const {
    auto dims = images.dims();
    dims[0] = idx.size();
    std::vector<float> data;
    data.reserve(idx.size() * example_size());
    std::vector<std::size_t> lab;
    lab.reserve(idx.size());
    for (std::size_t i : idx) {
      const auto r = images.row(i);
      data.insert(data.end(), r.begin(), r.end());
      lab.push_back(labels[i]);
    }
    return {Tensor<float>(std::move(dims), std::move(data)), std::move(lab), class_count,
            subset_name.empty() ? name : std::move(subset_name)};
  }

  LabeledDataset head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return subset(idx);
  }

  void validate() const {
    if (images.rank() != 4 || images.dim(0) != labels.size())
      throw shape_error("dataset '" + name + "': image dims " + dims_to_string(images.dims()) +
                        " inconsistent with " + std::to_string(labels.size()) + " labels");
    for (std::size_t y : labels)
      if (y >= class_count) throw format_error(format_error::kind::malformed, "dataset '" + name + "': label out of range");
    for (float v : images.values())
      if (!(v >= 0.0f && v <= 1.0f)) throw format_error(format_error::kind::malformed, "dataset '" + name + "': pixel outside [0,1]");
  }
};

namespace detail {

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace detail

/// Parse IDX image (magic 0x803) and label (0x801) files; pixels scaled by 1/255.
inline LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                               std::size_t class_count = 10) {
  using fk = format_error::kind;
  if (!std::filesystem::exists(images_path)) throw io_error("dataset not found: " + images_path.string());
  if (!std::filesystem::exists(labels_path)) throw io_error("dataset not found: " + labels_path.string());
  const auto img = read_file_bytes(images_path);
  const auto lab = read_file_bytes(labels_path);
  if (img.size() < 16) throw format_error(fk::truncated, "IDX image file truncated: " + images_path.string());
  if (lab.size() < 8) throw format_error(fk::truncated, "IDX label file truncated: " + labels_path.string());
  if (detail::be32(img, 0) != 0x00000803u) throw format_error(fk::bad_magic, "bad IDX image magic in " + images_path.string());
  if (detail::be32(lab, 0) != 0x00000801u) throw format_error(fk::bad_magic, "bad IDX label magic in " + labels_path.string());
  const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8), cols = detail::be32(img, 12);
  const std::size_t nl = detail::be32(lab, 4);
  if (n != nl)
    throw format_error(fk::count_mismatch, "IDX count mismatch: " + std::to_string(n) + " images vs " +
                                               std::to_string(nl) + " labels");
  if (img.size() != 16 + n * rows * cols)
    throw format_error(img.size() < 16 + n * rows * cols ? fk::truncated : fk::malformed,
                       "IDX image payload size mismatch in " + images_path.string());
  if (lab.size() != 8 + n)
    throw format_error(lab.size() < 8 + n ? fk::truncated : fk::malformed,
                       "IDX label payload size mismatch in " + labels_path.string());
  std::vector<float> px(n * rows * cols);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = lab[8 + i];
    if (labels[i] >= class_count)
      throw format_error(fk::malformed, "IDX label " + std::to_string(labels[i]) + " exceeds class count");
  }
  return {Tensor<float>({n, rows, cols, 1}, std::move(px)), std::move(labels), class_count,
          images_path.filename().string()};
}

/// MNIST pair from a directory holding the standard file names; `part` is "train" or "t10k".
inline LabeledDataset load_idx_dir(const std::filesystem::path& dir, const std::string& part) {
  if (!std::filesystem::is_directory(dir)) throw io_error("dataset not found: " + dir.string());
  return load_idx(dir / (part + "-images-idx3-ubyte"), dir / (part + "-labels-idx1-ubyte"));
}

inline void write_idx(const LabeledDataset& ds, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  auto be = [](std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
  };
  std::vector<std::uint8_t> img, lab;
  be(img, 0x803);
  be(img, static_cast<std::uint32_t>(ds.size()));
  be(img, static_cast<std::uint32_t>(ds.images.dim(1)));
  be(img, static_cast<std::uint32_t>(ds.images.dim(2)));
  for (float v : ds.images.values()) img.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  be(lab, 0x801);
  be(lab, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t y : ds.labels) lab.push_back(static_cast<std::uint8_t>(y));
  write_file_bytes(images_path, img);
  write_file_bytes(labels_path, lab);
}

struct SyntheticSpec {
  std::size_t classes = 2;
  std::size_t per_class = 100;
  std::size_t image_side = 8;
  std::uint64_t seed = 0;
  double noise = 0.05;
};

/// Noise-free template for class k: a bar through the centre at angle pi*k/classes,
/// plus a corner dot whose position encodes k mod 4.
inline std::vector<float> synthetic_template(std::size_t k, std::size_t classes, std::size_t side) {
  std::vector<float> img(side * side, 0.0f);
  const double angle = std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
  const double cx = (static_cast<double>(side) - 1.0) / 2.0;
  const double dx = std::cos(angle), dy = std::sin(angle);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const double px = static_cast<double>(c) - cx, py = static_cast<double>(r) - cx;
      const double dist = std::abs(px * dy - py * dx);
      img[r * side + c] = static_cast<float>(std::max(0.0, 1.0 - dist));
    }
  const std::size_t corner = k % 4;
  const std::size_t r = corner < 2 ? 0 : side - 1, c = corner % 2 == 0 ? 0 : side - 1;
  img[r * side + c] = 1.0f;
  return img;
}

/// Deterministic toy corpus: templates plus clipped Gaussian noise, classes interleaved.
inline LabeledDataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw config_error("synthetic dataset needs at least 2 classes");
  const std::size_t side = spec.image_side, n = spec.classes * spec.per_class;
  std::vector<std::vector<float>> templates;
  for (std::size_t k = 0; k < spec.classes; ++k) templates.push_back(synthetic_template(k, spec.classes, side));
  Rng rng(derive_seed(spec.seed, stream::synthetic));
  std::vector<float> px;
  px.reserve(n * side * side);
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % spec.classes;
    labels.push_back(k);
    for (float t : templates[k]) {
      // Box-Muller keeps the noise stream independent of the standard library.
      const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
      const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
      px.push_back(static_cast<float>(std::clamp(t + spec.noise * z, 0.0, 1.0)));
    }
  }
  return {Tensor<float>({n, side, side, 1}, std::move(px)), std::move(labels), spec.classes,
          "synthetic-c" + std::to_string(spec.classes) + "-s" + std::to_string(spec.seed)};
}

struct SplitSpec {
  std::size_t validation_count = 0;
  std::uint64_t seed = 0;
};

struct Split {
  LabeledDataset train, validation;
  std::vector<std::size_t> train_index, validation_index;  // rows of the source
};

/// Seeded stratified partition. Each class contributes its largest-remainder share of
/// `validation_count`, taken in the order of one seeded permutation; both outputs keep
/// that permuted order.
inline Split split(const LabeledDataset& ds, const SplitSpec& spec) {
  const std::size_t n = ds.size();
  if (spec.validation_count >= n)
    throw config_error("validation_count " + std::to_string(spec.validation_count) + " must be below dataset size " +
                       std::to_string(n));
  const auto perm = seeded_permutation(n, derive_seed(spec.seed, stream::split));
  const std::size_t classes = std::max<std::size_t>(ds.class_count, 1);
  std::vector<std::size_t> per_class(classes, 0);
  for (std::size_t y : ds.labels) ++per_class[std::min(y, classes - 1)];

  std::vector<std::size_t> quota(classes);
  std::vector<std::pair<double, std::size_t>> remainder;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    const double exact = static_cast<double>(spec.validation_count) * static_cast<double>(per_class[k]) /
                         static_cast<double>(n);
    quota[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[k];
    remainder.push_back({exact - std::floor(exact), k});
  }
  std::stable_sort(remainder.begin(), remainder.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < spec.validation_count; ++r, ++assigned) ++quota[remainder[r].second];

  Split out;
  for (std::size_t i : perm) {
    auto& q = quota[std::min(ds.labels[i], classes - 1)];
    if (q > 0) {
      --q;
      out.validation_index.push_back(i);
    } else {
      out.train_index.push_back(i);
    }
  }
  out.train = ds.subset(out.train_index, ds.name + ":train");
  out.validation = ds.subset(out.validation_index, ds.name + ":val");
  return out;
}

}  // namespace fmtd
