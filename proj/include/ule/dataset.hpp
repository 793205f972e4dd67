#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ule/tensor.hpp"

namespace ule {

/// Samples with class labels y, spurious attributes a and group id y*|a| + a.
///
/// Inputs are stored as float32 in row-major (channels, height, width) or
/// (features) order and converted to the training scalar per batch.
struct GroupedDataset {
  std::string name;
  Shape sample_shape;
  std::vector<float> inputs;
  std::vector<int> labels;
  std::vector<int> attributes;
  int num_classes = 0;
  int num_attributes = 1;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index sample_size() const { return shape_size(sample_shape); }
  int num_groups() const { return num_classes * num_attributes; }
  int group_of(Index i) const {
    return labels[static_cast<std::size_t>(i)] * num_attributes + attributes[static_cast<std::size_t>(i)];
  }
  std::vector<Index> group_counts() const;

  /// Throws ArgumentError when lengths, label ranges or attribute ranges disagree.
  void validate() const;

  GroupedDataset subset(std::span<const Index> indices) const;

  /// (batch, sample_shape...) tensor of the selected samples.
  template <typename Scalar>
  Tensor<Scalar> batch_inputs(std::span<const Index> indices) const;
  std::vector<int> batch_labels(std::span<const Index> indices) const;
};

/// Failure categories of the IDX reader.
enum class IdxErrorKind { open_failed, bad_magic, truncated, count_mismatch, bad_dimensions };

class IdxError : public Error {
 public:
  IdxError(IdxErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  IdxErrorKind kind() const { return kind_; }

 private:
  IdxErrorKind kind_;
};

/// Reads an MNIST image/label IDX pair (big-endian, magic 0x803 / 0x801).
/// Pixels are scaled to [0, 1]; every attribute is 0.
GroupedDataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

/// One-hot encodes the class into row 0, columns 0..9 (pixel (0, c) := 1); a := c.
GroupedDataset make_mnist_sc(const GroupedDataset& base);

using Rgb = std::array<float, 3>;
using Palette = std::array<Rgb, 10>;

/// Ten distinct colours whose largest channel is exactly 1.
Palette default_palette();

/// Colours each digit v -> v * palette[c]; output is 3x28x28; a := c.
/// The palette must hold distinct colours with unit maximum channel.
GroupedDataset make_colored_mnist(const GroupedDataset& base, const Palette& palette = default_palette());

/// Grey digits replicated into three channels (the uncoloured counterpart of
/// make_colored_mnist); attributes stay 0.
GroupedDataset make_mnist_rgb(const GroupedDataset& base);

enum class MnistVariant { plain, shortcut, colored };
MnistVariant parse_mnist_variant(const std::string& text);  // mnist | mnist-sc | colored-mnist

/// Training set, its matching test set and the clean MNIST test set in the
/// same input format (three grey channels for the coloured variant).
struct MnistSplits {
  GroupedDataset train;
  GroupedDataset test;
  GroupedDataset clean;
};
MnistSplits make_mnist_variant(MnistVariant variant, const GroupedDataset& train, const GroupedDataset& test);

struct GroupShiftParams {
  Index n = 2000;
  Index core_dims = 2;
  Index spurious_dims = 2;
  double rho = 0.95;  // P(a == y) in the training split
  std::uint64_t seed = 0;
  double core_mean = 1.0;
  double core_sd = 1.25;
  double spurious_mean = 2.0;
  double spurious_sd = 0.5;
};

enum class GroupShiftSplit { train, balanced };

/// Two classes and two attributes. Core features ~ N(+-core_mean, core_sd)
/// by class, spurious features ~ N(+-spurious_mean, spurious_sd) by
/// attribute. The train split draws a == y with probability rho; the
/// balanced split holds exactly n/4 samples per group.
GroupedDataset make_synthetic_groupshift(const GroupShiftParams& params, GroupShiftSplit split);

/// Train split (params.seed) plus balanced validation and test splits drawn
/// with seeds params.seed + 1 and params.seed + 2.
struct SyntheticSplits {
  GroupedDataset train;
  GroupedDataset val;
  GroupedDataset test;
};
SyntheticSplits make_synthetic_splits(const GroupShiftParams& params, Index val_n = 1000, Index test_n = 2000);

/// Subsamples every group to the smallest group's size (seeded). Sample order is preserved.
GroupedDataset balanced_test_split(const GroupedDataset& ds, std::uint64_t seed = 0);

/// Binary container: header (counts, shape, domains, name) then raw inputs, labels, attributes.
void save_dataset(const std::string& path, const GroupedDataset& ds);
GroupedDataset load_dataset(const std::string& path);

/// Seeded epoch-wise shuffler. Each epoch is a permutation of [0, n) cut into
/// batches of `batch_size` (the last one may be shorter).
class BatchStream {
 public:
  BatchStream(Index n, Index batch_size, std::uint64_t seed);

  std::vector<std::vector<Index>> next_epoch();
  int epoch() const { return epoch_; }
  Index batch_size() const { return batch_size_; }

 private:
  Index n_;
  Index batch_size_;
  std::mt19937_64 rng_;
  int epoch_ = 0;
};

}  // namespace ule
