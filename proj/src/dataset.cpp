#include "ule/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "ule/network.hpp"

namespace ule {

static_assert(std::endian::native == std::endian::little, "dataset container assumes a little-endian host");

std::vector<Index> GroupedDataset::group_counts() const {
  std::vector<Index> counts(static_cast<std::size_t>(num_groups()), 0);
  for (Index i = 0; i < size(); ++i) ++counts[static_cast<std::size_t>(group_of(i))];
  return counts;
}

void GroupedDataset::validate() const {
  const auto n = labels.size();
  if (attributes.size() != n) {
    throw ArgumentError("dataset '" + name + "': " + std::to_string(n) + " labels but " +
                        std::to_string(attributes.size()) + " attributes");
  }
  if (static_cast<std::size_t>(sample_size()) * n != inputs.size()) {
    throw ArgumentError("dataset '" + name + "': " + std::to_string(inputs.size()) + " input values do not fit " +
                        std::to_string(n) + " samples of shape " + shape_str(sample_shape));
  }
  if (num_classes <= 0 || num_attributes <= 0) throw ArgumentError("dataset '" + name + "': empty label domain");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ArgumentError("dataset '" + name + "': label " + std::to_string(labels[i]) + " at sample " +
                          std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    if (attributes[i] < 0 || attributes[i] >= num_attributes) {
      throw ArgumentError("dataset '" + name + "': attribute " + std::to_string(attributes[i]) + " at sample " +
                          std::to_string(i) + " outside [0, " + std::to_string(num_attributes) + ")");
    }
  }
}

GroupedDataset GroupedDataset::subset(std::span<const Index> indices) const {
  GroupedDataset out;
  out.name = name;
  out.sample_shape = sample_shape;
  out.num_classes = num_classes;
  out.num_attributes = num_attributes;
  const auto d = static_cast<std::size_t>(sample_size());
  out.inputs.resize(indices.size() * d);
  out.labels.reserve(indices.size());
  out.attributes.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = indices[k];
    if (i < 0 || i >= size()) throw ArgumentError("dataset subset: index " + std::to_string(i) + " out of range");
    const auto src = static_cast<std::size_t>(i);
    std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(src * d), d,
                out.inputs.begin() + static_cast<std::ptrdiff_t>(k * d));
    out.labels.push_back(labels[src]);
    out.attributes.push_back(attributes[src]);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> GroupedDataset::batch_inputs(std::span<const Index> indices) const {
  const Index d = sample_size();
  typename Tensor<Scalar>::Array values(static_cast<Index>(indices.size()) * d);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = indices[k];
    if (i < 0 || i >= size()) throw ArgumentError("dataset batch: index " + std::to_string(i) + " out of range");
    const float* src = inputs.data() + i * d;
    Scalar* dst = values.data() + static_cast<Index>(k) * d;
    for (Index j = 0; j < d; ++j) dst[j] = static_cast<Scalar>(src[j]);
  }
  Shape shape{static_cast<Index>(indices.size())};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor<Scalar>(std::move(shape), std::move(values));
}

std::vector<int> GroupedDataset::batch_labels(std::span<const Index> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

template Tensor<float> GroupedDataset::batch_inputs<float>(std::span<const Index>) const;
template Tensor<double> GroupedDataset::batch_inputs<double>(std::span<const Index>) const;

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxErrorKind::open_failed, "idx: cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace

GroupedDataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  if (images.size() < 16) throw IdxError(IdxErrorKind::truncated, "idx: '" + images_path + "' has no complete header");
  if (labels.size() < 8) throw IdxError(IdxErrorKind::truncated, "idx: '" + labels_path + "' has no complete header");
  if (be32(images, 0) != 0x00000803u) {
    throw IdxError(IdxErrorKind::bad_magic, "idx: '" + images_path + "' is not an IDX image file (bad magic)");
  }
  if (be32(labels, 0) != 0x00000801u) {
    throw IdxError(IdxErrorKind::bad_magic, "idx: '" + labels_path + "' is not an IDX label file (bad magic)");
  }
  const std::size_t n_images = be32(images, 4);
  const std::size_t rows = be32(images, 8);
  const std::size_t cols = be32(images, 12);
  const std::size_t n_labels = be32(labels, 4);
  if (rows != 28 || cols != 28) {
    throw IdxError(IdxErrorKind::bad_dimensions,
                   "idx: expected 28x28 images, got " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (n_images != n_labels) {
    throw IdxError(IdxErrorKind::count_mismatch, "idx: images file advertises " + std::to_string(n_images) +
                                                     " items, labels file " + std::to_string(n_labels));
  }
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + n_images * pixels) {
    throw IdxError(IdxErrorKind::truncated, "idx: '" + images_path + "' payload is truncated");
  }
  if (labels.size() < 8 + n_labels) {
    throw IdxError(IdxErrorKind::truncated, "idx: '" + labels_path + "' payload is truncated");
  }

  GroupedDataset ds;
  ds.name = "mnist";
  ds.sample_shape = {1, 28, 28};
  ds.num_classes = 10;
  ds.num_attributes = 1;
  ds.inputs.resize(n_images * pixels);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) ds.inputs[i] = static_cast<float>(images[16 + i]) / 255.0f;
  ds.labels.resize(n_labels);
  for (std::size_t i = 0; i < n_labels; ++i) {
    ds.labels[i] = labels[8 + i];
    if (ds.labels[i] > 9) throw IdxError(IdxErrorKind::bad_dimensions, "idx: label value above 9");
  }
  ds.attributes.assign(n_labels, 0);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Spurious variants

namespace {

void require_mnist_shape(const GroupedDataset& base, const char* who) {
  if (base.sample_shape != Shape{1, 28, 28}) {
    throw ShapeError(std::string(who) + ": expected grayscale 1x28x28 samples, got " + shape_str(base.sample_shape));
  }
  if (base.num_classes != 10) throw ArgumentError(std::string(who) + ": expected 10 classes");
}

}  // namespace

GroupedDataset make_mnist_sc(const GroupedDataset& base) {
  require_mnist_shape(base, "make_mnist_sc");
  GroupedDataset out = base;
  out.name = "mnist-sc";
  out.num_attributes = 10;
  for (Index i = 0; i < out.size(); ++i) {
    const int c = out.labels[static_cast<std::size_t>(i)];
    out.inputs[static_cast<std::size_t>(i * 784 + c)] = 1.0f;
    out.attributes[static_cast<std::size_t>(i)] = c;
  }
  out.validate();
  return out;
}

Palette default_palette() {
  return {{{1.0f, 0.0f, 0.0f},
           {0.0f, 1.0f, 0.0f},
           {0.0f, 0.0f, 1.0f},
           {1.0f, 1.0f, 0.0f},
           {1.0f, 0.0f, 1.0f},
           {0.0f, 1.0f, 1.0f},
           {1.0f, 0.5f, 0.0f},
           {0.5f, 1.0f, 0.0f},
           {0.5f, 0.0f, 1.0f},
           {0.0f, 0.5f, 1.0f}}};
}

GroupedDataset make_mnist_rgb(const GroupedDataset& base) {
  require_mnist_shape(base, "make_mnist_rgb");
  GroupedDataset out = base;
  out.name = "mnist-rgb";
  out.sample_shape = {3, 28, 28};
  out.num_attributes = 1;
  out.attributes.assign(base.labels.size(), 0);
  out.inputs.resize(base.inputs.size() * 3);
  constexpr std::size_t plane = 28 * 28;
  for (std::size_t i = 0; i < base.labels.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      std::copy_n(base.inputs.begin() + static_cast<std::ptrdiff_t>(i * plane), plane,
                  out.inputs.begin() + static_cast<std::ptrdiff_t>((i * 3 + c) * plane));
    }
  }
  return out;
}

MnistVariant parse_mnist_variant(const std::string& text) {
  if (text == "mnist") return MnistVariant::plain;
  if (text == "mnist-sc") return MnistVariant::shortcut;
  if (text == "colored-mnist") return MnistVariant::colored;
  throw ArgumentError("unknown MNIST variant '" + text + "' (expected mnist, mnist-sc or colored-mnist)");
}

MnistSplits make_mnist_variant(MnistVariant variant, const GroupedDataset& train, const GroupedDataset& test) {
  switch (variant) {
    case MnistVariant::shortcut:
      return {make_mnist_sc(train), make_mnist_sc(test), test};
    case MnistVariant::colored:
      return {make_colored_mnist(train), make_colored_mnist(test), make_mnist_rgb(test)};
    default:
      return {train, test, test};
  }
}

GroupedDataset make_colored_mnist(const GroupedDataset& base, const Palette& palette) {
  require_mnist_shape(base, "make_colored_mnist");
  for (std::size_t i = 0; i < palette.size(); ++i) {
    const Rgb& c = palette[i];
    for (float v : c) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("palette: colour " + std::to_string(i) + " leaves [0, 1]");
    }
    if (std::max({c[0], c[1], c[2]}) != 1.0f) {
      throw ArgumentError("palette: colour " + std::to_string(i) + " has no channel equal to 1");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (palette[j] == c) {
        throw ArgumentError("palette: colours " + std::to_string(j) + " and " + std::to_string(i) + " are identical");
      }
    }
  }
  GroupedDataset out;
  out.name = "colored-mnist";
  out.sample_shape = {3, 28, 28};
  out.num_classes = 10;
  out.num_attributes = 10;
  out.labels = base.labels;
  out.attributes = base.labels;
  out.inputs.resize(base.inputs.size() * 3);
  for (Index i = 0; i < base.size(); ++i) {
    const Rgb& colour = palette[static_cast<std::size_t>(base.labels[static_cast<std::size_t>(i)])];
    const float* src = base.inputs.data() + i * 784;
    float* dst = out.inputs.data() + i * 3 * 784;
    for (int ch = 0; ch < 3; ++ch) {
      for (int p = 0; p < 784; ++p) dst[ch * 784 + p] = src[p] * colour[static_cast<std::size_t>(ch)];
    }
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic group shift

namespace {

double gaussian(std::mt19937_64& rng) {
  // Box-Muller on the portable uniform source.
  const double u1 = 1.0 - unit_uniform(rng);
  const double u2 = unit_uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace

GroupedDataset make_synthetic_groupshift(const GroupShiftParams& params, GroupShiftSplit split) {
  if (!(params.rho >= 0.5 && params.rho <= 1.0)) {
    throw ArgumentError("synthetic: rho must lie in [0.5, 1], got " + std::to_string(params.rho));
  }
  if (params.n <= 0) throw ArgumentError("synthetic: n must be positive");
  if (params.core_dims < 0 || params.spurious_dims < 0 || params.core_dims + params.spurious_dims == 0) {
    throw ArgumentError("synthetic: need at least one feature dimension");
  }
  if (split == GroupShiftSplit::balanced && params.n % 4 != 0) {
    throw ArgumentError("synthetic: balanced split needs n divisible by 4, got " + std::to_string(params.n));
  }
  const Index d = params.core_dims + params.spurious_dims;
  std::mt19937_64 rng(params.seed * 2 + (split == GroupShiftSplit::balanced ? 1 : 0));

  GroupedDataset ds;
  ds.name = split == GroupShiftSplit::train ? "synthetic-train" : "synthetic-balanced";
  ds.sample_shape = {d};
  ds.num_classes = 2;
  ds.num_attributes = 2;
  ds.inputs.resize(static_cast<std::size_t>(params.n * d));
  ds.labels.resize(static_cast<std::size_t>(params.n));
  ds.attributes.resize(static_cast<std::size_t>(params.n));
  for (Index i = 0; i < params.n; ++i) {
    int y, a;
    if (split == GroupShiftSplit::balanced) {
      const int g = static_cast<int>(i % 4);
      y = g / 2;
      a = g % 2;
    } else {
      y = unit_uniform(rng) < 0.5 ? 0 : 1;
      a = unit_uniform(rng) < params.rho ? y : 1 - y;
    }
    ds.labels[static_cast<std::size_t>(i)] = y;
    ds.attributes[static_cast<std::size_t>(i)] = a;
    float* x = ds.inputs.data() + i * d;
    const double ys = y ? 1.0 : -1.0;
    const double as = a ? 1.0 : -1.0;
    for (Index j = 0; j < params.core_dims; ++j) {
      x[j] = static_cast<float>(ys * params.core_mean + params.core_sd * gaussian(rng));
    }
    for (Index j = 0; j < params.spurious_dims; ++j) {
      x[params.core_dims + j] = static_cast<float>(as * params.spurious_mean + params.spurious_sd * gaussian(rng));
    }
  }
  ds.validate();
  return ds;
}

SyntheticSplits make_synthetic_splits(const GroupShiftParams& params, Index val_n, Index test_n) {
  SyntheticSplits out;
  out.train = make_synthetic_groupshift(params, GroupShiftSplit::train);
  auto p = params;
  p.n = val_n;
  p.seed = params.seed + 1;
  out.val = make_synthetic_groupshift(p, GroupShiftSplit::balanced);
  p.n = test_n;
  p.seed = params.seed + 2;
  out.test = make_synthetic_groupshift(p, GroupShiftSplit::balanced);
  return out;
}

GroupedDataset balanced_test_split(const GroupedDataset& ds, std::uint64_t seed) {
  ds.validate();
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(ds.num_groups()));
  for (Index i = 0; i < ds.size(); ++i) members[static_cast<std::size_t>(ds.group_of(i))].push_back(i);
  std::size_t smallest = members.empty() ? 0 : members[0].size();
  for (std::size_t g = 0; g < members.size(); ++g) {
    if (members[g].empty()) {
      throw ArgumentError("balanced_test_split: group " + std::to_string(g) + " (y=" +
                          std::to_string(g / static_cast<std::size_t>(ds.num_attributes)) + ", a=" +
                          std::to_string(g % static_cast<std::size_t>(ds.num_attributes)) + ") is empty");
    }
    smallest = std::min(smallest, members[g].size());
  }
  std::mt19937_64 rng(seed);
  std::vector<Index> keep;
  for (auto& m : members) {
    // Partial Fisher-Yates picks `smallest` members uniformly.
    for (std::size_t k = 0; k < smallest; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng() % (m.size() - k));
      std::swap(m[k], m[j]);
    }
    keep.insert(keep.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(smallest));
  }
  std::sort(keep.begin(), keep.end());
  GroupedDataset out = ds.subset(keep);
  return out;
}

// ---------------------------------------------------------------------------
// Container

namespace {

constexpr char kDatasetMagic[8] = {'U', 'L', 'E', 'D', 'A', 'T', 'A', '\0'};
constexpr std::uint32_t kDatasetVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("dataset: '" + path + "' is truncated");
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const GroupedDataset& ds) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("dataset: cannot write '" + path + "'");
  out.write(kDatasetMagic, sizeof(kDatasetMagic));
  put(out, kDatasetVersion);
  put(out, static_cast<std::uint64_t>(ds.size()));
  put(out, static_cast<std::uint32_t>(ds.sample_shape.size()));
  for (Index e : ds.sample_shape) put(out, static_cast<std::int64_t>(e));
  put(out, static_cast<std::int32_t>(ds.num_classes));
  put(out, static_cast<std::int32_t>(ds.num_attributes));
  put(out, static_cast<std::uint32_t>(ds.name.size()));
  out.write(ds.name.data(), static_cast<std::streamsize>(ds.name.size()));
  out.write(reinterpret_cast<const char*>(ds.inputs.data()),
            static_cast<std::streamsize>(ds.inputs.size() * sizeof(float)));
  for (int v : ds.labels) put(out, static_cast<std::int32_t>(v));
  for (int v : ds.attributes) put(out, static_cast<std::int32_t>(v));
  if (!out) throw IoError("dataset: write to '" + path + "' failed");
}

GroupedDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("dataset: cannot open '" + path + "'");
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kDatasetMagic, sizeof(magic)) != 0) {
    throw IoError("dataset: '" + path + "' is not a dataset container");
  }
  if (take<std::uint32_t>(in, path) != kDatasetVersion) throw IoError("dataset: unsupported container version");
  GroupedDataset ds;
  const auto n = take<std::uint64_t>(in, path);
  const auto rank = take<std::uint32_t>(in, path);
  if (rank > 8) throw IoError("dataset: implausible sample rank in '" + path + "'");
  for (std::uint32_t i = 0; i < rank; ++i) ds.sample_shape.push_back(static_cast<Index>(take<std::int64_t>(in, path)));
  ds.num_classes = take<std::int32_t>(in, path);
  ds.num_attributes = take<std::int32_t>(in, path);
  const auto name_len = take<std::uint32_t>(in, path);
  if (name_len > 4096) throw IoError("dataset: implausible name length in '" + path + "'");
  ds.name.resize(name_len);
  if (!in.read(ds.name.data(), name_len)) throw IoError("dataset: '" + path + "' is truncated");
  const auto d = static_cast<std::size_t>(shape_size(ds.sample_shape));
  ds.inputs.resize(static_cast<std::size_t>(n) * d);
  if (!in.read(reinterpret_cast<char*>(ds.inputs.data()), static_cast<std::streamsize>(ds.inputs.size() * sizeof(float)))) {
    throw IoError("dataset: '" + path + "' is truncated");
  }
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.attributes.resize(static_cast<std::size_t>(n));
  for (auto& v : ds.labels) v = take<std::int32_t>(in, path);
  for (auto& v : ds.attributes) v = take<std::int32_t>(in, path);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// BatchStream

BatchStream::BatchStream(Index n, Index batch_size, std::uint64_t seed) : n_(n), batch_size_(batch_size), rng_(seed) {
  if (n <= 0) throw ArgumentError("batch stream: dataset is empty");
  if (batch_size <= 0) throw ArgumentError("batch stream: batch size must be positive");
}

std::vector<std::vector<Index>> BatchStream::next_epoch() {
  std::vector<Index> order(static_cast<std::size_t>(n_));
  std::iota(order.begin(), order.end(), Index{0});
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng_() % i);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<Index>> batches;
  for (Index start = 0; start < n_; start += batch_size_) {
    const Index end = std::min(n_, start + batch_size_);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  ++epoch_;
  return batches;
}

}  // namespace ule
