#include "ule/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ule/ops.hpp"

namespace ule {

namespace op = ops;

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

namespace {

Shape layer_output(const LayerSpec& layer, const Shape& in) {
  auto fail = [&](const std::string& why) {
    throw ShapeError("network: layer '" + layer.name + "' " + why + " (input " + shape_str(in) + ")");
  };
  switch (layer.kind) {
    case LayerKind::conv2d:
      if (in.size() != 3 || in[0] != layer.in_channels) fail("expects (" + std::to_string(layer.in_channels) + ",H,W)");
      if (in[1] < layer.kernel || in[2] < layer.kernel) fail("input smaller than kernel");
      return {layer.out_channels, in[1] - layer.kernel + 1, in[2] - layer.kernel + 1};
    case LayerKind::relu:
    case LayerKind::dropout:
      return in;
    case LayerKind::maxpool2d:
      if (in.size() != 3 || in[1] < 2 || in[2] < 2) fail("expects (C,H,W) with H,W >= 2");
      return {in[0], in[1] / 2, in[2] / 2};
    case LayerKind::flatten:
      return {shape_size(in)};
    case LayerKind::linear:
      if (in.size() != 1 || in[0] != layer.in_features) fail("expects " + std::to_string(layer.in_features) + " features");
      return {layer.out_features};
  }
  return in;
}

Shape with_batch(Index batch, const Shape& sample) {
  Shape s{batch};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

}  // namespace

template <typename Scalar>
Network<Scalar>::Network(std::string arch, Shape input_shape, std::vector<LayerSpec> layers, std::string tap)
    : arch_(std::move(arch)), input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (layers_.empty()) throw ArgumentError("network: no layers");
  Shape shape = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& layer = layers_[i];
    shape = layer_output(layer, shape);
    layer_out_shapes_.push_back(shape);
    const bool feeds_relu = i + 1 < layers_.size() && layers_[i + 1].kind == LayerKind::relu;
    if (layer.kind == LayerKind::conv2d) {
      const Index fan_in = layer.in_channels * layer.kernel * layer.kernel;
      params_.push_back({layer.name + ".weight",
                         Tensor<Scalar>::zeros({layer.out_channels, layer.in_channels, layer.kernel, layer.kernel}),
                         true, false, fan_in, feeds_relu});
      params_.push_back({layer.name + ".bias", Tensor<Scalar>::zeros({layer.out_channels}), true, true, fan_in,
                         feeds_relu});
    } else if (layer.kind == LayerKind::linear) {
      params_.push_back({layer.name + ".weight", Tensor<Scalar>::zeros({layer.out_features, layer.in_features}), true,
                         false, layer.in_features, feeds_relu});
      params_.push_back({layer.name + ".bias", Tensor<Scalar>::zeros({layer.out_features}), true, true,
                         layer.in_features, feeds_relu});
    } else if (layer.kind == LayerKind::dropout &&
               !(layer.drop_probability >= 0.0 && layer.drop_probability < 1.0)) {
      throw ArgumentError("network: dropout '" + layer.name + "' probability must lie in [0, 1)");
    }
  }
  if (shape.size() != 1) throw ShapeError("network: final layer must produce a flat logit vector, got " + shape_str(shape));
  num_classes_ = shape[0];
  set_tap(tap);
}

template <typename Scalar>
void Network<Scalar>::set_tap(const std::string& layer_name) {
  if (layer_name != kInputTap) {
    auto it = std::find_if(layers_.begin(), layers_.end(), [&](const LayerSpec& l) { return l.name == layer_name; });
    if (it == layers_.end()) throw ArgumentError("network: unknown tap point '" + layer_name + "'");
  }
  tap_ = layer_name;
}

template <typename Scalar>
Index Network<Scalar>::tap_width() const {
  if (tap_ == kInputTap) return shape_size(input_shape_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == tap_) return shape_size(layer_out_shapes_[i]);
  }
  return 0;
}

template <typename Scalar>
typename Network<Scalar>::Output Network<Scalar>::forward(const Tensor<Scalar>& x, const ForwardOptions& options) {
  const Index per_sample = shape_size(input_shape_);
  if (x.rank() < 1 || x.size() != x.extent(0) * per_sample) {
    throw ShapeError("network: input " + shape_str(x.shape()) + " does not match per-sample shape " +
                     shape_str(input_shape_));
  }
  const Index batch = x.extent(0);
  Output out;
  auto expose = [&](Tensor<Scalar> h) {
    Tensor<Scalar> flat = op::reshape(h, {batch, shape_size(h.shape()) / std::max<Index>(batch, 1)});
    if (options.tap_leaf && !flat.on_graph() && GradMode::enabled()) flat = flat.requires_grad();
    out.tap = flat;
    return op::reshape(flat, h.shape());
  };

  Tensor<Scalar> h = x.shape() == with_batch(batch, input_shape_) ? x : op::reshape(x, with_batch(batch, input_shape_));
  if (tap_ == kInputTap) h = expose(h);
  for (const LayerSpec& layer : layers_) {
    switch (layer.kind) {
      case LayerKind::conv2d:
        h = op::add_channel_bias(op::conv2d(h, parameter(layer.name + ".weight").value),
                                 parameter(layer.name + ".bias").value);
        break;
      case LayerKind::relu:
        h = op::relu(h);
        break;
      case LayerKind::maxpool2d:
        h = op::maxpool2d(h);
        break;
      case LayerKind::flatten:
        h = op::reshape(h, {batch, shape_size(h.shape()) / std::max<Index>(batch, 1)});
        break;
      case LayerKind::dropout:
        h = op::dropout(h, layer.drop_probability, options.train, dropout_rng_);
        break;
      case LayerKind::linear:
        h = op::add_row_bias(op::matmul(h, op::transpose(parameter(layer.name + ".weight").value)),
                             parameter(layer.name + ".bias").value);
        break;
    }
    if (layer.name == tap_) h = expose(h);
  }
  out.logits = h;
  return out;
}

template <typename Scalar>
typename Network<Scalar>::Parameter& Network<Scalar>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ArgumentError("network: no parameter named '" + name + "'");
}

template <typename Scalar>
const typename Network<Scalar>::Parameter& Network<Scalar>::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ArgumentError("network: no parameter named '" + name + "'");
}

template <typename Scalar>
std::vector<std::string> Network<Scalar>::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& p : params_) {
    if (p.trainable) names.push_back(p.name);
  }
  return names;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> Network<Scalar>::trainable_tensors() const {
  std::vector<Tensor<Scalar>> out;
  for (const auto& p : params_) {
    if (p.trainable) out.push_back(p.value);
  }
  return out;
}

template <typename Scalar>
void Network<Scalar>::set_trainable(const std::string& name, bool trainable) {
  Parameter& p = parameter(name);
  p.trainable = trainable;
  if (!trainable) p.value = p.value.detach();
}

template <typename Scalar>
void Network<Scalar>::freeze_all_but_last() {
  auto last = std::find_if(layers_.rbegin(), layers_.rend(), [](const LayerSpec& l) { return l.kind == LayerKind::linear; });
  if (last == layers_.rend()) throw ArgumentError("network: no linear layer to keep trainable");
  for (auto& p : params_) {
    p.trainable = p.name.rfind(last->name + ".", 0) == 0;
    if (!p.trainable) p.value = p.value.detach();
  }
}

template <typename Scalar>
void Network<Scalar>::bind_for_training() {
  for (auto& p : params_) p.value = p.trainable ? p.value.detach().requires_grad() : p.value.detach();
}

template <typename Scalar>
void Network<Scalar>::release_graph() {
  for (auto& p : params_) p.value = p.value.detach();
}

template <typename Scalar>
Network<Scalar> build_poc_cnn(Index input_channels) {
  if (input_channels != 1 && input_channels != 3) {
    throw ArgumentError("build_poc_cnn: input channels must be 1 or 3, got " + std::to_string(input_channels));
  }
  std::vector<LayerSpec> layers{
      {LayerKind::conv2d, "conv1", input_channels, 32, 3},
      {LayerKind::relu, "relu1"},
      {LayerKind::conv2d, "conv2", 32, 64, 3},
      {LayerKind::relu, "relu2"},
      {LayerKind::maxpool2d, "pool"},
      {LayerKind::flatten, "flatten"},
      {LayerKind::dropout, "drop1", 0, 0, 0, 0, 0, 0.25},
      {LayerKind::linear, "fc1", 0, 0, 0, 9216, 128},
      {LayerKind::relu, "relu3"},
      {LayerKind::dropout, "drop2", 0, 0, 0, 0, 0, 0.5},
      {LayerKind::linear, "fc2", 0, 0, 0, 128, 10},
  };
  return Network<Scalar>("poc_cnn:" + std::to_string(input_channels), {input_channels, 28, 28}, std::move(layers),
                         "flatten");
}

template <typename Scalar>
Network<Scalar> build_mlp(Index input_dim, const std::vector<Index>& hidden, Index classes, const Shape& sample_shape) {
  if (input_dim <= 0 || classes <= 0) throw ArgumentError("build_mlp: dimensions must be positive");
  Shape input = sample_shape.empty() ? Shape{input_dim} : sample_shape;
  if (shape_size(input) != input_dim) {
    throw ArgumentError("build_mlp: sample shape " + shape_str(input) + " does not hold " + std::to_string(input_dim) +
                        " features");
  }
  std::vector<LayerSpec> layers;
  if (input.size() != 1) layers.push_back({LayerKind::flatten, "flatten"});
  Index width = input_dim;
  std::string tap = kInputTap;
  std::ostringstream hidden_desc;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (hidden[i] <= 0) throw ArgumentError("build_mlp: hidden widths must be positive");
    const std::string idx = std::to_string(i + 1);
    layers.push_back({LayerKind::linear, "fc" + idx, 0, 0, 0, width, hidden[i]});
    layers.push_back({LayerKind::relu, "relu" + idx});
    tap = "relu" + idx;
    width = hidden[i];
    hidden_desc << (i ? "," : "") << hidden[i];
  }
  layers.push_back({LayerKind::linear, "fc" + std::to_string(hidden.size() + 1), 0, 0, 0, width, classes});
  std::ostringstream arch;
  arch << "mlp:" << input_dim << ':' << (hidden.empty() ? "-" : hidden_desc.str()) << ':' << classes;
  if (input.size() != 1) {
    arch << ':';
    for (std::size_t i = 0; i < input.size(); ++i) arch << (i ? "x" : "") << input[i];
  }
  return Network<Scalar>(arch.str(), input, std::move(layers), tap);
}

template <typename Scalar>
Network<Scalar> build_from_arch(const std::string& arch) {
  std::vector<std::string> parts;
  std::stringstream ss(arch);
  for (std::string item; std::getline(ss, item, ':');) parts.push_back(item);
  try {
    if (parts.size() == 2 && parts[0] == "poc_cnn") return build_poc_cnn<Scalar>(std::stoll(parts[1]));
    if ((parts.size() == 4 || parts.size() == 5) && parts[0] == "mlp") {
      std::vector<Index> hidden;
      if (parts[2] != "-") {
        std::stringstream hs(parts[2]);
        for (std::string h; std::getline(hs, h, ',');) hidden.push_back(std::stoll(h));
      }
      Shape sample;
      if (parts.size() == 5) {
        std::stringstream sh(parts[4]);
        for (std::string e; std::getline(sh, e, 'x');) sample.push_back(std::stoll(e));
      }
      return build_mlp<Scalar>(std::stoll(parts[1]), hidden, std::stoll(parts[3]), sample);
    }
  } catch (const std::logic_error&) {
    // fall through to the error below
  }
  throw ArgumentError("unknown architecture descriptor '" + arch + "'");
}

template <typename Scalar>
void init_params(Network<Scalar>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : net.parameters()) {
    typename Tensor<Scalar>::Array values = Tensor<Scalar>::Array::Zero(p.value.size());
    if (!p.is_bias) {
      const double bound = std::sqrt((p.feeds_relu ? 6.0 : 3.0) / static_cast<double>(p.fan_in));
      for (Index i = 0; i < values.size(); ++i) values(i) = static_cast<Scalar>((2.0 * unit_uniform(rng) - 1.0) * bound);
    }
    p.value = Tensor<Scalar>(p.value.shape(), std::move(values));
  }
  net.seed_dropout(rng());
}

namespace {

constexpr char kCheckpointMagic[8] = {'U', 'L', 'E', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw IoError("checkpoint: truncated file " + path);
  return value;
}

std::string get_string(std::istream& is, const std::string& path) {
  const auto n = get<std::uint32_t>(is, path);
  if (n > (1u << 20)) throw IoError("checkpoint: corrupt string length in " + path);
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw IoError("checkpoint: truncated file " + path);
  return s;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::string& path, const Network<Scalar>& net) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, sizeof(Scalar));
  put_string(os, net.arch());
  put_string(os, net.tap());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(net.parameters().size()));
  for (const auto& p : net.parameters()) {
    put_string(os, p.name);
    put<std::uint8_t>(os, p.trainable ? 1 : 0);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (Index e : p.value.shape()) put<std::int64_t>(os, e);
    os.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(sizeof(Scalar) * p.value.size()));
  }
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

std::uint32_t checkpoint_scalar_width(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint: '" + path + "' is not a checkpoint file");
  }
  get<std::uint32_t>(is, path);
  return get<std::uint32_t>(is, path);
}

template <typename Scalar>
Network<Scalar> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint: '" + path + "' is not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto width = get<std::uint32_t>(is, path);
  if (width != 4 && width != 8) throw IoError("checkpoint: unsupported scalar width " + std::to_string(width));
  Network<Scalar> net = build_from_arch<Scalar>(get_string(is, path));
  net.set_tap(get_string(is, path));
  const auto count = get<std::uint32_t>(is, path);
  if (count != net.parameters().size()) throw IoError("checkpoint: parameter count does not match architecture");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto& p = net.parameter(get_string(is, path));
    p.trainable = get<std::uint8_t>(is, path) != 0;
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(get<std::int64_t>(is, path));
    if (shape != p.value.shape()) throw IoError("checkpoint: shape mismatch for parameter " + p.name);
    typename Tensor<Scalar>::Array values(shape_size(shape));
    if (width == sizeof(Scalar)) {
      if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(sizeof(Scalar) * values.size()))) {
        throw IoError("checkpoint: truncated file " + path);
      }
    } else if (width == 4) {
      for (Index k = 0; k < values.size(); ++k) values(k) = static_cast<Scalar>(get<float>(is, path));
    } else {
      for (Index k = 0; k < values.size(); ++k) values(k) = static_cast<Scalar>(get<double>(is, path));
    }
    p.value = Tensor<Scalar>(shape, std::move(values));
  }
  return net;
}

template class Network<float>;
template class Network<double>;

#define ULE_INSTANTIATE_NETWORK(S)                                                                  \
  template Network<S> build_poc_cnn<S>(Index);                                                      \
  template Network<S> build_mlp<S>(Index, const std::vector<Index>&, Index, const Shape&);          \
  template Network<S> build_from_arch<S>(const std::string&);                                       \
  template void init_params<S>(Network<S>&, std::uint64_t);                                         \
  template void save_checkpoint<S>(const std::string&, const Network<S>&);                          \
  template Network<S> load_checkpoint<S>(const std::string&);

ULE_INSTANTIATE_NETWORK(float)
ULE_INSTANTIATE_NETWORK(double)

#undef ULE_INSTANTIATE_NETWORK

}  // namespace ule
