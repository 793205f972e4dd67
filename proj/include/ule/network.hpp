#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ule/tensor.hpp"

namespace ule {

enum class LayerKind { conv2d, relu, maxpool2d, flatten, dropout, linear };

struct LayerSpec {
  LayerKind kind;
  std::string name;
  Index in_channels = 0;  // conv2d
  Index out_channels = 0;
  Index kernel = 0;
  Index in_features = 0;  // linear
  Index out_features = 0;
  double drop_probability = 0.0;  // dropout
};

/// Name of the tap point that exposes the flattened network input.
inline constexpr const char* kInputTap = "input";

/// Layer stack with a named parameter store, a trainable mask and a tap point
/// whose activation A (batch x width) is exposed by every forward pass.
template <typename Scalar>
class Network {
 public:
  struct Parameter {
    std::string name;
    Tensor<Scalar> value;
    bool trainable = true;
    bool is_bias = false;
    Index fan_in = 0;
    bool feeds_relu = false;
  };

  struct Output {
    Tensor<Scalar> logits;  // (batch, classes)
    Tensor<Scalar> tap;     // (batch, tap width)
  };

  struct ForwardOptions {
    bool train = false;
    /// Make the tap a graph leaf when nothing upstream of it is graph-linked,
    /// so gradients with respect to a frozen feature extractor's output exist.
    bool tap_leaf = false;
  };

  Network() = default;
  /// Validates the shape chain against `input_shape` (per sample) and allocates zero parameters.
  Network(std::string arch, Shape input_shape, std::vector<LayerSpec> layers, std::string tap);

  Output forward(const Tensor<Scalar>& x, const ForwardOptions& options);
  Output forward(const Tensor<Scalar>& x, bool train) { return forward(x, ForwardOptions{train, false}); }

  const std::string& arch() const { return arch_; }
  const Shape& input_shape() const { return input_shape_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::string& tap() const { return tap_; }
  void set_tap(const std::string& layer_name);
  Index tap_width() const;
  Index num_classes() const { return num_classes_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;
  std::vector<std::string> trainable_names() const;
  std::vector<Tensor<Scalar>> trainable_tensors() const;

  void set_trainable(const std::string& name, bool trainable);
  /// Freeze every parameter except those of the final linear layer.
  void freeze_all_but_last();

  /// Trainable parameters become fresh graph leaves; frozen ones stay constant.
  void bind_for_training();
  /// Drops all graph linkage from the parameters.
  void release_graph();

  std::mt19937_64& dropout_rng() { return dropout_rng_; }
  void seed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

 private:
  std::string arch_;
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> layer_out_shapes_;
  std::string tap_;
  Index num_classes_ = 0;
  std::vector<Parameter> params_;
  std::mt19937_64 dropout_rng_{0};
};

/// Two 3x3 conv layers (32, 64 filters) with relu, 2x2 max pool, flatten,
/// dropout 0.25, linear 9216->128 + relu + dropout 0.5, linear 128->10.
/// The tap point is the flatten output.
template <typename Scalar>
Network<Scalar> build_poc_cnn(Index input_channels);

/// Linear+relu stack over a flat input of `input_dim` features; tap is the
/// last hidden layer (or the input when there are no hidden layers).
template <typename Scalar>
Network<Scalar> build_mlp(Index input_dim, const std::vector<Index>& hidden, Index classes,
                          const Shape& sample_shape = {});

/// Rebuilds a network from its architecture descriptor (as stored in checkpoints).
template <typename Scalar>
Network<Scalar> build_from_arch(const std::string& arch);

/// He-uniform for conv/linear feeding a relu, LeCun-uniform otherwise, zero
/// biases. Also seeds the dropout stream. Deterministic in `seed`.
template <typename Scalar>
void init_params(Network<Scalar>& net, std::uint64_t seed);

/// Flat binary container: magic, version, scalar width, architecture, tap,
/// then every named parameter tensor with its trainable flag.
template <typename Scalar>
void save_checkpoint(const std::string& path, const Network<Scalar>& net);
template <typename Scalar>
Network<Scalar> load_checkpoint(const std::string& path);
/// Bytes per stored parameter value (4 or 8).
std::uint32_t checkpoint_scalar_width(const std::string& path);

/// Uniform double in [0, 1) from 53 random bits; identical on every platform.
double unit_uniform(std::mt19937_64& rng);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace ule
