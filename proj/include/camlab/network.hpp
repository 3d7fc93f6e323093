#pragma once

#include "camlab/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace camlab {

enum class LayerKind {
  Conv2d,
  DepthwiseConv2d,
  AffineChannel,
  Relu,
  Silu,
  MaxPool,
  AvgPool,
  GlobalAvgPool,
  FullyConnected,
  ResidualAdd,
};

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view token);

bool is_convolution(LayerKind kind);
bool has_parameters(LayerKind kind);

/// One layer of a linear chain. Hyperparameters not used by `kind` stay at zero.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Relu;
  std::size_t in_channels = 0;   // conv2d, fully-connected (flattened features)
  std::size_t out_channels = 0;  // conv2d, fully-connected
  std::size_t channels = 0;      // depthwise-conv2d, affine-channel
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::string source;  // residual-add

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::size_t input_channels = 0;
  std::size_t input_height = 0;
  std::size_t input_width = 0;
  std::vector<LayerSpec> layers;
  std::size_t class_count = 0;

  Shape input_shape(std::size_t batch = 1) const {
    return {batch, input_channels, input_height, input_width};
  }
  std::optional<std::size_t> index_of(std::string_view name) const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Output shape of every layer for a batch of one; throws ValidationError naming the
/// first inconsistent layer.
std::vector<Shape> infer_shapes(const NetworkSpec& spec);

struct ParamArray {
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t expected_size() const;
  friend bool operator==(const ParamArray&, const ParamArray&) = default;
};

/// Flat parameter arrays keyed "<layer>.<param>", e.g. "conv1.weight", "conv1.bias".
using WeightStore = std::map<std::string, ParamArray>;

std::string param_key(std::string_view layer, std::string_view param);

/// Declared parameter shapes for one layer, by parameter name.
std::map<std::string, std::vector<std::uint32_t>> expected_params(const LayerSpec& layer);

/// Validated, immutable pairing of a spec with its weights.
class Network {
 public:
  /// Throws ValidationError on a broken shape chain, missing/superfluous weights or a
  /// weight whose shape disagrees with the spec.
  Network(NetworkSpec spec, WeightStore weights);

  const NetworkSpec& spec() const { return spec_; }
  const WeightStore& weights() const { return weights_; }
  const std::vector<Shape>& layer_shapes() const { return shapes_; }
  const ParamArray& param(std::size_t layer, std::string_view name) const;
  std::size_t layer_index(std::string_view name) const;

 private:
  NetworkSpec spec_;
  WeightStore weights_;
  std::vector<Shape> shapes_;
};

NetworkSpec parse_network_spec(std::string_view text);
std::string format_network_spec(const NetworkSpec& spec);

WeightStore decode_weights(std::string_view bytes);
std::string encode_weights(const WeightStore& weights);

Network load_network(const std::filesystem::path& spec_path,
                     const std::filesystem::path& weights_path);
void save_network(const Network& net, const std::filesystem::path& spec_path,
                  const std::filesystem::path& weights_path);

/// Hand-wired 2-class detector whose class-1 score rises with bright blobs.
/// `seed` applies at most 1% relative noise to every weight.
Network build_toy_detector(std::uint64_t seed, std::size_t height = 64, std::size_t width = 64);

}  // namespace camlab
