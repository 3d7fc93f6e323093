#include "camlab/network.hpp"
#include "camlab/random.hpp"

namespace camlab {
namespace {

LayerSpec conv(std::string name, std::size_t in, std::size_t out, std::size_t stride) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::Conv2d;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = 3;
  l.stride = stride;
  l.padding = 1;
  return l;
}

LayerSpec simple(std::string name, LayerKind kind) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = kind;
  return l;
}

// Sets the 3x3 kernel (out, in) of a conv weight laid out [out][in][3][3].
void fill_kernel(ParamArray& w, std::size_t in_count, std::size_t out, std::size_t in, double value,
                 bool center_only = false) {
  double* k = w.values.data() + (out * in_count + in) * 9;
  for (std::size_t i = 0; i < 9; ++i) {
    if (!center_only || i == 4) k[i] += value;
  }
}

ParamArray zeros(std::vector<std::uint32_t> dims) {
  ParamArray p;
  p.dims = std::move(dims);
  p.values.assign(p.expected_size(), 0.0);
  return p;
}

}  // namespace

Network build_toy_detector(std::uint64_t seed, std::size_t height, std::size_t width) {
  NetworkSpec spec;
  spec.input_channels = 1;
  spec.input_height = height;
  spec.input_width = width;
  spec.class_count = 2;
  spec.layers = {
      conv("conv1", 1, 4, 1),   simple("relu1", LayerKind::Relu),
      conv("conv2", 4, 8, 2),   simple("relu2", LayerKind::Relu),
      conv("conv3", 8, 8, 1),   simple("relu3", LayerKind::Relu),
      simple("gap", LayerKind::GlobalAvgPool),
  };
  LayerSpec fc = simple("fc", LayerKind::FullyConnected);
  fc.in_channels = 8;
  fc.out_channels = 2;
  spec.layers.push_back(fc);

  WeightStore w;

  // conv1: four bright-region detectors on the windowed [0,1] input. Three averaging
  // kernels at rising intensity cuts and one centre tap.
  auto c1w = zeros({4, 1, 3, 3});
  auto c1b = zeros({4});
  fill_kernel(c1w, 1, 0, 0, 1.0 / 9.0);
  fill_kernel(c1w, 1, 1, 0, 1.0 / 9.0);
  fill_kernel(c1w, 1, 2, 0, 1.0, /*center_only=*/true);
  fill_kernel(c1w, 1, 3, 0, 1.0 / 9.0);
  c1b.values = {-0.45, -0.6, -0.5, -0.75};

  // conv2: each output pools one detector plus half of its neighbour.
  auto c2w = zeros({8, 4, 3, 3});
  auto c2b = zeros({8});
  for (std::size_t j = 0; j < 8; ++j) {
    fill_kernel(c2w, 4, j, j % 4, 1.0 / 9.0);
    fill_kernel(c2w, 4, j, (j + 1) % 4, 0.5 / 9.0);
    c2b.values[j] = j < 4 ? 0.0 : -0.02;
  }

  auto c3w = zeros({8, 8, 3, 3});
  auto c3b = zeros({8});
  for (std::size_t j = 0; j < 8; ++j) {
    fill_kernel(c3w, 8, j, j, 1.0 / 9.0);
    fill_kernel(c3w, 8, j, (j + 3) % 8, 0.25 / 9.0);
  }

  auto fcw = zeros({2, 8});
  auto fcb = zeros({2});
  for (std::size_t j = 0; j < 8; ++j) {
    fcw.values[j] = -0.5;                                      // class 0
    fcw.values[8 + j] = 1.0 + 0.1 * static_cast<double>(j);    // class 1
  }
  fcb.values = {0.5, -0.1};

  w.emplace("conv1.weight", std::move(c1w));
  w.emplace("conv1.bias", std::move(c1b));
  w.emplace("conv2.weight", std::move(c2w));
  w.emplace("conv2.bias", std::move(c2b));
  w.emplace("conv3.weight", std::move(c3w));
  w.emplace("conv3.bias", std::move(c3b));
  w.emplace("fc.weight", std::move(fcw));
  w.emplace("fc.bias", std::move(fcb));

  // Map iteration order is fixed, so the noise stream is a pure function of the seed.
  Rng rng(seed);
  for (auto& [_, p] : w) {
    for (double& v : p.values) v *= 1.0 + 0.01 * rng.uniform(-1.0, 1.0);
  }
  return Network(std::move(spec), std::move(w));
}

}  // namespace camlab
