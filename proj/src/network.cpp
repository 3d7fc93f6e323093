#include "camlab/network.hpp"

#include "camlab/error.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <utility>

#include <fmt/core.h>

namespace camlab {
namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 10> kKindNames{{
    {LayerKind::Conv2d, "conv2d"},
    {LayerKind::DepthwiseConv2d, "depthwise-conv2d"},
    {LayerKind::AffineChannel, "affine-channel"},
    {LayerKind::Relu, "relu"},
    {LayerKind::Silu, "silu"},
    {LayerKind::MaxPool, "max-pool"},
    {LayerKind::AvgPool, "avg-pool"},
    {LayerKind::GlobalAvgPool, "global-avg-pool"},
    {LayerKind::FullyConnected, "fully-connected"},
    {LayerKind::ResidualAdd, "residual-add"},
}};

constexpr std::string_view kWeightMagic = "CAMW1\n";

std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                        const LayerSpec& layer) {
  if (kernel < 1 || stride < 1) {
    throw ValidationError(
        fmt::format("layer '{}': kernel and stride must be >= 1", layer.name));
  }
  if (in + 2 * padding < kernel) {
    throw ValidationError(fmt::format("layer '{}': kernel {} larger than padded input {}",
                                      layer.name, kernel, in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::size_t parse_size(std::string_view text, std::string_view what, std::size_t line) {
  std::size_t value = 0;
  std::string s(text);
  std::size_t consumed = 0;
  try {
    if (s.empty() || s.front() == '-') throw std::invalid_argument("negative");
    value = std::stoull(s, &consumed);
  } catch (const std::exception&) {
    consumed = 0;
  }
  if (consumed != s.size() || s.empty()) {
    throw ParseError(fmt::format("line {}: '{}' is not a non-negative integer for {}", line, text, what));
  }
  return value;
}

std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream ss{std::string(line)};
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

// Little-endian readers/writers over a byte buffer.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw ParseError("weight file truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return v;
  }

  double f64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return std::bit_cast<double>(v);
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
  auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::string dims_string(const std::vector<std::uint32_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s + "]";
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

std::optional<LayerKind> parse_layer_kind(std::string_view token) {
  for (const auto& [k, name] : kKindNames) {
    if (name == token) return k;
  }
  return std::nullopt;
}

bool is_convolution(LayerKind kind) {
  return kind == LayerKind::Conv2d || kind == LayerKind::DepthwiseConv2d;
}

bool has_parameters(LayerKind kind) {
  return kind == LayerKind::Conv2d || kind == LayerKind::DepthwiseConv2d ||
         kind == LayerKind::AffineChannel || kind == LayerKind::FullyConnected;
}

std::optional<std::size_t> NetworkSpec::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  return std::nullopt;
}

std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
  if (spec.input_channels == 0 || spec.input_height == 0 || spec.input_width == 0) {
    throw ValidationError("input shape must be positive");
  }
  if (spec.class_count == 0) throw ValidationError("class count must be positive");
  if (spec.layers.empty()) throw ValidationError("network has no layers");

  std::set<std::string> seen;
  std::vector<Shape> shapes;
  shapes.reserve(spec.layers.size());
  Shape cur = spec.input_shape();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.name.empty() || l.name == "input" || l.name == "classes") {
      throw ValidationError(fmt::format("layer {}: invalid name '{}'", i, l.name));
    }
    if (!seen.insert(l.name).second) {
      throw ValidationError(fmt::format("layer '{}': duplicate name", l.name));
    }
    Shape out = cur;
    switch (l.kind) {
      case LayerKind::Conv2d:
        if (l.in_channels != cur.c || l.out_channels == 0) {
          throw ValidationError(fmt::format("layer '{}': expects {} input channels, receives {}",
                                            l.name, l.in_channels, cur.c));
        }
        out.c = l.out_channels;
        out.h = conv_extent(cur.h, l.kernel, l.stride, l.padding, l);
        out.w = conv_extent(cur.w, l.kernel, l.stride, l.padding, l);
        break;
      case LayerKind::DepthwiseConv2d:
        if (l.channels != cur.c) {
          throw ValidationError(fmt::format("layer '{}': expects {} channels, receives {}", l.name,
                                            l.channels, cur.c));
        }
        out.h = conv_extent(cur.h, l.kernel, l.stride, l.padding, l);
        out.w = conv_extent(cur.w, l.kernel, l.stride, l.padding, l);
        break;
      case LayerKind::AffineChannel:
        if (l.channels != cur.c) {
          throw ValidationError(fmt::format("layer '{}': expects {} channels, receives {}", l.name,
                                            l.channels, cur.c));
        }
        break;
      case LayerKind::Relu:
      case LayerKind::Silu:
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        if (l.padding >= l.kernel && l.kernel > 0) {
          throw ValidationError(fmt::format("layer '{}': padding must be smaller than kernel", l.name));
        }
        out.h = conv_extent(cur.h, l.kernel, l.stride, l.padding, l);
        out.w = conv_extent(cur.w, l.kernel, l.stride, l.padding, l);
        break;
      case LayerKind::GlobalAvgPool:
        out.h = 1;
        out.w = 1;
        break;
      case LayerKind::FullyConnected:
        if (l.in_channels != cur.sample() || l.out_channels == 0) {
          throw ValidationError(fmt::format("layer '{}': expects {} input features, receives {}",
                                            l.name, l.in_channels, cur.sample()));
        }
        out = {1, l.out_channels, 1, 1};
        break;
      case LayerKind::ResidualAdd: {
        auto src = spec.index_of(l.source);
        if (!src || *src >= i) {
          throw ValidationError(fmt::format("layer '{}': residual source '{}' is not an earlier layer",
                                            l.name, l.source));
        }
        if (shapes[*src] != cur) {
          throw ValidationError(fmt::format("layer '{}': residual source '{}' has shape {}, input is {}",
                                            l.name, l.source, to_string(shapes[*src]),
                                            to_string(cur)));
        }
        break;
      }
    }
    shapes.push_back(out);
    cur = out;
  }
  if (cur != Shape{1, spec.class_count, 1, 1}) {
    throw ValidationError(fmt::format("network output {} is not a vector of {} classes",
                                      to_string(cur), spec.class_count));
  }
  return shapes;
}

std::size_t ParamArray::expected_size() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string param_key(std::string_view layer, std::string_view param) {
  return fmt::format("{}.{}", layer, param);
}

std::map<std::string, std::vector<std::uint32_t>> expected_params(const LayerSpec& l) {
  auto u = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
  switch (l.kind) {
    case LayerKind::Conv2d:
      return {{"weight", {u(l.out_channels), u(l.in_channels), u(l.kernel), u(l.kernel)}},
              {"bias", {u(l.out_channels)}}};
    case LayerKind::DepthwiseConv2d:
      return {{"weight", {u(l.channels), 1, u(l.kernel), u(l.kernel)}}, {"bias", {u(l.channels)}}};
    case LayerKind::AffineChannel:
      return {{"scale", {u(l.channels)}}, {"shift", {u(l.channels)}}};
    case LayerKind::FullyConnected:
      return {{"weight", {u(l.out_channels), u(l.in_channels)}}, {"bias", {u(l.out_channels)}}};
    default:
      return {};
  }
}

Network::Network(NetworkSpec spec, WeightStore weights)
    : spec_(std::move(spec)), weights_(std::move(weights)) {
  shapes_ = infer_shapes(spec_);
  std::set<std::string> expected_keys;
  for (const auto& layer : spec_.layers) {
    for (const auto& [pname, dims] : expected_params(layer)) {
      auto key = param_key(layer.name, pname);
      expected_keys.insert(key);
      auto it = weights_.find(key);
      if (it == weights_.end()) {
        throw ValidationError(fmt::format("layer '{}': missing weight entry '{}'", layer.name, key));
      }
      if (it->second.dims != dims) {
        throw ValidationError(fmt::format("layer '{}': weight '{}' has shape {}, spec requires {}",
                                          layer.name, key, dims_string(it->second.dims),
                                          dims_string(dims)));
      }
      if (it->second.values.size() != it->second.expected_size()) {
        throw ValidationError(fmt::format("layer '{}': weight '{}' payload length mismatch",
                                          layer.name, key));
      }
      const auto& vals = it->second.values;
      if (!std::all_of(vals.begin(), vals.end(), [](double v) { return std::isfinite(v); })) {
        throw ValidationError(fmt::format("layer '{}': weight '{}' contains non-finite values",
                                          layer.name, key));
      }
    }
  }
  for (const auto& [key, _] : weights_) {
    if (!expected_keys.contains(key)) {
      throw ValidationError(fmt::format("superfluous weight entry '{}'", key));
    }
  }
}

const ParamArray& Network::param(std::size_t layer, std::string_view name) const {
  return weights_.at(param_key(spec_.layers.at(layer).name, name));
}

std::size_t Network::layer_index(std::string_view name) const {
  auto idx = spec_.index_of(name);
  if (!idx) throw UsageError(fmt::format("unknown layer '{}'", name));
  return *idx;
}

NetworkSpec parse_network_spec(std::string_view text) {
  NetworkSpec spec;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  bool have_input = false;
  bool have_classes = false;
  while (std::getline(in, raw)) {
    ++lineno;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    auto tok = split_ws(raw);
    if (tok.empty()) continue;
    if (have_classes) throw ParseError(fmt::format("line {}: content after 'classes'", lineno));
    if (!have_input) {
      if (tok.size() != 4 || tok[0] != "input") {
        throw ParseError(fmt::format("line {}: expected 'input C H W'", lineno));
      }
      spec.input_channels = parse_size(tok[1], "input channels", lineno);
      spec.input_height = parse_size(tok[2], "input height", lineno);
      spec.input_width = parse_size(tok[3], "input width", lineno);
      have_input = true;
      continue;
    }
    if (tok[0] == "classes") {
      if (tok.size() != 2) throw ParseError(fmt::format("line {}: expected 'classes N'", lineno));
      spec.class_count = parse_size(tok[1], "class count", lineno);
      have_classes = true;
      continue;
    }
    if (tok.size() < 2) throw ParseError(fmt::format("line {}: expected 'name kind ...'", lineno));
    LayerSpec layer;
    layer.name = tok[0];
    auto kind = parse_layer_kind(tok[1]);
    if (!kind) throw ParseError(fmt::format("line {}: unknown layer kind '{}'", lineno, tok[1]));
    layer.kind = *kind;
    bool stride_given = false;
    for (std::size_t i = 2; i < tok.size(); ++i) {
      auto eq = tok[i].find('=');
      if (eq == std::string::npos) {
        throw ParseError(fmt::format("line {}: expected key=value, got '{}'", lineno, tok[i]));
      }
      std::string key = tok[i].substr(0, eq);
      std::string value = tok[i].substr(eq + 1);
      if (key == "source") {
        layer.source = value;
      } else if (key == "in") {
        layer.in_channels = parse_size(value, key, lineno);
      } else if (key == "out") {
        layer.out_channels = parse_size(value, key, lineno);
      } else if (key == "channels") {
        layer.channels = parse_size(value, key, lineno);
      } else if (key == "kernel") {
        layer.kernel = parse_size(value, key, lineno);
      } else if (key == "stride") {
        layer.stride = parse_size(value, key, lineno);
        stride_given = true;
      } else if (key == "padding") {
        layer.padding = parse_size(value, key, lineno);
      } else {
        throw ParseError(fmt::format("line {}: unknown key '{}'", lineno, key));
      }
    }
    if ((layer.kind == LayerKind::MaxPool || layer.kind == LayerKind::AvgPool) && !stride_given) {
      layer.stride = layer.kernel;
    }
    spec.layers.push_back(std::move(layer));
  }
  if (!have_input) throw ParseError("missing 'input C H W' line");
  if (!have_classes) throw ParseError("missing trailing 'classes N' line");
  return spec;
}

std::string format_network_spec(const NetworkSpec& spec) {
  std::string out = fmt::format("input {} {} {}\n", spec.input_channels, spec.input_height,
                                spec.input_width);
  for (const auto& l : spec.layers) {
    out += fmt::format("{} {}", l.name, to_string(l.kind));
    switch (l.kind) {
      case LayerKind::Conv2d:
        out += fmt::format(" in={} out={} kernel={} stride={} padding={}", l.in_channels,
                           l.out_channels, l.kernel, l.stride, l.padding);
        break;
      case LayerKind::DepthwiseConv2d:
        out += fmt::format(" channels={} kernel={} stride={} padding={}", l.channels, l.kernel,
                           l.stride, l.padding);
        break;
      case LayerKind::AffineChannel:
        out += fmt::format(" channels={}", l.channels);
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        out += fmt::format(" kernel={} stride={} padding={}", l.kernel, l.stride, l.padding);
        break;
      case LayerKind::FullyConnected:
        out += fmt::format(" in={} out={}", l.in_channels, l.out_channels);
        break;
      case LayerKind::ResidualAdd:
        out += fmt::format(" source={}", l.source);
        break;
      default:
        break;
    }
    out += "\n";
  }
  out += fmt::format("classes {}\n", spec.class_count);
  return out;
}

WeightStore decode_weights(std::string_view bytes) {
  if (!bytes.starts_with(kWeightMagic)) throw ParseError("weight file lacks CAMW1 magic");
  ByteReader r(bytes.substr(kWeightMagic.size()));
  WeightStore store;
  while (!r.done()) {
    std::uint32_t name_len = r.u32();
    std::string name(r.take(name_len));
    std::uint32_t rank = r.u32();
    ParamArray p;
    p.dims.reserve(rank);
    for (std::uint32_t i = 0; i < rank; ++i) p.dims.push_back(r.u32());
    std::size_t n = p.expected_size();
    if (n > bytes.size() / 8) throw ParseError(fmt::format("record '{}' exceeds file size", name));
    p.values.resize(n);
    for (auto& v : p.values) v = r.f64();
    if (!store.emplace(name, std::move(p)).second) {
      throw ParseError(fmt::format("duplicate weight record '{}'", name));
    }
  }
  return store;
}

std::string encode_weights(const WeightStore& weights) {
  std::string out(kWeightMagic);
  for (const auto& [name, p] : weights) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(p.dims.size()));
    for (auto d : p.dims) put_u32(out, d);
    for (double v : p.values) put_f64(out, v);
  }
  return out;
}

Network load_network(const std::filesystem::path& spec_path,
                     const std::filesystem::path& weights_path) {
  auto spec = parse_network_spec(read_file(spec_path));
  auto weights = decode_weights(read_file(weights_path));
  return Network(std::move(spec), std::move(weights));
}

void save_network(const Network& net, const std::filesystem::path& spec_path,
                  const std::filesystem::path& weights_path) {
  write_file(spec_path, format_network_spec(net.spec()));
  write_file(weights_path, encode_weights(net.weights()));
}

}  // namespace camlab
