#include "camlab/engine.hpp"

#include "camlab/error.hpp"

#include <cmath>
#include <limits>

#include <fmt/core.h>

namespace camlab {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Shape with_batch(Shape s, std::size_t n) {
  s.n = n;
  return s;
}

struct Window {
  std::size_t kernel;
  std::size_t stride;
  std::size_t padding;

  // Input coordinate for output index o and kernel tap k; false when it falls in padding.
  bool source(std::size_t o, std::size_t k, std::size_t extent, std::size_t& i) const {
    std::size_t pos = o * stride + k;
    if (pos < padding) return false;
    i = pos - padding;
    return i < extent;
  }
};

Window window_of(const LayerSpec& l) { return {l.kernel, l.stride, l.padding}; }

Tensor conv_forward(const Tensor& x, const Shape& out_shape, const LayerSpec& l,
                    const ParamArray& weight, const ParamArray& bias, bool depthwise) {
  const Shape& in = x.shape();
  Tensor y(out_shape);
  const Window win = window_of(l);
  const std::size_t k = l.kernel;
  const std::size_t cin_per_group = depthwise ? 1 : in.c;
  for (std::size_t n = 0; n < out_shape.n; ++n) {
    for (std::size_t co = 0; co < out_shape.c; ++co) {
      const double* wk = weight.values.data() + co * cin_per_group * k * k;
      for (std::size_t oy = 0; oy < out_shape.h; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
          double acc = bias.values[co];
          for (std::size_t g = 0; g < cin_per_group; ++g) {
            const std::size_t ci = depthwise ? co : g;
            for (std::size_t ky = 0; ky < k; ++ky) {
              std::size_t iy = 0;
              if (!win.source(oy, ky, in.h, iy)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t ix = 0;
                if (!win.source(ox, kx, in.w, ix)) continue;
                acc += wk[(g * k + ky) * k + kx] * x(n, ci, iy, ix);
              }
            }
          }
          y(n, co, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

Tensor conv_backward(const Tensor& gy, const Shape& in_shape, const LayerSpec& l,
                     const ParamArray& weight, bool depthwise) {
  Tensor gx(in_shape);
  const Shape& out = gy.shape();
  const Window win = window_of(l);
  const std::size_t k = l.kernel;
  const std::size_t cin_per_group = depthwise ? 1 : in_shape.c;
  for (std::size_t n = 0; n < out.n; ++n) {
    for (std::size_t co = 0; co < out.c; ++co) {
      const double* wk = weight.values.data() + co * cin_per_group * k * k;
      for (std::size_t oy = 0; oy < out.h; ++oy) {
        for (std::size_t ox = 0; ox < out.w; ++ox) {
          const double g = gy(n, co, oy, ox);
          if (g == 0.0) continue;
          for (std::size_t gi = 0; gi < cin_per_group; ++gi) {
            const std::size_t ci = depthwise ? co : gi;
            for (std::size_t ky = 0; ky < k; ++ky) {
              std::size_t iy = 0;
              if (!win.source(oy, ky, in_shape.h, iy)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t ix = 0;
                if (!win.source(ox, kx, in_shape.w, ix)) continue;
                gx(n, ci, iy, ix) += wk[(gi * k + ky) * k + kx] * g;
              }
            }
          }
        }
      }
    }
  }
  return gx;
}

// Flat input index of the first maximal element of a max-pool window (scan order), or npos
// when the window lies entirely in padding.
std::size_t argmax_window(const Tensor& x, std::size_t n, std::size_t c, std::size_t oy,
                          std::size_t ox, const Window& win) {
  const Shape& s = x.shape();
  std::size_t best = std::numeric_limits<std::size_t>::max();
  double best_value = -std::numeric_limits<double>::infinity();
  for (std::size_t ky = 0; ky < win.kernel; ++ky) {
    std::size_t iy = 0;
    if (!win.source(oy, ky, s.h, iy)) continue;
    for (std::size_t kx = 0; kx < win.kernel; ++kx) {
      std::size_t ix = 0;
      if (!win.source(ox, kx, s.w, ix)) continue;
      const double v = x(n, c, iy, ix);
      if (best == std::numeric_limits<std::size_t>::max() || v > best_value) {
        best = x.index(n, c, iy, ix);
        best_value = v;
      }
    }
  }
  return best;
}

Tensor pool_forward(const Tensor& x, const Shape& out_shape, const LayerSpec& l) {
  Tensor y(out_shape);
  const Window win = window_of(l);
  const double area = static_cast<double>(l.kernel * l.kernel);
  const Shape& in = x.shape();
  for (std::size_t n = 0; n < out_shape.n; ++n) {
    for (std::size_t c = 0; c < out_shape.c; ++c) {
      for (std::size_t oy = 0; oy < out_shape.h; ++oy) {
        for (std::size_t ox = 0; ox < out_shape.w; ++ox) {
          if (l.kind == LayerKind::MaxPool) {
            y(n, c, oy, ox) = x.data()[argmax_window(x, n, c, oy, ox, win)];
            continue;
          }
          double acc = 0.0;
          for (std::size_t ky = 0; ky < l.kernel; ++ky) {
            std::size_t iy = 0;
            if (!win.source(oy, ky, in.h, iy)) continue;
            for (std::size_t kx = 0; kx < l.kernel; ++kx) {
              std::size_t ix = 0;
              if (!win.source(ox, kx, in.w, ix)) continue;
              acc += x(n, c, iy, ix);
            }
          }
          y(n, c, oy, ox) = acc / area;
        }
      }
    }
  }
  return y;
}

Tensor pool_backward(const Tensor& x, const Tensor& gy, const LayerSpec& l) {
  const Shape& in = x.shape();
  const Shape& out = gy.shape();
  Tensor gx(in);
  const Window win = window_of(l);
  const double area = static_cast<double>(l.kernel * l.kernel);
  for (std::size_t n = 0; n < out.n; ++n) {
    for (std::size_t c = 0; c < out.c; ++c) {
      for (std::size_t oy = 0; oy < out.h; ++oy) {
        for (std::size_t ox = 0; ox < out.w; ++ox) {
          const double g = gy(n, c, oy, ox);
          if (l.kind == LayerKind::MaxPool) {
            gx.data()[argmax_window(x, n, c, oy, ox, win)] += g;
            continue;
          }
          for (std::size_t ky = 0; ky < l.kernel; ++ky) {
            std::size_t iy = 0;
            if (!win.source(oy, ky, in.h, iy)) continue;
            for (std::size_t kx = 0; kx < l.kernel; ++kx) {
              std::size_t ix = 0;
              if (!win.source(ox, kx, in.w, ix)) continue;
              gx(n, c, iy, ix) += g / area;
            }
          }
        }
      }
    }
  }
  return gx;
}

Tensor fc_forward(const Tensor& x, const Shape& out_shape, const ParamArray& weight,
                  const ParamArray& bias) {
  Tensor y(out_shape);
  const std::size_t in_features = x.shape().sample();
  for (std::size_t n = 0; n < out_shape.n; ++n) {
    auto xs = x.sample(n);
    for (std::size_t o = 0; o < out_shape.c; ++o) {
      const double* row = weight.values.data() + o * in_features;
      double acc = bias.values[o];
      for (std::size_t i = 0; i < in_features; ++i) acc += row[i] * xs[i];
      y(n, o, 0, 0) = acc;
    }
  }
  return y;
}

Tensor fc_backward(const Tensor& gy, const Shape& in_shape, const ParamArray& weight) {
  Tensor gx(in_shape);
  const std::size_t in_features = in_shape.sample();
  for (std::size_t n = 0; n < in_shape.n; ++n) {
    auto gs = gx.sample(n);
    for (std::size_t o = 0; o < gy.shape().c; ++o) {
      const double g = gy(n, o, 0, 0);
      const double* row = weight.values.data() + o * in_features;
      for (std::size_t i = 0; i < in_features; ++i) gs[i] += row[i] * g;
    }
  }
  return gx;
}

class Executor {
 public:
  explicit Executor(const Network& net) : net_(net), spec_(net.spec()) {}

  // Output of layer i given its input; `outputs` supplies residual sources.
  Tensor run(std::size_t i, const Tensor& x, const std::vector<const Tensor*>& outputs) const {
    const LayerSpec& l = spec_.layers[i];
    const Shape out_shape = with_batch(net_.layer_shapes()[i], x.shape().n);
    switch (l.kind) {
      case LayerKind::Conv2d:
        return conv_forward(x, out_shape, l, net_.param(i, "weight"), net_.param(i, "bias"), false);
      case LayerKind::DepthwiseConv2d:
        return conv_forward(x, out_shape, l, net_.param(i, "weight"), net_.param(i, "bias"), true);
      case LayerKind::AffineChannel: {
        Tensor y = x;
        const auto& scale = net_.param(i, "scale").values;
        const auto& shift = net_.param(i, "shift").values;
        for (std::size_t n = 0; n < out_shape.n; ++n) {
          for (std::size_t c = 0; c < out_shape.c; ++c) {
            y.channel(n, c) = x.channel(n, c) * scale[c] + shift[c];
          }
        }
        return y;
      }
      case LayerKind::Relu: {
        Tensor y = x;
        for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
        return y;
      }
      case LayerKind::Silu: {
        Tensor y = x;
        for (double& v : y.data()) v = v * sigmoid(v);
        return y;
      }
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        return pool_forward(x, out_shape, l);
      case LayerKind::GlobalAvgPool: {
        Tensor y(out_shape);
        for (std::size_t n = 0; n < out_shape.n; ++n) {
          for (std::size_t c = 0; c < out_shape.c; ++c) y(n, c, 0, 0) = x.channel(n, c).mean();
        }
        return y;
      }
      case LayerKind::FullyConnected:
        return fc_forward(x, out_shape, net_.param(i, "weight"), net_.param(i, "bias"));
      case LayerKind::ResidualAdd: {
        const Tensor& src = *outputs[*spec_.index_of(l.source)];
        Tensor y = x;
        const std::size_t per = src.shape().sample();
        const bool broadcast = src.shape().n == 1 && x.shape().n > 1;
        if (!broadcast && src.shape().n != x.shape().n) {
          throw ShapeError(fmt::format("layer '{}': residual batch mismatch", l.name));
        }
        auto out = y.data();
        auto s = src.data();
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += s[broadcast ? j % per : j];
        return y;
      }
    }
    throw Error("unreachable layer kind");
  }

  // Gradient w.r.t. the input of layer i; residual contributions go to `source_grad`.
  Tensor back(std::size_t i, const Tensor& x, const Tensor& gy, Tensor* source_grad) const {
    const LayerSpec& l = spec_.layers[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
        return conv_backward(gy, x.shape(), l, net_.param(i, "weight"), false);
      case LayerKind::DepthwiseConv2d:
        return conv_backward(gy, x.shape(), l, net_.param(i, "weight"), true);
      case LayerKind::AffineChannel: {
        Tensor gx = gy;
        const auto& scale = net_.param(i, "scale").values;
        for (std::size_t n = 0; n < gx.shape().n; ++n) {
          for (std::size_t c = 0; c < gx.shape().c; ++c) gx.channel(n, c) *= scale[c];
        }
        return gx;
      }
      case LayerKind::Relu: {
        Tensor gx = gy;
        auto xs = x.data();
        auto gs = gx.data();
        for (std::size_t j = 0; j < gs.size(); ++j) {
          if (!(xs[j] > 0.0)) gs[j] = 0.0;
        }
        return gx;
      }
      case LayerKind::Silu: {
        Tensor gx = gy;
        auto xs = x.data();
        auto gs = gx.data();
        for (std::size_t j = 0; j < gs.size(); ++j) {
          const double s = sigmoid(xs[j]);
          gs[j] *= s + xs[j] * s * (1.0 - s);
        }
        return gx;
      }
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        return pool_backward(x, gy, l);
      case LayerKind::GlobalAvgPool: {
        Tensor gx(x.shape());
        const double inv = 1.0 / static_cast<double>(x.shape().plane());
        for (std::size_t n = 0; n < x.shape().n; ++n) {
          for (std::size_t c = 0; c < x.shape().c; ++c) gx.channel(n, c).setConstant(gy(n, c, 0, 0) * inv);
        }
        return gx;
      }
      case LayerKind::FullyConnected:
        return fc_backward(gy, x.shape(), net_.param(i, "weight"));
      case LayerKind::ResidualAdd: {
        auto sg = source_grad->data();
        auto g = gy.data();
        for (std::size_t j = 0; j < sg.size(); ++j) sg[j] += g[j];
        return gy;
      }
    }
    throw Error("unreachable layer kind");
  }

 private:
  const Network& net_;
  const NetworkSpec& spec_;
};

}  // namespace

const Tensor& ForwardTrace::activation(std::string_view layer, const Network& net) const {
  if (!recorded.contains(std::string(layer))) {
    throw UsageError(fmt::format("layer '{}' was not recorded", layer));
  }
  return outputs.at(net.layer_index(layer));
}

ForwardTrace forward(const Network& net, const Tensor& input, std::span<const std::string> record,
                     std::size_t target_class) {
  const Shape expected = net.spec().input_shape(input.shape().n);
  if (input.shape().n == 0 || input.shape() != expected) {
    throw ShapeError(fmt::format("input shape {} does not match network input {}",
                                 to_string(input.shape()), to_string(expected)));
  }
  ForwardTrace trace;
  for (const auto& name : record) {
    net.layer_index(name);
    trace.recorded.insert(name);
  }
  trace.input = input;
  trace.target_class = target_class;

  Executor exec(net);
  const std::size_t count = net.spec().layers.size();
  trace.outputs.reserve(count);
  std::vector<const Tensor*> ptrs(count, nullptr);
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor& x = i == 0 ? trace.input : trace.outputs[i - 1];
    trace.outputs.push_back(exec.run(i, x, ptrs));
    ptrs[i] = &trace.outputs.back();
  }
  const Tensor& last = trace.outputs.back();
  trace.logits.resize(static_cast<Eigen::Index>(last.shape().n),
                      static_cast<Eigen::Index>(last.shape().c));
  for (std::size_t n = 0; n < last.shape().n; ++n) {
    for (std::size_t c = 0; c < last.shape().c; ++c) {
      trace.logits(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c)) = last(n, c, 0, 0);
    }
  }
  return trace;
}

Tensor gradients_at(const ForwardTrace& trace, const Network& net, std::string_view layer,
                    std::size_t class_index) {
  if (!trace.recorded.contains(std::string(layer))) {
    throw UsageError(fmt::format("layer '{}' was not recorded", layer));
  }
  if (class_index >= net.spec().class_count) {
    throw UsageError(fmt::format("class index {} out of range", class_index));
  }
  const std::size_t target = net.layer_index(layer);
  const std::size_t count = net.spec().layers.size();

  // grads[i] accumulates d(score)/d(output of layer i).
  std::vector<Tensor> grads;
  grads.reserve(count);
  for (const auto& out : trace.outputs) grads.emplace_back(out.shape());
  Tensor& head = grads.back();
  for (std::size_t n = 0; n < head.shape().n; ++n) head(n, class_index, 0, 0) = 1.0;

  Executor exec(net);
  for (std::size_t i = count - 1; i > target; --i) {
    const LayerSpec& l = net.spec().layers[i];
    Tensor* source_grad = nullptr;
    if (l.kind == LayerKind::ResidualAdd) source_grad = &grads[*net.spec().index_of(l.source)];
    Tensor gx = exec.back(i, trace.outputs[i - 1], grads[i], source_grad);
    auto dst = grads[i - 1].data();
    auto src = gx.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  return std::move(grads[target]);
}

Eigen::MatrixXd replay_from(const Network& net, const ForwardTrace& trace, std::string_view layer,
                            const Tensor& replacement) {
  const std::size_t target = net.layer_index(layer);
  const Shape expected = with_batch(net.layer_shapes()[target], replacement.shape().n);
  if (replacement.shape() != expected) {
    throw ShapeError(fmt::format("replacement shape {} does not match layer '{}' output {}",
                                 to_string(replacement.shape()), layer, to_string(expected)));
  }
  const std::size_t count = net.spec().layers.size();
  std::vector<Tensor> fresh(count);
  std::vector<const Tensor*> ptrs(count, nullptr);
  for (std::size_t i = 0; i < target; ++i) ptrs[i] = &trace.outputs[i];
  ptrs[target] = &replacement;

  Executor exec(net);
  for (std::size_t i = target + 1; i < count; ++i) {
    fresh[i] = exec.run(i, *ptrs[i - 1], ptrs);
    ptrs[i] = &fresh[i];
  }
  const Tensor& last = *ptrs[count - 1];
  Eigen::MatrixXd logits(static_cast<Eigen::Index>(last.shape().n),
                         static_cast<Eigen::Index>(last.shape().c));
  for (std::size_t n = 0; n < last.shape().n; ++n) {
    for (std::size_t c = 0; c < last.shape().c; ++c) {
      logits(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c)) = last(n, c, 0, 0);
    }
  }
  return logits;
}

}  // namespace camlab
