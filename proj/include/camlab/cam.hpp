#pragma once

// Class activation map variants over a single sample's feature stack.
//
// A feature stack holds C channels of an h x w activation (or gradient) field as a C x (h*w)
// row-major matrix, so a channel is a contiguous row and a spatial position is a column.
// Every method returns an h x w map at the layer's resolution; `postprocess` lifts it to the
// input resolution and normalizes to [0, 1].

#include "camlab/error.hpp"

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace camlab {

enum class Method {
  GradCam,
  HiResCam,
  GradCamElementWise,
  GradCamPlusPlus,
  XGradCam,
  AblationCam,
  EigenCam,
  EigenGradCam,
  LayerCam,
};

inline constexpr std::array<Method, 9> kAllMethods{
    Method::GradCam,   Method::HiResCam,    Method::GradCamElementWise,
    Method::GradCamPlusPlus, Method::XGradCam, Method::AblationCam,
    Method::EigenCam,  Method::EigenGradCam, Method::LayerCam,
};

inline constexpr std::string_view to_string(Method m) {
  switch (m) {
    case Method::GradCam: return "grad_cam";
    case Method::HiResCam: return "hires_cam";
    case Method::GradCamElementWise: return "grad_cam_elementwise";
    case Method::GradCamPlusPlus: return "grad_cam_pp";
    case Method::XGradCam: return "xgrad_cam";
    case Method::AblationCam: return "ablation_cam";
    case Method::EigenCam: return "eigen_cam";
    case Method::EigenGradCam: return "eigen_grad_cam";
    case Method::LayerCam: return "layer_cam";
  }
  return "unknown";
}

inline std::optional<Method> parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

/// True for methods that consume the gradient field.
inline constexpr bool uses_gradients(Method m) {
  return m != Method::EigenCam && m != Method::AblationCam;
}

template <typename Scalar>
using FeatureMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-major 2-D image; used for raw CAMs and heatmaps.
template <typename Scalar>
using Image = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Heatmap = Image<double>;

template <typename Scalar>
struct FeatureStack {
  FeatureMatrix<Scalar> values;  // channels x (height * width)
  Eigen::Index height = 0;
  Eigen::Index width = 0;

  FeatureStack() = default;
  FeatureStack(FeatureMatrix<Scalar> v, Eigen::Index h, Eigen::Index w)
      : values(std::move(v)), height(h), width(w) {
    if (values.cols() != h * w) throw ShapeError("feature stack columns must equal height * width");
  }

  Eigen::Index channels() const { return values.rows(); }
};

/// Raw (unnormalized) CAM with its provenance.
template <typename Scalar>
struct RawCam {
  Image<Scalar> values;
  std::string layer;
  Method method = Method::GradCam;
  std::size_t class_index = 0;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const FeatureStack<Scalar>& a, const FeatureStack<Scalar>& g) {
  if (a.values.rows() != g.values.rows() || a.height != g.height || a.width != g.width) {
    throw ShapeError("activation and gradient stacks differ in shape");
  }
}

template <typename Scalar, typename RowExpr>
Image<Scalar> to_image(const RowExpr& row, Eigen::Index h, Eigen::Index w) {
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> flat = row;
  return Eigen::Map<const Image<Scalar>>(flat.data(), h, w);
}

/// ReLU(sum_k w_k A_k) for per-channel weights.
template <typename Scalar>
Image<Scalar> weighted_sum(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& weights,
                           const FeatureStack<Scalar>& a) {
  return to_image<Scalar>((weights.transpose() * a.values).cwiseMax(Scalar(0)), a.height, a.width);
}

}  // namespace detail

/// w_k = GAP(G_k); ReLU(sum_k w_k A_k).
template <typename Scalar>
Image<Scalar> grad_cam(const FeatureStack<Scalar>& a, const FeatureStack<Scalar>& g) {
  detail::require_same_shape(a, g);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> weights = g.values.rowwise().mean();
  return detail::weighted_sum(weights, a);
}

/// ReLU(sum_k G_k * A_k).
template <typename Scalar>
Image<Scalar> hires_cam(const FeatureStack<Scalar>& a, const FeatureStack<Scalar>& g) {
  detail::require_same_shape(a, g);
  return detail::to_image<Scalar>(
      g.values.cwiseProduct(a.values).colwise().sum().cwiseMax(Scalar(0)), a.height, a.width);
}

/// sum_k ReLU(G_k * A_k).
template <typename Scalar>
Image<Scalar> grad_cam_elementwise(const FeatureStack<Scalar>& a, const FeatureStack<Scalar>& g) {
  detail::require_same_shape(a, g);
  return detail::to_image<Scalar>(
      g.values.cwiseProduct(a.values).cwiseMax(Scalar(0)).colwise().sum(), a.height, a.width);
}

/// GradCAM++ with exponential-score coefficients
///   alpha = G^2 / (2 G^2 + sum(A_k) G^3), 0 where the denominator vanishes,
///   w_k = sum_ij alpha * ReLU(G).
template <typename Scalar>
Image<Scalar> grad_cam_pp(const FeatureStack<Scalar>& a, const FeatureStack<Scalar>& g) {
  detail::require_same_shape(a, g);
  const auto& G = g.values.array();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> sums = a.values.rowwise().sum().array();
  FeatureMatrix<Scalar> g2 = G.square().matrix();
  FeatureMatrix<Scalar> denom =
      (Scalar(2) * G.square() + G.cube().colwise() * sums).matrix();
  FeatureMatrix<Scalar> alpha =
      (denom.array() != Scalar(0)).select(g2.array() / denom.array(), Scalar(0)).matrix();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> weights =
      alpha.cwiseProduct(g.values.cwiseMax(Scalar(0))).rowwise().sum();
  return detail::weighted_sum(weights, a);
}

inline constexpr double kXGradEpsilon = 1e-12;

/// w_k = sum_ij A_k(i,j) / (sum A_k + eps) * G_k(i,j).
template <typename Scalar>
Image<Scalar> xgrad_cam(const FeatureStack<Scalar>& a, const FeatureStack<Scalar>& g) {
  detail::require_same_shape(a, g);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> norms =
      a.values.rowwise().sum().array() + Scalar(kXGradEpsilon);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> weights =
      (a.values.array().colwise() / norms).cwiseProduct(g.values.array()).rowwise().sum().matrix();
  return detail::weighted_sum(weights, a);
}

/// ReLU(sum_k ReLU(G_k) * A_k).
template <typename Scalar>
Image<Scalar> layer_cam(const FeatureStack<Scalar>& a, const FeatureStack<Scalar>& g) {
  detail::require_same_shape(a, g);
  return detail::to_image<Scalar>(
      g.values.cwiseMax(Scalar(0)).cwiseProduct(a.values).colwise().sum().cwiseMax(Scalar(0)),
      a.height, a.width);
}

/// Scores a batch of modified stacks by replaying the network past the target layer.
template <typename Scalar>
using Rescore = std::function<std::vector<Scalar>(std::span<const FeatureStack<Scalar>>)>;

/// y_c - y_c(A_k <- 0) for every channel k, evaluated `batch_size` channels per rescore call.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> ablation_drops(const FeatureStack<Scalar>& a,
                                                        const Rescore<Scalar>& rescore,
                                                        Scalar score, std::size_t batch_size) {
  if (batch_size == 0) throw ValidationError("ablation batch size must be >= 1");
  const Eigen::Index channels = a.channels();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> drops(channels);
  std::vector<FeatureStack<Scalar>> batch;
  for (Eigen::Index start = 0; start < channels; start += static_cast<Eigen::Index>(batch_size)) {
    const Eigen::Index stop = std::min(channels, start + static_cast<Eigen::Index>(batch_size));
    batch.clear();
    for (Eigen::Index k = start; k < stop; ++k) {
      FeatureStack<Scalar> ablated = a;
      ablated.values.row(k).setZero();
      batch.push_back(std::move(ablated));
    }
    std::vector<Scalar> scores = rescore(std::span<const FeatureStack<Scalar>>(batch));
    if (static_cast<Eigen::Index>(scores.size()) != stop - start) {
      throw ShapeError("rescore returned the wrong number of scores");
    }
    for (Eigen::Index k = start; k < stop; ++k) drops(k) = score - scores[static_cast<std::size_t>(k - start)];
  }
  return drops;
}

inline constexpr double kAblationEpsilon = 1e-12;

/// w_k = drop_k / (|y_c| + eps); ReLU(sum_k w_k A_k).
template <typename Scalar>
Image<Scalar> ablation_cam(const FeatureStack<Scalar>& a, const Rescore<Scalar>& rescore,
                           Scalar score, std::size_t batch_size) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> weights =
      ablation_drops(a, rescore, score, batch_size) / (std::abs(score) + Scalar(kAblationEpsilon));
  return detail::weighted_sum(weights, a);
}

/// Projection of the C x hw activation matrix onto its leading left singular vector
/// (no mean-centering), oriented so the largest-magnitude element is positive. Not rectified.
template <typename Scalar>
Eigen::Matrix<Scalar, 1, Eigen::Dynamic> principal_projection(const FeatureMatrix<Scalar>& m) {
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> proj = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>::Zero(m.cols());
  if (m.size() == 0 || m.isZero(Scalar(0))) return proj;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> dense = m;
  Eigen::JacobiSVD<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> svd(dense, Eigen::ComputeThinU);
  proj = svd.matrixU().col(0).transpose() * dense;
  Eigen::Index peak = 0;
  proj.cwiseAbs().maxCoeff(&peak);
  if (proj(peak) < Scalar(0)) proj = -proj;
  return proj;
}

/// ReLU of the first principal component projection of the activations. Class-agnostic.
template <typename Scalar>
Image<Scalar> eigen_cam(const FeatureStack<Scalar>& a) {
  return detail::to_image<Scalar>(principal_projection<Scalar>(a.values).cwiseMax(Scalar(0)),
                                  a.height, a.width);
}

/// eigen_cam of G * A.
template <typename Scalar>
Image<Scalar> eigen_grad_cam(const FeatureStack<Scalar>& a, const FeatureStack<Scalar>& g) {
  detail::require_same_shape(a, g);
  return eigen_cam(FeatureStack<Scalar>(g.values.cwiseProduct(a.values), a.height, a.width));
}

/// Everything any method may need for one (sample, layer, class).
template <typename Scalar>
struct CamInputs {
  const FeatureStack<Scalar>* activations = nullptr;
  const FeatureStack<Scalar>* gradients = nullptr;  // unused by eigen_cam and ablation_cam
  Rescore<Scalar> rescore;                          // ablation_cam only
  Scalar score = Scalar(0);                         // ablation_cam only
  std::size_t ablation_batch = 32;
};

template <typename Scalar>
Image<Scalar> compute_cam(Method method, const CamInputs<Scalar>& in) {
  const auto& a = *in.activations;
  auto grads = [&]() -> const FeatureStack<Scalar>& {
    if (in.gradients == nullptr) throw UsageError("method requires gradients");
    return *in.gradients;
  };
  switch (method) {
    case Method::GradCam: return grad_cam(a, grads());
    case Method::HiResCam: return hires_cam(a, grads());
    case Method::GradCamElementWise: return grad_cam_elementwise(a, grads());
    case Method::GradCamPlusPlus: return grad_cam_pp(a, grads());
    case Method::XGradCam: return xgrad_cam(a, grads());
    case Method::AblationCam:
      if (!in.rescore) throw UsageError("ablation_cam requires a rescore function");
      return ablation_cam(a, in.rescore, in.score, in.ablation_batch);
    case Method::EigenCam: return eigen_cam(a);
    case Method::EigenGradCam: return eigen_grad_cam(a, grads());
    case Method::LayerCam: return layer_cam(a, grads());
  }
  throw UsageError("unknown CAM method");
}

/// Bilinear resize with half-pixel centres: source coordinate (i + 0.5) * in / out - 0.5,
/// clamped to the valid range.
template <typename Scalar>
Image<Scalar> resize_bilinear(const Image<Scalar>& src, Eigen::Index out_h, Eigen::Index out_w) {
  const Eigen::Index in_h = src.rows();
  const Eigen::Index in_w = src.cols();
  auto coord = [](Eigen::Index i, Eigen::Index in, Eigen::Index out, Eigen::Index& i0,
                  Eigen::Index& i1, Scalar& frac) {
    Scalar s = (Scalar(i) + Scalar(0.5)) * Scalar(in) / Scalar(out) - Scalar(0.5);
    s = std::clamp(s, Scalar(0), Scalar(in - 1));
    i0 = static_cast<Eigen::Index>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    frac = s - Scalar(i0);
  };
  Image<Scalar> out(out_h, out_w);
  for (Eigen::Index y = 0; y < out_h; ++y) {
    Eigen::Index y0, y1;
    Scalar fy;
    coord(y, in_h, out_h, y0, y1, fy);
    for (Eigen::Index x = 0; x < out_w; ++x) {
      Eigen::Index x0, x1;
      Scalar fx;
      coord(x, in_w, out_w, x0, x1, fx);
      const Scalar top = src(y0, x0) * (Scalar(1) - fx) + src(y0, x1) * fx;
      const Scalar bottom = src(y1, x0) * (Scalar(1) - fx) + src(y1, x1) * fx;
      out(y, x) = top * (Scalar(1) - fy) + bottom * fy;
    }
  }
  return out;
}

/// Min-max normalization to [0, 1]. A constant map becomes all ones when positive and all
/// zeros otherwise.
template <typename Scalar>
Image<Scalar> normalize_unit(const Image<Scalar>& map) {
  if (map.size() == 0) return map;
  const Scalar lo = map.minCoeff();
  const Scalar hi = map.maxCoeff();
  if (!(hi > lo)) return Image<Scalar>::Constant(map.rows(), map.cols(), hi > Scalar(0) ? Scalar(1) : Scalar(0));
  Image<Scalar> out = (map - lo) / (hi - lo);
  return out.cwiseMin(Scalar(1)).cwiseMax(Scalar(0));
}

/// Upsamples a raw CAM to (height, width) and normalizes it into a heatmap.
template <typename Scalar>
Image<Scalar> postprocess(const Image<Scalar>& raw, Eigen::Index height, Eigen::Index width) {
  if (height < raw.rows() || width < raw.cols()) {
    throw ShapeError("postprocess target must not be smaller than the raw map");
  }
  if (raw.rows() == height && raw.cols() == width) return normalize_unit<Scalar>(raw);
  return normalize_unit<Scalar>(resize_bilinear(raw, height, width));
}

}  // namespace camlab
