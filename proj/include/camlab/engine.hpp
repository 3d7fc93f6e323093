#pragma once

#include "camlab/network.hpp"
#include "camlab/tensor.hpp"

#include <Eigen/Core>

#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace camlab {

/// Result of one forward pass. Every layer output is retained so gradients can be taken at
/// any recorded layer; only `recorded` layers are exposed through `activation()`.
struct ForwardTrace {
  Tensor input;
  std::vector<Tensor> outputs;
  std::set<std::string> recorded;
  Eigen::MatrixXd logits;  // batch x class_count
  std::size_t target_class = 0;

  const Tensor& activation(std::string_view layer, const Network& net) const;
};

/// Runs the network on `input` (shape (n, C, H, W) with n >= 1). Throws ShapeError on an
/// input mismatch and UsageError on an unknown record name.
ForwardTrace forward(const Network& net, const Tensor& input, std::span<const std::string> record = {},
                     std::size_t target_class = 0);

/// d(logit[class_index]) / d(activation of `layer`), per sample. Same shape as the activation.
Tensor gradients_at(const ForwardTrace& trace, const Network& net, std::string_view layer,
                    std::size_t class_index);

/// Re-runs every layer after `layer` with its output replaced by `replacement` (any batch size).
/// Residual sources upstream of `layer` are taken from `trace` (broadcast when the trace holds a
/// single sample). Returns replacement.n x class_count logits.
Eigen::MatrixXd replay_from(const Network& net, const ForwardTrace& trace, std::string_view layer,
                            const Tensor& replacement);

}  // namespace camlab
