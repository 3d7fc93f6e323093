#pragma once

#include "camlab/cam.hpp"
#include "camlab/dataset.hpp"
#include "camlab/engine.hpp"
#include "camlab/localization.hpp"
#include "camlab/network.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace camlab {

/// C x (h*w) view of one sample of a recorded tensor.
FeatureStack<double> feature_stack(const Tensor& t, std::size_t sample = 0);

/// Layer recorded for alias -k (k = 1, 2, 3, ...): the k-th last convolution, advanced past
/// the affine/activation layers that directly follow it.
std::string resolve_layer_alias(const Network& net, int k);

struct LayerTarget {
  std::string label;  // as given by the user, e.g. "-3" or "relu2"
  std::string layer;  // resolved layer name
};

std::vector<LayerTarget> resolve_layers(const Network& net, const std::vector<std::string>& tokens);

struct RunConfig {
  std::filesystem::path net_spec;
  std::filesystem::path weights;
  std::filesystem::path manifest;
  std::filesystem::path out_dir = "camlab_out";
  std::vector<Method> methods{kAllMethods.begin(), kAllMethods.end()};
  std::vector<std::string> layers{"-1", "-2", "-3"};
  std::size_t class_index = 1;
  std::optional<double> fixed_tau;  // nullopt: calibrate per (method, layer)
  Split calibrate_on = Split::Train;
  std::vector<Aggregation> modes{Aggregation::Global, Aggregation::PerSlice};
  std::size_t jobs = 1;
  std::size_t ablation_batch = 32;
};

/// Heatmap at input resolution for one single-sample trace.
Heatmap slice_heatmap(const Network& net, const ForwardTrace& trace, const std::string& layer,
                      Method method, std::size_t class_index, std::size_t ablation_batch);

/// As slice_heatmap, reusing an already computed gradient stack (may be null for methods that
/// do not consume gradients).
Heatmap heatmap_with_gradients(const Network& net, const ForwardTrace& trace, const std::string& layer,
                               Method method, std::size_t class_index, std::size_t ablation_batch,
                               const FeatureStack<double>* gradients);

struct SummaryRow {
  Method method = Method::GradCam;
  std::string layer;
  Aggregation mode = Aggregation::Global;
  Summary summary;
  double tau = 0.0;
};

struct SliceRow {
  std::string patient_id;
  Method method = Method::GradCam;
  std::string layer;
  double tau = 0.0;
  EvalRecord record;
};

struct BenchmarkResult {
  std::vector<SummaryRow> summary;  // method-major, then layer, then mode
  std::vector<SliceRow> per_slice;  // slice-major in manifest order
};

/// Per (method, layer) threshold: fixed, or calibrated on `config.calibrate_on`.
std::vector<double> thresholds_for(const Network& net, const Manifest& manifest,
                                   const RunConfig& config, const std::vector<LayerTarget>& layers);

/// Scores every positive test slice; output is independent of `config.jobs`.
BenchmarkResult run_benchmark(const Network& net, const Manifest& manifest, const RunConfig& config);

std::string format_summary_csv(const BenchmarkResult& result);
std::string format_per_slice_csv(const BenchmarkResult& result);
/// Best (method, layer) per aggregation mode under bbox IoU and pixel Dice.
std::string format_best_footer(const BenchmarkResult& result);

/// Loads inputs, runs the benchmark and writes summary.csv and per_slice.csv into
/// `config.out_dir`. Returns the footer text.
std::string cmd_benchmark(const RunConfig& config);

/// P6 overlay: windowed CT in gray; prediction-only red, truth-only green, both yellow, each
/// blended half-and-half with the gray base.
std::string render_overlay(const Image<double>& windowed, const BinaryMask& predicted,
                           const BinaryMask& truth);

/// Renders the first configured method/layer for `slice_id` into `out_path`.
void cmd_overlay(const RunConfig& config, const std::string& slice_id,
                 const std::filesystem::path& out_path);

}  // namespace camlab
