#include "camlab/benchmark.hpp"

#include "camlab/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fmt/core.h>

namespace camlab {
namespace fs = std::filesystem;
namespace {

bool is_activation_like(LayerKind k) {
  return k == LayerKind::Relu || k == LayerKind::Silu || k == LayerKind::AffineChannel;
}

// Runs fn(i) for i in [0, count) on up to `jobs` threads. Rethrows the exception of the
// lowest failing index.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(jobs);
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

Tensor image_tensor(const Network& net, const Image<double>& img) {
  const auto& spec = net.spec();
  if (spec.input_channels != 1 || static_cast<Eigen::Index>(spec.input_height) != img.rows() ||
      static_cast<Eigen::Index>(spec.input_width) != img.cols()) {
    throw DataError(fmt::format("slice is {}x{} but the network expects 1x{}x{}", img.rows(), img.cols(),
                                spec.input_height, spec.input_width));
  }
  Tensor t(spec.input_shape(1));
  t.channel(0, 0) = img;
  return t;
}

std::vector<std::string> layer_names(const std::vector<LayerTarget>& layers) {
  std::vector<std::string> names;
  for (const auto& l : layers) names.push_back(l.layer);
  return names;
}

// Heatmaps for every (method, layer) pair of one slice, method-major.
std::vector<Heatmap> slice_heatmaps(const Network& net, const Image<double>& image,
                                    const RunConfig& config, const std::vector<LayerTarget>& layers) {
  const auto names = layer_names(layers);
  const ForwardTrace trace = forward(net, image_tensor(net, image), names, config.class_index);
  std::vector<Heatmap> out(config.methods.size() * layers.size());
  const bool need_grads = std::any_of(config.methods.begin(), config.methods.end(), uses_gradients);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    FeatureStack<double> g;
    if (need_grads) g = feature_stack(gradients_at(trace, net, layers[li].layer, config.class_index));
    for (std::size_t mi = 0; mi < config.methods.size(); ++mi) {
      out[mi * layers.size() + li] =
          heatmap_with_gradients(net, trace, layers[li].layer, config.methods[mi], config.class_index,
                                 config.ablation_batch, need_grads ? &g : nullptr);
    }
  }
  return out;
}

std::vector<const SliceRecord*> positives(const Manifest& manifest, Split which) {
  std::vector<const SliceRecord*> out;
  for (const auto* s : manifest.select(which)) {
    if (s->label == 1) out.push_back(s);
  }
  return out;
}

void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace

FeatureStack<double> feature_stack(const Tensor& t, std::size_t sample) {
  const Shape& s = t.shape();
  auto data = t.sample(sample);
  FeatureMatrix<double> m = Eigen::Map<const FeatureMatrix<double>>(
      data.data(), static_cast<Eigen::Index>(s.c), static_cast<Eigen::Index>(s.plane()));
  return FeatureStack<double>(std::move(m), static_cast<Eigen::Index>(s.h), static_cast<Eigen::Index>(s.w));
}

std::string resolve_layer_alias(const Network& net, int k) {
  const auto& layers = net.spec().layers;
  if (k < 1) throw UsageError(fmt::format("layer alias -{} is not valid", k));
  int seen = 0;
  for (std::size_t i = layers.size(); i-- > 0;) {
    if (!is_convolution(layers[i].kind)) continue;
    if (++seen != k) continue;
    std::size_t j = i;
    while (j + 1 < layers.size() && is_activation_like(layers[j + 1].kind)) ++j;
    return layers[j].name;
  }
  throw UsageError(fmt::format("layer alias -{} needs at least {} convolution layers", k, k));
}

std::vector<LayerTarget> resolve_layers(const Network& net, const std::vector<std::string>& tokens) {
  std::vector<LayerTarget> out;
  for (const auto& tok : tokens) {
    LayerTarget t{tok, {}};
    if (tok.size() >= 2 && tok[0] == '-' && std::all_of(tok.begin() + 1, tok.end(), ::isdigit)) {
      t.layer = resolve_layer_alias(net, std::stoi(tok.substr(1)));
    } else {
      net.layer_index(tok);
      t.layer = tok;
    }
    const Shape& s = net.layer_shapes()[net.layer_index(t.layer)];
    if (s.h * s.w == 0) throw UsageError(fmt::format("layer '{}' has no spatial extent", t.layer));
    out.push_back(std::move(t));
  }
  if (out.empty()) throw UsageError("no target layers given");
  return out;
}

Heatmap slice_heatmap(const Network& net, const ForwardTrace& trace, const std::string& layer,
                      Method method, std::size_t class_index, std::size_t ablation_batch) {
  FeatureStack<double> g;
  if (uses_gradients(method)) g = feature_stack(gradients_at(trace, net, layer, class_index));
  return heatmap_with_gradients(net, trace, layer, method, class_index, ablation_batch,
                                uses_gradients(method) ? &g : nullptr);
}

Heatmap heatmap_with_gradients(const Network& net, const ForwardTrace& trace, const std::string& layer,
                               Method method, std::size_t class_index, std::size_t ablation_batch,
                               const FeatureStack<double>* gradients) {
  const Tensor& act = trace.activation(layer, net);
  const FeatureStack<double> a = feature_stack(act);
  CamInputs<double> in;
  in.activations = &a;
  in.gradients = gradients;
  if (method == Method::AblationCam) {
    in.score = trace.logits(0, static_cast<Eigen::Index>(class_index));
    in.ablation_batch = ablation_batch;
    in.rescore = [&](std::span<const FeatureStack<double>> batch) {
      Shape s = act.shape();
      std::vector<double> data;
      data.reserve(batch.size() * s.sample());
      for (const auto& fs : batch) data.insert(data.end(), fs.values.data(), fs.values.data() + fs.values.size());
      s.n = batch.size();
      const Eigen::MatrixXd logits = replay_from(net, trace, layer, Tensor(s, std::move(data)));
      std::vector<double> scores(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        scores[i] = logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(class_index));
      }
      return scores;
    };
  }
  const Image<double> raw = compute_cam(method, in);
  const Shape in_shape = trace.input.shape();
  return postprocess<double>(raw, static_cast<Eigen::Index>(in_shape.h), static_cast<Eigen::Index>(in_shape.w));
}

std::vector<double> thresholds_for(const Network& net, const Manifest& manifest, const RunConfig& config,
                                   const std::vector<LayerTarget>& layers) {
  const std::size_t pairs = config.methods.size() * layers.size();
  if (config.fixed_tau) {
    if (!(*config.fixed_tau >= 0.0 && *config.fixed_tau <= 1.0)) throw UsageError("--tau must lie in [0, 1]");
    return std::vector<double>(pairs, *config.fixed_tau);
  }
  const auto slices = positives(manifest, config.calibrate_on);
  if (slices.empty()) {
    throw DataError(fmt::format("no positive slices in the {} split for threshold calibration",
                                to_string(config.calibrate_on)));
  }
  std::vector<std::vector<ThresholdSweep>> per_slice(slices.size());
  parallel_for(slices.size(), config.jobs, [&](std::size_t i) {
    const LoadedSlice loaded = load_slice(manifest, *slices[i]);
    const auto maps = slice_heatmaps(net, loaded.image, config, layers);
    per_slice[i].resize(pairs);
    for (std::size_t p = 0; p < pairs; ++p) per_slice[i][p].add(maps[p], loaded.truth);
  });
  std::vector<double> taus(pairs);
  for (std::size_t p = 0; p < pairs; ++p) {
    ThresholdSweep total;
    for (const auto& s : per_slice) total.merge(s[p]);
    taus[p] = total.best().tau;
  }
  return taus;
}

BenchmarkResult run_benchmark(const Network& net, const Manifest& manifest, const RunConfig& config) {
  if (config.methods.empty()) throw UsageError("no CAM methods selected");
  if (config.modes.empty()) throw UsageError("no aggregation modes selected");
  if (config.class_index >= net.spec().class_count) {
    throw UsageError(fmt::format("class index {} out of range", config.class_index));
  }
  const auto layers = resolve_layers(net, config.layers);
  const std::size_t pairs = config.methods.size() * layers.size();

  const auto test = positives(manifest, Split::Test);
  if (test.empty()) throw DataError("no positive slices in the test split");
  const std::vector<double> taus = thresholds_for(net, manifest, config, layers);

  std::vector<std::vector<EvalRecord>> records(test.size());
  parallel_for(test.size(), config.jobs, [&](std::size_t i) {
    const LoadedSlice loaded = load_slice(manifest, *test[i]);
    const auto maps = slice_heatmaps(net, loaded.image, config, layers);
    records[i].reserve(pairs);
    for (std::size_t p = 0; p < pairs; ++p) {
      records[i].push_back(evaluate_slice(test[i]->slice_id, binarize(maps[p], taus[p]), loaded.truth));
    }
  });

  BenchmarkResult result;
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (std::size_t p = 0; p < pairs; ++p) {
      result.per_slice.push_back({test[i]->patient_id, config.methods[p / layers.size()],
                                  layers[p % layers.size()].label, taus[p], records[i][p]});
    }
  }
  std::vector<EvalRecord> column(test.size());
  for (std::size_t p = 0; p < pairs; ++p) {
    for (std::size_t i = 0; i < test.size(); ++i) column[i] = records[i][p];
    for (Aggregation mode : config.modes) {
      result.summary.push_back({config.methods[p / layers.size()], layers[p % layers.size()].label, mode,
                                aggregate(column, mode), taus[p]});
    }
  }
  return result;
}

std::string format_summary_csv(const BenchmarkResult& result) {
  std::string out = "method,layer,mode,loose_hit_rate,pixel_dice,pixel_iou,bbox_dice,bbox_iou,tau\n";
  for (const auto& r : result.summary) {
    const Summary& s = r.summary;
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", to_string(r.method), r.layer, to_string(r.mode),
                       s.loose_hit_rate, s.pixel_dice, s.pixel_iou, s.bbox_dice, s.bbox_iou, r.tau);
  }
  return out;
}

std::string format_per_slice_csv(const BenchmarkResult& result) {
  std::string out =
      "slice_id,patient_id,method,layer,tau,pixel_dice,pixel_iou,bbox_dice,bbox_iou,loose_hit,"
      "intersection,predicted,truth\n";
  for (const auto& r : result.per_slice) {
    const EvalRecord& e = r.record;
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{}\n", e.slice_id, r.patient_id, to_string(r.method),
                       r.layer, r.tau, e.pixel.dice, e.pixel.iou, e.bbox.dice, e.bbox.iou, e.loose_hit,
                       e.pixel.counts.intersection, e.pixel.counts.predicted, e.pixel.counts.truth);
  }
  return out;
}

std::string format_best_footer(const BenchmarkResult& result) {
  std::string out;
  for (Aggregation mode : {Aggregation::Global, Aggregation::PerSlice}) {
    const SummaryRow* best_box = nullptr;
    const SummaryRow* best_dice = nullptr;
    for (const auto& r : result.summary) {
      if (r.mode != mode) continue;
      if (!best_box || r.summary.bbox_iou > best_box->summary.bbox_iou) best_box = &r;
      if (!best_dice || r.summary.pixel_dice > best_dice->summary.pixel_dice) best_dice = &r;
    }
    if (!best_box) continue;
    out += fmt::format("best [{}] bbox_iou: {} @ {} = {:.4f}; pixel_dice: {} @ {} = {:.4f}\n", to_string(mode),
                       to_string(best_box->method), best_box->layer, best_box->summary.bbox_iou,
                       to_string(best_dice->method), best_dice->layer, best_dice->summary.pixel_dice);
  }
  return out;
}

std::string cmd_benchmark(const RunConfig& config) {
  const Network net = load_network(config.net_spec, config.weights);
  const Manifest manifest = read_manifest(config.manifest);
  const BenchmarkResult result = run_benchmark(net, manifest, config);
  fs::create_directories(config.out_dir);
  write_text(config.out_dir / "summary.csv", format_summary_csv(result));
  write_text(config.out_dir / "per_slice.csv", format_per_slice_csv(result));
  return format_best_footer(result);
}

std::string render_overlay(const Image<double>& windowed, const BinaryMask& predicted, const BinaryMask& truth) {
  if (windowed.rows() != predicted.rows() || windowed.cols() != predicted.cols() ||
      windowed.rows() != truth.rows() || windowed.cols() != truth.cols()) {
    throw ShapeError("overlay inputs differ in shape");
  }
  std::string out = fmt::format("P6\n{} {}\n255\n", windowed.cols(), windowed.rows());
  out.reserve(out.size() + static_cast<std::size_t>(windowed.size()) * 3);
  for (Eigen::Index r = 0; r < windowed.rows(); ++r) {
    for (Eigen::Index c = 0; c < windowed.cols(); ++c) {
      const int gray = static_cast<int>(std::lround(std::clamp(windowed(r, c), 0.0, 1.0) * 255.0));
      int rgb[3] = {gray, gray, gray};
      const bool p = predicted(r, c);
      const bool t = truth(r, c);
      if (p || t) {
        const int tint[3] = {p ? 255 : 0, t ? 255 : 0, 0};
        for (int k = 0; k < 3; ++k) rgb[k] = (gray + tint[k] + 1) / 2;
      }
      for (int v : rgb) out.push_back(static_cast<char>(v));
    }
  }
  return out;
}

void cmd_overlay(const RunConfig& config, const std::string& slice_id, const fs::path& out_path) {
  if (config.methods.empty()) throw UsageError("no CAM method selected");
  const Network net = load_network(config.net_spec, config.weights);
  const Manifest manifest = read_manifest(config.manifest);
  auto it = std::find_if(manifest.slices.begin(), manifest.slices.end(),
                         [&](const SliceRecord& s) { return s.slice_id == slice_id; });
  if (it == manifest.slices.end()) throw DataError(fmt::format("slice '{}' is not in the manifest", slice_id));
  if (it->label != 1) throw DataError(fmt::format("slice '{}' is not a positive slice", slice_id));

  RunConfig single = config;
  single.methods = {config.methods.front()};
  single.layers = {config.layers.front()};
  const auto layers = resolve_layers(net, single.layers);
  const double tau = thresholds_for(net, manifest, single, layers).front();

  const LoadedSlice loaded = load_slice(manifest, *it);
  const Heatmap heat = slice_heatmaps(net, loaded.image, single, layers).front();
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_text(out_path, render_overlay(loaded.image, binarize(heat, tau), loaded.truth));
}

}  // namespace camlab
