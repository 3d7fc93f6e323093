// camlab: CAM localization benchmark command line.
//
//   camlab toy-net       write the hand-wired toy detector (spec + weights)
//   camlab synth         generate a synthetic CT dataset with lesion masks
//   camlab benchmark     score CAM methods x layers against ground-truth masks
//   camlab overlay       render a red/green/yellow overlay for one slice
//   camlab classify-eval precision/recall/F1 over a threshold sweep
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include "camlab/benchmark.hpp"
#include "camlab/classifier_eval.hpp"
#include "camlab/csv.hpp"
#include "camlab/dataset.hpp"
#include "camlab/error.hpp"
#include "camlab/network.hpp"

#include <CLI11.hpp>
#include <fmt/core.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace {

constexpr int kUsageError = 1;
constexpr int kDataError = 2;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& f : camlab::split_csv_line(s)) {
    if (!f.empty()) out.push_back(f);
  }
  return out;
}

// Reads `key=value` lines ('#' comments) into `--key value` tokens.
std::vector<std::string> config_tokens(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw camlab::UsageError(fmt::format("cannot open config file '{}'", path));
  std::vector<std::string> tokens;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw camlab::UsageError(fmt::format("{}:{}: expected key=value", path, lineno));
    }
    tokens.push_back("--" + trim(line.substr(0, eq)));
    tokens.push_back(trim(line.substr(eq + 1)));
  }
  return tokens;
}

// Moves `--config FILE` contents in front of the remaining arguments so explicit flags win.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<std::string> injected;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
    } else {
      continue;
    }
    auto t = config_tokens(path);
    injected.insert(injected.end(), t.begin(), t.end());
    --i;
  }
  if (!args.empty()) args.insert(args.begin() + 1, injected.begin(), injected.end());
  return args;
}

struct RunFlags {
  std::string net;
  std::string weights;
  std::string manifest;
  std::string out = "camlab_out";
  std::string methods = "all";
  std::string layers = "-1,-2,-3";
  std::string tau = "calibrate";
  std::string calibrate_on = "train";
  std::size_t class_index = 1;
  std::size_t jobs = 0;
  std::size_t ablation_batch = 32;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--net", f.net, "Network spec file")->required();
  cmd->add_option("--weights", f.weights, "Weight file (CAMW1)")->required();
  cmd->add_option("--manifest", f.manifest, "Dataset manifest CSV")->required();
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--methods", f.methods, "Comma-separated CAM methods or 'all'");
  cmd->add_option("--layers", f.layers, "Comma-separated layer names or aliases -1,-2,-3");
  cmd->add_option("--tau", f.tau, "'calibrate' or a fixed threshold in [0,1]");
  cmd->add_option("--calibrate-on", f.calibrate_on, "Split used for threshold calibration: train|test");
  cmd->add_option("--class", f.class_index, "Target class index");
  cmd->add_option("--jobs", f.jobs, "Worker threads (0 = all cores)");
  cmd->add_option("--ablation-batch", f.ablation_batch, "Channels per AblationCAM replay batch");
}

camlab::RunConfig to_config(const RunFlags& f) {
  camlab::RunConfig c;
  c.net_spec = f.net;
  c.weights = f.weights;
  c.manifest = f.manifest;
  c.out_dir = f.out;
  if (f.methods != "all") {
    c.methods.clear();
    for (const auto& name : split_list(f.methods)) {
      auto m = camlab::parse_method(name);
      if (!m) throw camlab::UsageError(fmt::format("unknown CAM method '{}'", name));
      c.methods.push_back(*m);
    }
  }
  c.layers = split_list(f.layers);
  if (f.tau != "calibrate") {
    try {
      c.fixed_tau = camlab::parse_double(f.tau, "--tau");
    } catch (const camlab::ParseError& e) {
      throw camlab::UsageError(e.what());
    }
  }
  if (f.calibrate_on == "train") c.calibrate_on = camlab::Split::Train;
  else if (f.calibrate_on == "test") c.calibrate_on = camlab::Split::Test;
  else throw camlab::UsageError("--calibrate-on must be train or test");
  c.class_index = f.class_index;
  c.jobs = f.jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : f.jobs;
  c.ablation_batch = f.ablation_batch;
  return c;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw camlab::DataError(fmt::format("cannot write '{}'", path));
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CAM localization benchmark"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  RunFlags bench;
  auto* bench_cmd = app.add_subcommand("benchmark", "Score CAM methods against ground-truth masks");
  add_run_flags(bench_cmd, bench);

  RunFlags ov;
  std::string slice_id;
  std::string image_out;
  auto* overlay_cmd = app.add_subcommand("overlay", "Render a CAM overlay for one positive slice");
  add_run_flags(overlay_cmd, ov);
  overlay_cmd->add_option("--slice", slice_id, "Slice id")->required();
  overlay_cmd->add_option("--image", image_out, "Output PPM path (default <out>/overlay_<slice>.ppm)");

  std::string scores_path;
  std::string thresholds = "0.3,0.5,0.7";
  std::string pr_out;
  auto* cls_cmd = app.add_subcommand("classify-eval", "Precision/recall/F1 over thresholds");
  cls_cmd->add_option("--scores", scores_path, "CSV slice_id,score,label")->required();
  cls_cmd->add_option("--thresholds", thresholds, "Comma-separated thresholds");
  cls_cmd->add_option("--out", pr_out, "Output CSV (default stdout)");

  camlab::SynthOptions synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic CT dataset");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--patients", synth.patients, "Number of patients");
  synth_cmd->add_option("--slices", synth.slices_per_patient, "Slices per patient");
  synth_cmd->add_option("--seed", synth.seed, "Random seed");
  synth_cmd->add_option("--height", synth.height, "Image height");
  synth_cmd->add_option("--width", synth.width, "Image width");
  synth_cmd->add_option("--test-fraction", synth.test_fraction, "Fraction of patients held out");

  std::uint64_t toy_seed = 0;
  std::size_t toy_height = 64;
  std::size_t toy_width = 64;
  std::string toy_spec;
  std::string toy_weights;
  auto* toy_cmd = app.add_subcommand("toy-net", "Write the toy detector network");
  toy_cmd->add_option("--seed", toy_seed, "Weight noise seed");
  toy_cmd->add_option("--height", toy_height, "Input height");
  toy_cmd->add_option("--width", toy_width, "Input width");
  toy_cmd->add_option("--net", toy_spec, "Output spec path")->required();
  toy_cmd->add_option("--weights", toy_weights, "Output weight path")->required();

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  } catch (const camlab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  }

  try {
    if (*bench_cmd) {
      const auto footer = camlab::cmd_benchmark(to_config(bench));
      std::cout << footer;
      std::cout << "wrote " << (std::filesystem::path(bench.out) / "summary.csv").string() << " and "
                << (std::filesystem::path(bench.out) / "per_slice.csv").string() << "\n";
    } else if (*overlay_cmd) {
      const auto config = to_config(ov);
      std::filesystem::path path =
          image_out.empty() ? config.out_dir / fmt::format("overlay_{}.ppm", slice_id) : std::filesystem::path(image_out);
      camlab::cmd_overlay(config, slice_id, path);
      std::cout << "wrote " << path.string() << "\n";
    } else if (*cls_cmd) {
      const auto slices = camlab::read_score_file(scores_path);
      if (slices.empty()) throw camlab::DataError("score file contains no slices");
      std::vector<double> ts;
      try {
        for (const auto& t : split_list(thresholds)) ts.push_back(camlab::parse_double(t, "--thresholds"));
      } catch (const camlab::ParseError& e) {
        throw camlab::UsageError(e.what());
      }
      if (ts.empty()) throw camlab::UsageError("no thresholds given");
      write_or_print(pr_out, camlab::format_pr_csv(camlab::pr_curve(slices, ts)));
    } else if (*synth_cmd) {
      const auto m = camlab::synth_dataset(synth_out, synth);
      std::cout << "wrote " << m.slices.size() << " slices to " << synth_out << "\n";
    } else if (*toy_cmd) {
      camlab::save_network(camlab::build_toy_detector(toy_seed, toy_height, toy_width), toy_spec, toy_weights);
    }
  } catch (const camlab::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return 0;
}
