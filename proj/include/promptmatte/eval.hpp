#pragma once

// Benchmark-style evaluation over a dataset directory, report files, and the
// single-image inference helpers shared with the command line.

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "promptmatte/attention.hpp"
#include "promptmatte/config.hpp"
#include "promptmatte/metrics.hpp"
#include "promptmatte/model.hpp"
#include "promptmatte/synth.hpp"

namespace pmatte {

// Alpha for one scene and prompt; same extents as the scene image.
using AlphaPredictor = std::function<Image(const DatasetScene&, const VisualPrompt&, OpacityLabel)>;

struct SceneMetrics {
  std::string name;
  MetricRow row;
  bool operator==(const SceneMetrics&) const = default;
};

struct EvalReport {
  std::string prompt;  // point, box or mask
  std::vector<SceneMetrics> scenes;
  std::vector<std::string> skipped;
  MetricRow mean;
  std::optional<MetricRow> baseline;
  std::optional<double> impro;  // mean vs baseline over the five metrics

  bool operator==(const EvalReport&) const = default;
};

// Scenes that cannot be read or lack the requested prompt kind are skipped
// and named in `skipped`; reasons go to `warnings` when given. Scenes are
// processed in parallel (see worker_count) with results in directory order.
EvalReport evaluate(const AlphaPredictor& predict, const std::string& dataset_dir, PromptKind kind,
                    const MetricConfig& metrics = {}, std::optional<MetricRow> baseline = std::nullopt,
                    std::ostream* warnings = nullptr);

// Forward pass of `model` without graph recording.
Image predict_alpha(const MattingModel<float>& model, const Image& image, const VisualPrompt& prompt,
                    OpacityLabel opacity);
AlphaPredictor model_predictor(const MattingModel<float>& model);

// Cross-attention map of the model's last cross-attention layer, context
// tokens weighted by prompt occupancy. StateError without a cross layer.
AttentionMap predict_attention_map(const MattingModel<float>& model, const Image& image,
                                   const VisualPrompt& prompt, OpacityLabel opacity);

// Nearest upsampling of an attention map to image extents (1 channel).
Image attention_map_image(const AttentionMap& map, std::size_t height, std::size_t width);

// CSV rows `record,name,mse,mad,sad,grad,conn,impro` with records prompt,
// scene, skipped, mean and baseline; values printed with 17 digits so the
// file parses back to an identical report.
void write_eval_csv(const EvalReport& report, const std::string& path);
EvalReport read_eval_csv(const std::string& path);

// Aligned text table with MSE, MAD, SAD, Grad, Conn and Impro columns.
std::string format_eval_table(const EvalReport& report);

struct Checkpoint {
  RunConfig config;
  std::unique_ptr<MattingModel<float>> model;
};

// Rebuilds the model from config.json and loads params/.
Checkpoint load_checkpoint(const std::string& dir);

// Worker threads for parallel loops: PROMPTMATTE_THREADS when set to a
// positive integer, otherwise the hardware concurrency.
std::size_t worker_count();

// Calls fn(i) for i in [0, n) on up to worker_count() threads. The first
// exception (lowest index) is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace pmatte
