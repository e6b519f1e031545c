#pragma once

// Training: matting loss, warmup + exponential decay schedule, AdamW and the
// per-step loop over synthetic or on-disk scenes.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "promptmatte/model.hpp"
#include "promptmatte/synth.hpp"

namespace pmatte {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 200;
  double decay_rate = 0.9995;  // per step after warmup
  std::size_t steps = 3000;
  std::size_t batch_size = 4;
  std::array<double, 3> prompt_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // point, box, mask
  double duplicate_prob = 0.5;
  double grad_loss_weight = 0.5;
  std::size_t image_size = 64;  // synthetic scenes are square
  std::uint64_t seed = 0;       // parameter initialization
  std::uint64_t data_seed = 1;  // scene and prompt stream
};

// Throws ArgumentError on out-of-range settings.
void validate(const TrainConfig& config);

// mean|p - g| + lambda * (mean|dx p - dx g| + mean|dy p - dy g|), forward
// differences along the last two axes (x, then y).
template <typename T>
Tensor<T> matting_loss(const Tensor<T>& pred, const Tensor<T>& gt, double lambda);

// Linear warmup to lr over warmup_steps, then lr * decay^(step - warmup).
double lr_schedule(std::size_t step, const TrainConfig& config);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

// Decoupled weight decay Adam with bias correction. Moments are kept in
// double precision; updates walk parameters in path order.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Applies one update from the parameters' current gradients (missing
  // gradients count as zero). Raises NumericError, leaving every parameter
  // untouched, if any gradient is non-finite.
  void step(ParamStore<T>& params, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

struct TrainingSample {
  Image image;
  Image alpha;
  VisualPrompt prompt = VisualPrompt::points({{0.5, 0.5}});
  OpacityLabel opacity{1};
};

// Supplies one sample for a seed and requested prompt kind.
class SceneSource {
 public:
  virtual ~SceneSource() = default;
  virtual TrainingSample draw(std::uint64_t seed, PromptKind kind) const = 0;
};

// Fresh make_scene draws.
class SyntheticSource : public SceneSource {
 public:
  explicit SyntheticSource(SceneOptions options) : options_(std::move(options)) {}
  TrainingSample draw(std::uint64_t seed, PromptKind kind) const override;

 private:
  SceneOptions options_;
};

// Scenes of a dataset directory held in memory; the seed picks the scene.
// A scene without the requested prompt kind falls back to its first prompt.
class DatasetSource : public SceneSource {
 public:
  explicit DatasetSource(const std::string& dir);
  TrainingSample draw(std::uint64_t seed, PromptKind kind) const override;
  std::size_t size() const { return scenes_.size(); }

 private:
  std::vector<DatasetScene> scenes_;
};

struct TrainResult {
  std::vector<double> losses;
  std::vector<double> lrs;
  std::size_t steps_completed = 0;
  bool diverged = false;
  std::string message;
};

using StepCallback = std::function<void(std::size_t step, double lr, double loss)>;

// Runs config.steps updates. When `out_dir` is non-empty the checkpoint
// (params/ and config.json holding `config_text`) and loss.csv are written
// there; on divergence the checkpoint holds the last finite parameters.
TrainResult train_loop(MattingModel<float>& model, const TrainConfig& config, const SceneSource& source,
                       const std::string& out_dir = "", const std::string& config_text = "{}",
                       const StepCallback& on_step = {});

// The batch drawn at `step`: the kind comes from prompt_mix, the sample from
// the source, both seeded from (data_seed, step, index).
std::vector<TrainingSample> training_batch(const TrainConfig& config, const SceneSource& source,
                                           std::size_t step);

void save_checkpoint(const std::string& dir, const MattingModel<float>& model, const std::string& config_text);

}  // namespace pmatte
