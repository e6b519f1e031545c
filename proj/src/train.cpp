#include "promptmatte/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "promptmatte/errors.hpp"
#include "promptmatte/ops.hpp"

namespace pmatte {

namespace fs = std::filesystem;

void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ArgumentError("lr must be positive");
  if (!(c.decay_rate > 0.0 && c.decay_rate <= 1.0)) throw ArgumentError("decay_rate must lie in (0, 1]");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ArgumentError("Adam betas must lie in [0, 1)");
  }
  if (!(c.weight_decay >= 0.0)) throw ArgumentError("weight_decay must be non-negative");
  if (!(c.adam_eps > 0.0)) throw ArgumentError("adam_eps must be positive");
  if (c.batch_size == 0) throw ArgumentError("batch_size must be positive");
  if (!(c.duplicate_prob >= 0.0 && c.duplicate_prob <= 1.0)) throw ArgumentError("duplicate_prob must lie in [0, 1]");
  if (!(c.grad_loss_weight >= 0.0)) throw ArgumentError("grad_loss_weight must be non-negative");
  double total = 0.0;
  for (double p : c.prompt_mix) {
    if (!(p >= 0.0)) throw ArgumentError("prompt_mix entries must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("prompt_mix must sum to 1");
  if (c.image_size < 16) throw ArgumentError("image_size must be at least 16");
}

template <typename T>
Tensor<T> matting_loss(const Tensor<T>& pred, const Tensor<T>& gt, double lambda) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("matting_loss: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  const std::size_t r = pred.rank();
  if (r < 2 || pred.dim(r - 1) < 2 || pred.dim(r - 2) < 2) {
    throw DimensionError("matting_loss: mattes need at least 2x2 spatial extents");
  }
  Tensor<T> loss = mean(abs(sub(pred, gt)));
  if (lambda == 0.0) return loss;
  const auto gx = mean(abs(sub(diff(pred, r - 1), diff(gt, r - 1))));
  const auto gy = mean(abs(sub(diff(pred, r - 2), diff(gt, r - 2))));
  return add(loss, scale(add(gx, gy), static_cast<T>(lambda)));
}

double lr_schedule(std::size_t step, const TrainConfig& config) {
  if (step < config.warmup_steps) {
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  return config.lr * std::pow(config.decay_rate, static_cast<double>(step - config.warmup_steps));
}

template <typename T>
void AdamW<T>::step(ParamStore<T>& params, double lr) {
  for (const auto& [path, t] : params.tensors()) {
    if (!t.has_grad()) continue;
    for (T g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("AdamW: non-finite gradient in " + path);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const double shrink = 1.0 - lr * config_.weight_decay;
  for (auto& [path, t] : params.tensors_mut()) {
    auto& m = m_[path];
    auto& v = v_[path];
    if (m.empty()) {
      m.assign(t.numel(), 0.0);
      v.assign(t.numel(), 0.0);
    }
    const bool has = t.has_grad();
    std::span<const T> grad = has ? t.grad() : std::span<const T>();
    auto p = t.data_mut();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = has ? static_cast<double>(grad[i]) : 0.0;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      const double updated = static_cast<double>(p[i]) * shrink - lr * mhat / (std::sqrt(vhat) + config_.eps);
      p[i] = static_cast<T>(updated);
    }
  }
}

// ---------------------------------------------------------------------------
// scene sources

TrainingSample SyntheticSource::draw(std::uint64_t seed, PromptKind kind) const {
  Rng rng(seed);
  SceneOptions opts = options_;
  opts.prompt_kind = kind;
  SynthScene s = make_scene(rng, opts);
  return {std::move(s.image), std::move(s.gt_alpha), std::move(s.prompt), s.opacity};
}

DatasetSource::DatasetSource(const std::string& dir) {
  for (const auto& name : list_scenes(dir)) scenes_.push_back(read_scene((fs::path(dir) / name).string()));
  if (scenes_.empty()) throw IoError("dataset has no scenes: " + dir);
}

TrainingSample DatasetSource::draw(std::uint64_t seed, PromptKind kind) const {
  Rng rng(seed);
  const auto& s = scenes_[std::uniform_int_distribution<std::size_t>(0, scenes_.size() - 1)(rng)];
  const VisualPrompt* prompt = &s.prompts.prompts.front();
  for (const auto& p : s.prompts.prompts) {
    if (p.kind() == kind) {
      prompt = &p;
      break;
    }
  }
  return {s.image, s.alpha, *prompt, s.prompts.opacity};
}

// ---------------------------------------------------------------------------
// loop

std::vector<TrainingSample> training_batch(const TrainConfig& config, const SceneSource& source,
                                           std::size_t step) {
  std::vector<TrainingSample> batch;
  for (std::size_t b = 0; b < config.batch_size; ++b) {
    Rng rng(scene_seed(config.data_seed, step * config.batch_size + b));
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    PromptKind kind = PromptKind::kMask;
    if (u < config.prompt_mix[0]) {
      kind = PromptKind::kPoint;
    } else if (u < config.prompt_mix[0] + config.prompt_mix[1]) {
      kind = PromptKind::kBox;
    }
    batch.push_back(source.draw(rng(), kind));
  }
  return batch;
}

void save_checkpoint(const std::string& dir, const MattingModel<float>& model, const std::string& config_text) {
  fs::create_directories(dir);
  const fs::path params = fs::path(dir) / "params";
  fs::remove_all(params);
  save_params(model.params(), params.string());
  std::ofstream out(fs::path(dir) / "config.json");
  out << config_text;
  if (!config_text.empty() && config_text.back() != '\n') out << "\n";
  if (!out) throw IoError("cannot write config.json in " + dir);
}

namespace {

void write_loss_csv(const std::string& path, const TrainResult& r) {
  std::ofstream out(path);
  out << "step,lr,loss\n";
  char line[96];
  for (std::size_t i = 0; i < r.losses.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", i, r.lrs[i], r.losses[i]);
    out << line;
  }
  if (!out) throw IoError("cannot write " + path);
}

}  // namespace

TrainResult train_loop(MattingModel<float>& model, const TrainConfig& config, const SceneSource& source,
                       const std::string& out_dir, const std::string& config_text, const StepCallback& on_step) {
  validate(config);
  AdamW<float> opt({config.beta1, config.beta2, config.weight_decay, config.adam_eps});
  TrainResult result;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const double lr = lr_schedule(step, config);
    const auto batch = training_batch(config, source, step);
    std::vector<ModelSample> samples;
    std::vector<const Image*> alphas;
    for (const auto& s : batch) {
      samples.push_back({&s.image, &s.prompt, s.opacity});
      alphas.push_back(&s.alpha);
    }
    double loss_value = 0.0;
    try {
      model.params().zero_grad();
      const auto out = model.forward(samples);
      const auto loss = matting_loss(out.alpha, images_to_tensor<float>(alphas, 1), config.grad_loss_weight);
      loss_value = loss.item();
      loss.backward();
      opt.step(model.params(), lr);
    } catch (const NumericError& e) {
      result.diverged = true;
      result.message = "diverged at step " + std::to_string(step) + ": " + e.what();
      break;
    }
    result.losses.push_back(loss_value);
    result.lrs.push_back(lr);
    result.steps_completed = step + 1;
    if (on_step) on_step(step, lr, loss_value);
  }
  model.params().zero_grad();
  if (!out_dir.empty()) {
    save_checkpoint(out_dir, model, config_text);
    write_loss_csv((fs::path(out_dir) / "loss.csv").string(), result);
  }
  return result;
}

template Tensor<float> matting_loss<float>(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> matting_loss<double>(const Tensor<double>&, const Tensor<double>&, double);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace pmatte
