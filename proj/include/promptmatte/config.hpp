#pragma once

// JSON run configuration. Every key is optional; unknown keys are rejected.
//
// {
//   "model": {
//     "codec": {"mode": "learned", "factor": 4, "latent_channels": 4},
//     "base_channels": 32, "multipliers": [1, 2, 4], "res_blocks": 2,
//     "heads": 4, "cond_dim": 256, "context_dim": 64,
//     "masked_self": "down+mid+up", "prompt_cross": "mid",
//     "mask_mode": "log", "point_sigma": 0.1
//   },
//   "train": {"lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "weight_decay": 0.01,
//             "adam_eps": 1e-8, "warmup_steps": 200, "decay_rate": 0.9995,
//             "steps": 3000, "batch_size": 4, "prompt_mix": [p, b, m],
//             "duplicate_prob": 0.5, "grad_loss_weight": 0.5,
//             "image_size": 64, "seed": 0, "data_seed": 1},
//   "metrics": {"grad_sigma": 1.4, "conn_step": 0.1}
// }

#include <string>

#include "promptmatte/metrics.hpp"
#include "promptmatte/model.hpp"
#include "promptmatte/train.hpp"

namespace pmatte {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  MetricConfig metrics;
  std::string text = "{}";  // source document, echoed into checkpoints
};

// Throws ArgumentError on malformed JSON, unknown keys, wrong types or
// invalid values.
RunConfig parse_run_config(const std::string& json_text);
// Reads and parses a file; IoError if unreadable.
RunConfig load_run_config(const std::string& path);

// Canonical JSON for a configuration (every field spelled out).
std::string run_config_json(const RunConfig& config);

}  // namespace pmatte
