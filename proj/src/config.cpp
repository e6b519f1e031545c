#include "promptmatte/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "promptmatte/errors.hpp"

namespace pmatte {

using nlohmann::json;

namespace {

// Reads typed fields from one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& node, std::string where) : node_(node), where_(std::move(where)) {
    if (!node_.is_object()) throw ArgumentError(where_ + ": expected an object");
  }

  template <typename V>
  void read(const char* key, V& out) {
    seen_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<V>) {
        if (!it->is_number_unsigned()) throw ArgumentError("");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!it->is_number()) throw ArgumentError("");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!it->is_string()) throw ArgumentError("");
      }
      out = it->template get<V>();
    } catch (const std::exception&) {
      throw ArgumentError(where_ + "." + key + ": wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : node_.items()) {
      if (!seen_.count(k)) throw ArgumentError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& node_;
  std::string where_;
  std::set<std::string> seen_;
};

FamilySet parse_families(const std::string& text, const std::string& where) {
  try {
    return FamilySet::parse(text);
  } catch (const ArgumentError& e) {
    throw ArgumentError(where + ": " + e.what());
  }
}

MaskBiasMode parse_mask_mode(const std::string& s) {
  if (s == "log") return MaskBiasMode::kLog;
  if (s == "large_negative") return MaskBiasMode::kLargeNegative;
  throw ArgumentError("model.mask_mode: expected 'log' or 'large_negative', got '" + s + "'");
}

const char* mask_mode_name(MaskBiasMode m) { return m == MaskBiasMode::kLog ? "log" : "large_negative"; }

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ArgumentError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig rc;
  rc.text = json_text;
  Section top(doc, "config");
  if (const json* m = top.child("model")) {
    Section s(*m, "model");
    auto& u = rc.model.unet;
    if (const json* c = s.child("codec")) {
      Section cs(*c, "model.codec");
      std::string mode = codec_mode_name(rc.model.codec.mode);
      cs.read("mode", mode);
      rc.model.codec.mode = parse_codec_mode(mode);
      cs.read("factor", rc.model.codec.factor);
      cs.read("latent_channels", rc.model.codec.latent_channels);
      cs.finish();
    }
    u.latent_channels = rc.model.codec.latent_channels;
    s.read("base_channels", u.base_channels);
    s.read("multipliers", u.multipliers);
    s.read("res_blocks", u.res_blocks);
    s.read("heads", u.heads);
    s.read("cond_dim", u.cond_dim);
    s.read("context_dim", u.context_dim);
    std::string masked = u.placement.masked_self.str(), cross = u.placement.prompt_cross.str();
    s.read("masked_self", masked);
    s.read("prompt_cross", cross);
    u.placement.masked_self = parse_families(masked, "model.masked_self");
    u.placement.prompt_cross = parse_families(cross, "model.prompt_cross");
    std::string mode = mask_mode_name(u.mask_mode);
    s.read("mask_mode", mode);
    u.mask_mode = parse_mask_mode(mode);
    s.read("point_sigma", rc.model.point_sigma);
    s.finish();
  }
  if (const json* t = top.child("train")) {
    Section s(*t, "train");
    auto& c = rc.train;
    s.read("lr", c.lr);
    s.read("beta1", c.beta1);
    s.read("beta2", c.beta2);
    s.read("weight_decay", c.weight_decay);
    s.read("adam_eps", c.adam_eps);
    s.read("warmup_steps", c.warmup_steps);
    s.read("decay_rate", c.decay_rate);
    s.read("steps", c.steps);
    s.read("batch_size", c.batch_size);
    std::vector<double> mix(c.prompt_mix.begin(), c.prompt_mix.end());
    s.read("prompt_mix", mix);
    if (mix.size() != 3) throw ArgumentError("train.prompt_mix: expected 3 probabilities (point, box, mask)");
    std::copy(mix.begin(), mix.end(), c.prompt_mix.begin());
    s.read("duplicate_prob", c.duplicate_prob);
    s.read("grad_loss_weight", c.grad_loss_weight);
    s.read("image_size", c.image_size);
    s.read("seed", c.seed);
    s.read("data_seed", c.data_seed);
    s.finish();
  }
  if (const json* m = top.child("metrics")) {
    Section s(*m, "metrics");
    s.read("grad_sigma", rc.metrics.grad_sigma);
    s.read("conn_step", rc.metrics.conn_step);
    s.finish();
  }
  top.finish();
  validate(rc.model);
  validate(rc.train);
  if (!(rc.metrics.grad_sigma > 0.0)) throw ArgumentError("metrics.grad_sigma must be positive");
  if (!(rc.metrics.conn_step > 0.0 && rc.metrics.conn_step <= 0.5)) {
    throw ArgumentError("metrics.conn_step must lie in (0, 0.5]");
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_json(const RunConfig& rc) {
  const auto& u = rc.model.unet;
  const auto& t = rc.train;
  json doc;
  doc["model"] = {
      {"codec",
       {{"mode", codec_mode_name(rc.model.codec.mode)},
        {"factor", rc.model.codec.factor},
        {"latent_channels", rc.model.codec.latent_channels}}},
      {"base_channels", u.base_channels},
      {"multipliers", u.multipliers},
      {"res_blocks", u.res_blocks},
      {"heads", u.heads},
      {"cond_dim", u.cond_dim},
      {"context_dim", u.context_dim},
      {"masked_self", u.placement.masked_self.str()},
      {"prompt_cross", u.placement.prompt_cross.str()},
      {"mask_mode", mask_mode_name(u.mask_mode)},
      {"point_sigma", rc.model.point_sigma},
  };
  doc["train"] = {
      {"lr", t.lr},
      {"beta1", t.beta1},
      {"beta2", t.beta2},
      {"weight_decay", t.weight_decay},
      {"adam_eps", t.adam_eps},
      {"warmup_steps", t.warmup_steps},
      {"decay_rate", t.decay_rate},
      {"steps", t.steps},
      {"batch_size", t.batch_size},
      {"prompt_mix", t.prompt_mix},
      {"duplicate_prob", t.duplicate_prob},
      {"grad_loss_weight", t.grad_loss_weight},
      {"image_size", t.image_size},
      {"seed", t.seed},
      {"data_seed", t.data_seed},
  };
  doc["metrics"] = {{"grad_sigma", rc.metrics.grad_sigma}, {"conn_step", rc.metrics.conn_step}};
  return doc.dump(2) + "\n";
}

}  // namespace pmatte
