#include "promptmatte/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "promptmatte/errors.hpp"

namespace pmatte {

namespace fs = std::filesystem;

std::size_t worker_count() {
  if (const char* env = std::getenv("PROMPTMATTE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// inference

Image predict_alpha(const MattingModel<float>& model, const Image& image, const VisualPrompt& prompt,
                    OpacityLabel opacity) {
  NoGradGuard guard;
  const auto out = model.forward({{&image, &prompt, opacity}});
  return tensor_plane(out.alpha, 0, 0);
}

AlphaPredictor model_predictor(const MattingModel<float>& model) {
  return [&model](const DatasetScene& scene, const VisualPrompt& prompt, OpacityLabel opacity) {
    return predict_alpha(model, scene.image, prompt, opacity);
  };
}

AttentionMap predict_attention_map(const MattingModel<float>& model, const Image& image,
                                   const VisualPrompt& prompt, OpacityLabel opacity) {
  const auto [qh, qw] = model.final_cross_grid(image.height, image.width);
  NoGradGuard guard;
  const auto prepared = model.prepare({{&image, &prompt, opacity}});
  AttentionProbe probe;
  model.forward(prepared, &probe);
  const std::size_t f = model.config().codec.factor;
  const auto weights = context_token_weights(prepared.raster_images[0], image.height / f, image.width / f);
  return export_attention_map(probe, 0, weights, qh, qw);
}

Image attention_map_image(const AttentionMap& map, std::size_t height, std::size_t width) {
  if (map.height == 0 || map.width == 0) throw ArgumentError("attention map is empty");
  Image out(height, width, 1);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      out.at(y, x) = map.values[(y * map.height / height) * map.width + x * map.width / width];
    }
  return out;
}

// ---------------------------------------------------------------------------
// evaluation

EvalReport evaluate(const AlphaPredictor& predict, const std::string& dataset_dir, PromptKind kind,
                    const MetricConfig& metrics, std::optional<MetricRow> baseline, std::ostream* warnings) {
  const auto names = list_scenes(dataset_dir);
  struct Slot {
    std::optional<MetricRow> row;
    std::string error;
  };
  std::vector<Slot> slots(names.size());
  parallel_for(names.size(), [&](std::size_t i) {
    try {
      const DatasetScene scene = read_scene((fs::path(dataset_dir) / names[i]).string());
      const VisualPrompt& prompt = scene.prompts.find(kind);
      const Image pred = predict(scene, prompt, scene.prompts.opacity);
      slots[i].row = compute_metrics(pred, scene.alpha, metrics);
    } catch (const IoError& e) {
      slots[i].error = e.what();
    } catch (const std::invalid_argument& e) {
      slots[i].error = e.what();
    }
  });
  EvalReport report;
  report.prompt = prompt_kind_name(kind);
  std::vector<MetricRow> rows;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (slots[i].row) {
      report.scenes.push_back({names[i], *slots[i].row});
      rows.push_back(*slots[i].row);
    } else {
      report.skipped.push_back(names[i]);
      if (warnings) *warnings << "warning: skipping " << names[i] << ": " << slots[i].error << "\n";
    }
  }
  report.mean = mean_row(rows);
  if (baseline) {
    report.baseline = baseline;
    const auto b = baseline->values();
    const auto m = report.mean.values();
    report.impro = impro({b.begin(), b.end()}, {m.begin(), m.end()});
  }
  return report;
}

// ---------------------------------------------------------------------------
// report files

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string row_csv(const MetricRow& r) {
  return num(r.mse) + "," + num(r.mad) + "," + num(r.sad) + "," + num(r.grad) + "," + num(r.conn);
}

void check_name(const std::string& name) {
  if (name.find_first_of(",\n") != std::string::npos) throw ArgumentError("name not CSV-safe: " + name);
}

double parse_num(const std::string& s, const std::string& where) {
  if (s.empty()) throw IoError(where + ": missing value");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw IoError(where + ": bad number '" + s + "'");
  return v;
}

}  // namespace

void write_eval_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  out << "record,name,mse,mad,sad,grad,conn,impro\n";
  out << "prompt," << report.prompt << ",,,,,,\n";
  for (const auto& s : report.scenes) {
    check_name(s.name);
    out << "scene," << s.name << "," << row_csv(s.row) << ",\n";
  }
  for (const auto& n : report.skipped) {
    check_name(n);
    out << "skipped," << n << ",,,,,,\n";
  }
  out << "mean,all," << row_csv(report.mean) << "," << (report.impro ? num(*report.impro) : "") << "\n";
  if (report.baseline) out << "baseline,reference," << row_csv(*report.baseline) << ",\n";
  if (!out) throw IoError("cannot write " + path);
}

EvalReport read_eval_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != "record,name,mse,mad,sad,grad,conn,impro") {
    throw IoError(path + ": unexpected header");
  }
  EvalReport report;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.push_back("");
    const std::string where = path + ":" + std::to_string(line_no);
    if (f.size() != 8) throw IoError(where + ": expected 8 fields");
    auto metric_row = [&] {
      return MetricRow{parse_num(f[2], where), parse_num(f[3], where), parse_num(f[4], where),
                       parse_num(f[5], where), parse_num(f[6], where)};
    };
    if (f[0] == "prompt") {
      report.prompt = f[1];
    } else if (f[0] == "scene") {
      report.scenes.push_back({f[1], metric_row()});
    } else if (f[0] == "skipped") {
      report.skipped.push_back(f[1]);
    } else if (f[0] == "mean") {
      report.mean = metric_row();
      if (!f[7].empty()) report.impro = parse_num(f[7], where);
    } else if (f[0] == "baseline") {
      report.baseline = metric_row();
    } else {
      throw IoError(where + ": unknown record '" + f[0] + "'");
    }
  }
  return report;
}

std::string format_eval_table(const EvalReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %6s %7s %10s %10s %10s %10s %10s %9s\n", "Row", "Scenes", "Skipped",
                "MSE", "MAD", "SAD", "Grad", "Conn", "Impro");
  out += line;
  auto add = [&](const char* label, std::size_t n, std::size_t skipped, const MetricRow& r, const std::string& imp) {
    std::snprintf(line, sizeof line, "%-10s %6zu %7zu %10.4f %10.4f %10.4f %10.4f %10.4f %9s\n", label, n, skipped,
                  r.mse, r.mad, r.sad, r.grad, r.conn, imp.c_str());
    out += line;
  };
  if (report.baseline) add("baseline", 0, 0, *report.baseline, "-");
  std::string imp = "-";
  if (report.impro) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", *report.impro);
    imp = buf;
  }
  add(report.prompt.c_str(), report.scenes.size(), report.skipped.size(), report.mean, imp);
  return out;
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw IoError("checkpoint directory not found: " + dir);
  Checkpoint ck;
  ck.config = load_run_config((root / "config.json").string());
  ck.model = std::make_unique<MattingModel<float>>(ck.config.model, ck.config.train.seed);
  load_params(ck.model->params(), (root / "params").string());
  return ck;
}

}  // namespace pmatte
