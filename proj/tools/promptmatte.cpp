// promptmatte: data generation, training, evaluation, inference and the
// small arithmetic helpers, behind one entry point.
//
// Exit status: 0 success, 2 bad arguments or configuration, 3 runtime or
// data failures. Diagnostics go to stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "promptmatte/config.hpp"
#include "promptmatte/errors.hpp"
#include "promptmatte/eval.hpp"
#include "promptmatte/metrics.hpp"
#include "promptmatte/synth.hpp"
#include "promptmatte/train.hpp"

namespace fs = std::filesystem;
using namespace pmatte;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::vector<double> parse_values(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t");
    const auto e = cell.find_last_not_of(" \t\r");
    if (b == std::string::npos) throw ArgumentError(what + ": empty value");
    cell = cell.substr(b, e - b + 1);
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end != cell.c_str() + cell.size()) throw ArgumentError(what + ": not a number '" + cell + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ArgumentError(what + ": no values");
  return out;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? parse_run_config("{}") : load_run_config(path);
}

// Either five comma-separated values or an eval CSV whose mean row is used.
MetricRow baseline_row(const std::string& arg) {
  if (fs::is_regular_file(arg)) return read_eval_csv(arg).mean;
  const auto v = parse_values(arg, "--baseline");
  if (v.size() != 5) throw ArgumentError("--baseline: expected mse,mad,sad,grad,conn or an eval CSV");
  return {v[0], v[1], v[2], v[3], v[4]};
}

struct PromptInput {
  VisualPrompt prompt;
  OpacityLabel opacity;
};

PromptInput load_prompt(const std::string& path, const std::string& kind, int opacity) {
  const PromptFile file = read_prompt_file(path);
  if (file.prompts.empty()) throw ArgumentError(path + ": no prompt");
  PromptInput in{kind.empty() ? file.prompts.front() : file.find(parse_prompt_kind(kind)), file.opacity};
  if (opacity >= 0) in.opacity = OpacityLabel{static_cast<std::uint8_t>(opacity)};
  return in;
}

// --- subcommands -----------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::size_t size = 64;
  double duplicate_prob = 0.5;
};

int gen_data(const GenDataArgs& a) {
  SceneOptions o;
  o.height = o.width = a.size;
  o.duplicate_prob = a.duplicate_prob;
  const auto names = write_dataset(a.out, a.count, a.seed, o);
  std::cout << "wrote " << names.size() << " scenes to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out;
  std::size_t log_every = 100;
};

int train(const TrainArgs& a) {
  const RunConfig rc = load_run_config(a.config);
  std::unique_ptr<SceneSource> source;
  if (!a.data.empty()) {
    source = std::make_unique<DatasetSource>(a.data);
  } else {
    SceneOptions o;
    o.height = o.width = rc.train.image_size;
    o.duplicate_prob = rc.train.duplicate_prob;
    source = std::make_unique<SyntheticSource>(o);
  }
  MattingModel<float> model(rc.model, rc.train.seed);
  std::cout << "parameters " << param_count(model.params()) << "\n";
  auto log = [&](std::size_t step, double lr, double loss) {
    if (a.log_every > 0 && (step % a.log_every == 0 || step + 1 == rc.train.steps)) {
      std::printf("step %zu lr %.3e loss %.6f\n", step, lr, loss);
      std::fflush(stdout);
    }
  };
  const auto result = train_loop(model, rc.train, *source, a.out, rc.text, log);
  if (result.diverged) {
    std::cerr << "error: training diverged after " << result.steps_completed << " steps: " << result.message
              << "\nlast finite parameters saved to " << a.out << "\n";
    return kExitRuntime;
  }
  std::cout << "checkpoint written to " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, prompt, out, baseline;
};

int eval(const EvalArgs& a) {
  const PromptKind kind = parse_prompt_kind(a.prompt);
  std::optional<MetricRow> base;
  if (!a.baseline.empty()) base = baseline_row(a.baseline);
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const auto report = evaluate(model_predictor(*ck.model), a.data, kind, ck.config.metrics, base, &std::cerr);
  const std::string out = a.out.empty() ? a.ckpt : a.out;
  fs::create_directories(out);
  const auto stem = (fs::path(out) / ("eval_" + a.prompt)).string();
  write_eval_csv(report, stem + ".csv");
  const auto table = format_eval_table(report);
  std::ofstream(stem + ".txt") << table;
  std::cout << table;
  if (!report.skipped.empty()) std::cerr << "warning: skipped " << report.skipped.size() << " scenes\n";
  if (report.scenes.empty()) {
    std::cerr << "error: no scene could be evaluated\n";
    return kExitRuntime;
  }
  return 0;
}

struct InferArgs {
  std::string ckpt, image, prompt, kind, out;
  int opacity = -1;
};

int infer(const InferArgs& a) {
  const auto in = load_prompt(a.prompt, a.kind, a.opacity);
  const Image image = read_png(a.image);
  const Checkpoint ck = load_checkpoint(a.ckpt);
  write_png(a.out, predict_alpha(*ck.model, image, in.prompt, in.opacity));
  return 0;
}

int viz_attn(const InferArgs& a) {
  const auto in = load_prompt(a.prompt, a.kind, a.opacity);
  const Image image = read_png(a.image);
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const auto map = predict_attention_map(*ck.model, image, in.prompt, in.opacity);
  if (map.degenerate) std::cerr << "warning: attention map is constant\n";
  write_png(a.out, attention_map_image(map, image.height, image.width));
  std::cout << "attention grid " << map.height << "x" << map.width << "\n";
  return 0;
}

struct ImproArgs {
  std::string baseline, method, table;
};

// Table form: the first row is the baseline, every later row is compared to
// it. A leading non-numeric field is taken as the row label; '#' comments.
int impro_cmd(const ImproArgs& a) {
  if (a.table.empty()) {
    if (a.baseline.empty() || a.method.empty()) throw ArgumentError("impro: give --baseline and --method, or --table");
    std::cout << percent(impro(parse_values(a.baseline, "--baseline"), parse_values(a.method, "--method"))) << "\n";
    return 0;
  }
  std::ifstream in(a.table);
  if (!in) throw IoError("cannot read " + a.table);
  std::vector<std::pair<std::string, std::vector<double>>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::string label = "row" + std::to_string(rows.size());
    const auto comma = line.find(',');
    const std::string first = line.substr(0, comma);
    char* end = nullptr;
    std::strtod(first.c_str(), &end);
    if (comma != std::string::npos && (end == first.c_str() || *end != '\0')) {
      label = first;
      line = line.substr(comma + 1);
    }
    rows.emplace_back(label, parse_values(line, a.table));
  }
  if (rows.size() < 2) throw ArgumentError(a.table + ": need a baseline row and at least one method row");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::cout << rows[i].first << "," << percent(impro(rows[0].second, rows[i].second)) << "\n";
  }
  return 0;
}

int params_cmd(const std::string& config) {
  const RunConfig rc = config_or_default(config);
  MattingModel<float> model(rc.model, rc.train.seed);
  std::cout << param_count(model.params()) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-driven alpha matting at desk scale"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a synthetic matting dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--count", gen.count, "Number of scenes")->required();
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--size", gen.size, "Scene height and width")->check(CLI::Range(16, 4096));
  g->add_option("--duplicate-prob", gen.duplicate_prob, "Chance of a distractor copy")->check(CLI::Range(0.0, 1.0));

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config, "JSON run configuration")->required();
  t->add_option("--data", tr.data, "Dataset directory (synthetic scenes on the fly when omitted)");
  t->add_option("--out", tr.out, "Checkpoint directory")->required();
  t->add_option("--log-every", tr.log_every, "Progress line interval in steps (0 disables)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--prompt", ev.prompt, "Prompt kind")->required()->check(CLI::IsMember({"point", "box", "mask"}));
  e->add_option("--out", ev.out, "Report directory (default: the checkpoint)");
  e->add_option("--baseline", ev.baseline, "mse,mad,sad,grad,conn or an eval CSV");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Predict an alpha matte");
  InferArgs viz;
  auto* v = app.add_subcommand("viz-attn", "Export the final cross-attention map");
  for (auto [cmd, args] : {std::pair{i, &inf}, std::pair{v, &viz}}) {
    cmd->add_option("--ckpt", args->ckpt, "Checkpoint directory")->required();
    cmd->add_option("--image", args->image, "RGB PNG")->required()->check(CLI::ExistingFile);
    cmd->add_option("--prompt", args->prompt, "Prompt file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--kind", args->kind, "Prompt kind to use (default: first in file)")
        ->check(CLI::IsMember({"point", "box", "mask"}));
    cmd->add_option("--opacity", args->opacity, "Opacity label (default: from the prompt file, else 1)")
        ->check(CLI::IsMember({0, 1}));
    cmd->add_option("--out", args->out, "Output PNG")->required();
  }

  ImproArgs im;
  auto* p = app.add_subcommand("impro", "Average relative improvement in percent");
  p->add_option("--baseline", im.baseline, "Comma-separated baseline values");
  p->add_option("--method", im.method, "Comma-separated method values");
  p->add_option("--table", im.table, "Table file: baseline row then method rows")->check(CLI::ExistingFile);

  std::string params_config;
  auto* pc = app.add_subcommand("params", "Print the parameter count");
  pc->add_option("--config", params_config, "JSON run configuration (default model when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*g) return gen_data(gen);
    if (*t) return train(tr);
    if (*e) return eval(ev);
    if (*i) return infer(inf);
    if (*v) return viz_attn(viz);
    if (*p) return impro_cmd(im);
    if (*pc) return params_cmd(params_config);
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
