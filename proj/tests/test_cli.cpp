#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "promptmatte/eval.hpp"
#include "promptmatte/train.hpp"

using namespace pmatte;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(PMATTE_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {-1, ""};
  std::string out;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("pmatte_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const char* kTinyConfig = R"({
  "model": {"base_channels": 8, "multipliers": [1, 2], "res_blocks": 1, "heads": 2,
            "cond_dim": 16, "context_dim": 8},
  "train": {"steps": 2, "batch_size": 2, "image_size": 32, "warmup_steps": 1, "seed": 4}
})";

}  // namespace

TEST(cli, impro_prints_the_percentage) {
  auto r = run_cli("impro --baseline 0.0302,0.0388,66.27,46.63,18.77 --method 0.0109,0.0189,31.80,26.84,17.51");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "43.27\n");
}

TEST(cli, impro_table) {
  const auto dir = scratch("impro");
  std::ofstream(dir / "t.csv") << "# baseline first\nbase,2,4\n1,2\nhalf,1,2\n";
  auto r = run_cli("impro --table " + (dir / "t.csv").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "row1,50.00\nhalf,50.00\n");
  fs::remove_all(dir);
}

TEST(cli, exit_codes) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("--help").code, 0);
  EXPECT_EQ(run_cli("impro --baseline 1,2").code, 2);
  EXPECT_EQ(run_cli("impro --baseline 1,0 --method 1,1").code, 2);
  EXPECT_EQ(run_cli("eval --ckpt /nonexistent --data /nonexistent --prompt box").code, 3);
  EXPECT_EQ(run_cli("eval --ckpt a --data b --prompt lasso").code, 2);
  const auto dir = scratch("codes");
  std::ofstream(dir / "bad.json") << R"({"train": {"epochs": 3}})";
  EXPECT_EQ(run_cli("params --config " + (dir / "bad.json").string()).code, 2);
  EXPECT_EQ(run_cli("params --config " + (dir / "missing.json").string()).code, 3);
  fs::remove_all(dir);
}

TEST(cli, gen_data_empty_and_small) {
  const auto dir = scratch("gen");
  auto r = run_cli("gen-data --out " + (dir / "empty").string() + " --count 0 --seed 1");
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(fs::is_regular_file(dir / "empty" / "manifest.txt"));
  EXPECT_TRUE(list_scenes((dir / "empty").string()).empty());
  EXPECT_EQ(run_cli("gen-data --out " + (dir / "a").string() + " --count 3 --seed 9 --size 32").code, 0);
  EXPECT_EQ(run_cli("gen-data --out " + (dir / "b").string() + " --count 3 --seed 9 --size 32").code, 0);
  ASSERT_EQ(list_scenes((dir / "a").string()).size(), 3u);
  for (const auto& n : list_scenes((dir / "a").string())) {
    EXPECT_EQ(read_png((dir / "a" / n / "image.png").string()).values,
              read_png((dir / "b" / n / "image.png").string()).values);
  }
  fs::remove_all(dir);
}

TEST(cli, train_eval_infer_and_viz_attn) {
  const auto dir = scratch("pipeline");
  std::ofstream(dir / "config.json") << kTinyConfig;
  const auto data = (dir / "data").string(), ckpt = (dir / "ckpt").string();
  ASSERT_EQ(run_cli("gen-data --out " + data + " --count 3 --seed 2 --size 32").code, 0);
  ASSERT_EQ(run_cli("train --config " + (dir / "config.json").string() + " --data " + data + " --out " + ckpt).code, 0);
  EXPECT_TRUE(fs::is_regular_file(dir / "ckpt" / "loss.csv"));

  auto count = run_cli("params --config " + (dir / "config.json").string());
  auto ck = load_checkpoint(ckpt);
  EXPECT_EQ(count.out, std::to_string(param_count(ck.model->params())) + "\n");

  auto r = run_cli("eval --ckpt " + ckpt + " --data " + data + " --prompt box --baseline 0.1,0.1,1,1,1");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("Impro"), std::string::npos);
  const auto report = read_eval_csv((dir / "ckpt" / "eval_box.csv").string());
  EXPECT_EQ(report, evaluate(model_predictor(*ck.model), data, PromptKind::kBox, ck.config.metrics,
                             MetricRow{0.1, 0.1, 1, 1, 1}));

  // Oracle fixture: the stored alpha is this checkpoint's own prediction.
  const auto scene_dir = dir / "data" / list_scenes(data)[0];
  const auto scene = read_scene(scene_dir.string());
  const auto& prompt = scene.prompts.find(PromptKind::kMask);
  write_png((scene_dir / "alpha.png").string(), predict_alpha(*ck.model, scene.image, prompt, scene.prompts.opacity));
  const auto stored = read_png((scene_dir / "alpha.png").string());
  const std::string io = " --ckpt " + ckpt + " --image " + (scene_dir / "image.png").string() + " --prompt " +
                         (scene_dir / "prompt.txt").string() + " --kind mask";
  ASSERT_EQ(run_cli("infer" + io + " --out " + (dir / "pred.png").string()).code, 0);
  const auto pred = read_png((dir / "pred.png").string());
  ASSERT_EQ(pred.values.size(), stored.values.size());
  for (std::size_t k = 0; k < pred.values.size(); ++k) ASSERT_LE(std::abs(pred.values[k] - stored.values[k]), 1.0 / 255);

  ASSERT_EQ(run_cli("viz-attn" + io + " --out " + (dir / "attn.png").string()).code, 0);
  const auto attn = read_png((dir / "attn.png").string());
  EXPECT_EQ(attn.height, 32u);
  EXPECT_EQ(attn.channels, 1u);
  fs::remove_all(dir);
}
