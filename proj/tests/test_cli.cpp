// End-to-end command-line runs against the built binary.
#include "testutil.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "kd/runconfig.hpp"

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(KD_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// Small toy run that finishes in seconds.
void write_tiny_config(const std::filesystem::path& path) {
  kd::json j = {
      {"dataset",
       {{"kind", "toy"}, {"classes", 2}, {"per_class", 12}, {"image_size", 32}, {"seed", 0}}},
      {"split", {{"ratios", {0.67, 0.17, 0.16}}, {"seed", 0}}},
      {"train",
       {{"epochs", 2},
        {"batch_size", 8},
        {"learning_rate", 1e-3},
        {"early_stop_patience", 2},
        {"seed", 0}}},
      {"augment", {{"resize", 32}}},
      {"normalize", {{"mode", "dataset"}}},
      {"model", {{"input_size", 32}}},
  };
  std::ofstream os(path);
  os << j.dump(2);
}

}  // namespace

TEST_CASE("presets resolve the published hyperparameters", "[cli]") {
  kd::RunConfig rice = kd::run_config_from_json(kd::preset_config("rice-variety"));
  REQUIRE(rice.train.loss_weights.lambda1 == Catch::Approx(0.3f));
  REQUIRE(rice.train.loss_weights.lambda2 == Catch::Approx(0.7f));
  REQUIRE(rice.train.loss_weights.lambda3 == Catch::Approx(0.7f));
  REQUIRE(rice.train.loss_weights.lambda4 == Catch::Approx(0.7f));
  REQUIRE(rice.train.loss_weights.tau == Catch::Approx(4.0f));
  REQUIRE(rice.train.loss_weights.tau_prime == Catch::Approx(4.0f));
  REQUIRE(rice.augment.rotation_deg == 10.0);
  REQUIRE(rice.augment.hflip);
  REQUIRE(rice.augment.vflip);
  REQUIRE_FALSE(rice.split.present);  // ratios are run-specific for this dataset
  REQUIRE(rice.train.batch_size == 64);

  kd::RunConfig potato = kd::run_config_from_json(kd::preset_config("potato-leaf"));
  REQUIRE(potato.train.optimizer == kd::OptimizerConfig::Kind::adamw);
  REQUIRE(potato.train.batch_size == 4);
  REQUIRE(potato.train.weight_decay == Catch::Approx(1e-2));
  REQUIRE(potato.train.loss_weights.lambda1 == Catch::Approx(0.2f));
  REQUIRE(potato.train.loss_weights.lambda2 == Catch::Approx(1.0f));
  REQUIRE(potato.split.ratios[0] == Catch::Approx(0.81));

  kd::RunConfig corn = kd::run_config_from_json(kd::preset_config("corn-leaf"));
  REQUIRE(corn.train.batch_size == 8);
  REQUIRE(corn.augment.rotation_deg == 30.0);
  REQUIRE(corn.split.ratios[2] == Catch::Approx(0.20));

  REQUIRE_THROWS_AS(kd::preset_config("unknown"), kd::ConfigError);
}

TEST_CASE("config schema rejects unknown keys", "[cli]") {
  kd::json j = kd::preset_config("toy");
  j["surprise"] = 1;
  REQUIRE_THROWS_AS(kd::run_config_from_json(j), kd::ConfigError);
  kd::json j2 = kd::preset_config("toy");
  j2["train"]["lr"] = 0.1;
  REQUIRE_THROWS_AS(kd::run_config_from_json(j2), kd::ConfigError);
  // and the binary exits with the config code
  auto dir = kdtest::temp_dir("cli_badcfg");
  std::ofstream(dir / "bad.json") << R"({"dataset": {"kind": "toy"}, "oops": true})";
  REQUIRE(run_cli("train --config " + (dir / "bad.json").string()) == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("analyze: deterministic reports and summary ratios", "[cli]") {
  auto dir = kdtest::temp_dir("cli_analyze");
  const std::string out1 = (dir / "a").string(), out2 = (dir / "b").string();
  REQUIRE(run_cli("analyze --preset rice-variety --out " + out1) == 0);
  REQUIRE(run_cli("analyze --preset rice-variety --out " + out2) == 0);
  for (const char* f :
       {"analysis/params_student.csv", "analysis/params_teacher.csv", "analysis/flops_student.csv",
        "analysis/flops_teacher.csv", "analysis/summary.txt"})
    REQUIRE(slurp(dir / "a" / f) == slurp(dir / "b" / f));

  const std::string summary = slurp(dir / "a" / "analysis" / "summary.txt");
  REQUIRE(summary.find("param ratio") != std::string::npos);
  REQUIRE(summary.find("compute ratio") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train/eval/gradcam round trip on a tiny toy config", "[cli]") {
  auto dir = kdtest::temp_dir("cli_train");
  write_tiny_config(dir / "run.json");
  const std::string out = (dir / "out").string();
  REQUIRE(run_cli("train --config " + (dir / "run.json").string() + " --out " + out) == 0);
  REQUIRE(std::filesystem::exists(dir / "out" / "metrics.csv"));
  REQUIRE(std::filesystem::exists(dir / "out" / "config.resolved.json"));
  REQUIRE(std::filesystem::exists(dir / "out" / "manifest.json"));
  REQUIRE(std::filesystem::exists(dir / "out" / "checkpoints" / "best.kdf"));

  // identical rerun: byte-identical metrics
  const std::string out2 = (dir / "out2").string();
  REQUIRE(run_cli("train --config " + (dir / "run.json").string() + " --out " + out2) == 0);
  REQUIRE(slurp(dir / "out" / "metrics.csv") == slurp(dir / "out2" / "metrics.csv"));

  // the resolved snapshot alone reproduces the run
  const std::string out3 = (dir / "out3").string();
  REQUIRE(run_cli("train --config " + (dir / "out" / "config.resolved.json").string() + " --out " +
                  out3) == 0);
  REQUIRE(slurp(dir / "out" / "metrics.csv") == slurp(dir / "out3" / "metrics.csv"));

  // eval on the saved checkpoint reproduces the logged best val accuracy
  const std::string eval_out = (dir / "eval").string();
  REQUIRE(run_cli("eval --config " + (dir / "run.json").string() + " --checkpoint " + out +
                  "/checkpoints/best.kdf --out " + eval_out) == 0);
  const std::string eval_csv = slurp(dir / "eval" / "eval.csv");
  // pull the student main val accuracy out of both CSVs and compare
  auto find_val_acc = [](const std::string& csv, const std::string& prefix) {
    std::istringstream is(csv);
    std::string line, best;
    while (std::getline(is, line))
      if (line.rfind(prefix, 0) == 0) best = line;
    REQUIRE_FALSE(best.empty());
    return best.substr(best.rfind(',') + 1);
  };
  const std::string eval_acc = find_val_acc(eval_csv, "student,main,val");
  const std::string metrics = slurp(dir / "out" / "metrics.csv");
  // best epoch's student main val accuracy appears in the metrics history
  bool found = false;
  std::istringstream ms(metrics);
  std::string line;
  while (std::getline(ms, line))
    if (line.find("student,main,val") != std::string::npos &&
        line.substr(line.rfind(',') + 1) == eval_acc)
      found = true;
  REQUIRE(found);

  // missing checkpoint: exit 4
  REQUIRE(run_cli("eval --config " + (dir / "run.json").string() + " --checkpoint " +
                  (dir / "nope.kdf").string()) == 4);

  // gradcam outputs: identical across reruns, class bound enforced
  cv::Mat img(40, 40, CV_8UC3, cv::Scalar(30, 180, 90));
  const std::string img_path = (dir / "probe.png").string();
  cv::imwrite(img_path, img);
  const std::string g1 = (dir / "g1").string(), g2 = (dir / "g2").string();
  REQUIRE(run_cli("gradcam --config " + (dir / "run.json").string() + " --checkpoint " + out +
                  "/checkpoints/best.kdf --image " + img_path + " --class 1 --out " + g1) == 0);
  REQUIRE(run_cli("gradcam --config " + (dir / "run.json").string() + " --checkpoint " + out +
                  "/checkpoints/best.kdf --image " + img_path + " --class 1 --out " + g2) == 0);
  REQUIRE(std::filesystem::exists(dir / "g1" / "gradcam" / "student_main_class1.pgm"));
  REQUIRE(slurp(dir / "g1" / "gradcam" / "student_main_class1.csv") ==
          slurp(dir / "g2" / "gradcam" / "student_main_class1.csv"));
  REQUIRE(slurp(dir / "g1" / "gradcam" / "teacher_main_class1.csv") ==
          slurp(dir / "g2" / "gradcam" / "teacher_main_class1.csv"));

  // PGM dims match the resize target (32x32 for this config)
  const std::string pgm = slurp(dir / "g1" / "gradcam" / "student_main_class1.pgm");
  REQUIRE(pgm.rfind("P5\n32 32\n255\n", 0) == 0);

  REQUIRE(run_cli("gradcam --config " + (dir / "run.json").string() + " --checkpoint " + out +
                  "/checkpoints/best.kdf --image " + img_path + " --class 9 --out " + g1) == 1);
  REQUIRE(run_cli("gradcam --config " + (dir / "run.json").string() + " --checkpoint " + out +
                  "/checkpoints/best.kdf --image " + (dir / "missing.png").string() + " --out " +
                  g1) == 2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("toy-run is an alias for train --toy", "[cli]") {
  // resolves without error and produces the toy dataset configuration
  kd::RunConfig toy = kd::run_config_from_json(kd::preset_config("toy"));
  REQUIRE(toy.dataset.kind == kd::DatasetCfg::Kind::toy);
  REQUIRE(toy.dataset.toy.num_classes == 2);
  REQUIRE(toy.dataset.toy.per_class == 200);
  REQUIRE(toy.dataset.toy.image_size == 64);
  REQUIRE(toy.train.epochs <= 30);
}
