// kdnet: train / eval / analyze / gradcam for the hybrid distillation models.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include "kd/analysis/gradcam.hpp"
#include "kd/analysis/report.hpp"
#include "kd/data/image_io.hpp"
#include "kd/runconfig.hpp"
#include "kd/train.hpp"

namespace fs = std::filesystem;

namespace {

struct CliOverrides {
  std::string config_path;
  std::string preset;
  bool toy = false;
  bool has_seed = false;
  uint64_t seed = 0;
  std::string out;
  std::string checkpoint;
  std::string image;
  int target_class = -1;
};

kd::RunConfig resolve_config(const CliOverrides& o) {
  kd::json merged = kd::json::object();
  if (!o.preset.empty() && o.toy)
    throw kd::ConfigError("config: --preset and --toy are mutually exclusive");
  if (!o.preset.empty()) merged = kd::preset_config(o.preset);
  if (o.toy) merged = kd::preset_config("toy");
  if (!o.config_path.empty()) {
    std::ifstream is(o.config_path);
    if (!is) throw kd::ConfigError("config: cannot open " + o.config_path);
    kd::json user;
    try {
      is >> user;
    } catch (const std::exception& e) {
      throw kd::ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    merged.merge_patch(user);
  }
  if (merged.empty()) throw kd::ConfigError("config: provide --config, --preset, or --toy");
  kd::RunConfig cfg = kd::run_config_from_json(merged);
  if (o.has_seed) {
    cfg.train.seed = o.seed;
    cfg.split.seed = o.seed;
    cfg.dataset.toy.seed = o.seed;
  }
  if (!o.out.empty()) cfg.output_dir = o.out;
  return cfg;
}

struct PreparedData {
  kd::DatasetManifest manifest;
  std::shared_ptr<kd::ImageProvider> provider;
  kd::NormalizationSpec normalize;
  int num_classes = 0;
};

PreparedData prepare_data(const kd::RunConfig& cfg) {
  PreparedData d;
  if (cfg.dataset.kind == kd::DatasetCfg::Kind::toy) {
    d.manifest = kd::make_toy_manifest(cfg.dataset.toy);
    d.provider = std::make_shared<kd::ToyImageProvider>(cfg.dataset.toy);
  } else {
    if (cfg.dataset.root.empty()) throw kd::ConfigError("config: dataset.root is required");
    d.manifest = kd::scan_image_folder(cfg.dataset.root);
    d.provider = std::make_shared<kd::FolderImageProvider>();
  }
  if (cfg.one_vs_rest) d.manifest = kd::build_one_vs_rest(d.manifest, *cfg.one_vs_rest);
  if (!cfg.split.present)
    throw kd::ConfigError("config: split ratios are required for this dataset");
  d.manifest = kd::assign_splits(d.manifest, cfg.split.ratios, cfg.split.seed);

  d.num_classes = static_cast<int>(d.manifest.class_names.size());
  if (cfg.num_classes != 0 && cfg.num_classes != d.num_classes)
    throw kd::ConfigError("config: model.num_classes disagrees with the dataset (" +
                          std::to_string(cfg.num_classes) + " vs " +
                          std::to_string(d.num_classes) + ")");

  d.normalize.mode = cfg.norm_mode;
  if (cfg.norm_mode == kd::NormalizationSpec::Mode::dataset)
    d.normalize = kd::compute_dataset_stats(d.manifest, *d.provider, kd::Split::train,
                                            cfg.augment.resize);
  return d;
}

kd::DataView make_view(const PreparedData& d, const kd::RunConfig& cfg, kd::Split split) {
  kd::DataView v;
  v.manifest = &d.manifest;
  v.provider = d.provider.get();
  v.split = split;
  v.augment = cfg.augment;
  v.normalize = d.normalize;
  return v;
}

void write_resolved_config(const kd::RunConfig& cfg, const fs::path& dir) {
  std::ofstream os(dir / "config.resolved.json", std::ios::binary);
  if (!os) throw kd::IoError("config: cannot write resolved snapshot");
  os << kd::run_config_to_json(cfg).dump(2) << "\n";
}

std::string gm(int64_t macs) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", static_cast<double>(macs) / 1e9);
  return buf;
}
std::string mm(int64_t params) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", static_cast<double>(params) / 1e6);
  return buf;
}

int cmd_train(const CliOverrides& o) {
  kd::RunConfig cfg = resolve_config(o);
  PreparedData data = prepare_data(cfg);

  kd::StudentNet student(data.num_classes, cfg.student_config(), cfg.train.seed);
  kd::TeacherNet teacher(data.num_classes, cfg.teacher_config(), cfg.train.seed);

  kd::DataView train_view = make_view(data, cfg, kd::Split::train);
  kd::DataView val_view = make_view(data, cfg, kd::Split::val);
  kd::FitResult result = kd::fit(teacher, student, train_view, val_view, cfg.train);

  const fs::path out(cfg.output_dir);
  fs::create_directories(out / "checkpoints");
  write_resolved_config(cfg, out);
  kd::save_manifest(data.manifest, (out / "manifest.json").string());
  kd::write_metrics_csv(result.history, (out / "metrics.csv").string());
  kd::save_checkpoint(result.best_checkpoint, (out / "checkpoints" / "best.kdf").string());

  std::cout << "epochs run: " << result.history.size()
            << (result.early_stopped ? " (early stop)" : "") << "\n"
            << "best epoch: " << result.best_epoch << "\n"
            << "best student main val accuracy: " << result.best_val_accuracy << "\n"
            << "outputs: " << out.string() << "\n";
  return 0;
}

int cmd_eval(const CliOverrides& o) {
  kd::RunConfig cfg = resolve_config(o);
  if (o.checkpoint.empty()) throw kd::ConfigError("eval: --checkpoint is required");
  PreparedData data = prepare_data(cfg);

  kd::StudentNet student(data.num_classes, cfg.student_config(), cfg.train.seed);
  kd::TeacherNet teacher(data.num_classes, cfg.teacher_config(), cfg.train.seed);
  kd::CheckpointRecord rec = kd::load_checkpoint(o.checkpoint);
  kd::load_tensors_into(student, rec, "student/");
  kd::load_tensors_into(teacher, rec, "teacher/");

  std::string csv = "net,head,split,loss,accuracy\n";
  auto rows_for = [&](kd::Split split, const char* split_name) {
    kd::DataView view = make_view(data, cfg, split);
    kd::EvalResult ts = kd::evaluate(teacher, view, cfg.train.batch_size);
    kd::EvalResult ss = kd::evaluate(student, view, cfg.train.batch_size);
    auto row = [&](const char* net, const char* head, const kd::HeadEval& he) {
      csv += std::string(net) + "," + head + "," + split_name + "," + kd::detail::fmt6(he.loss) +
             "," + kd::detail::fmt6(he.accuracy) + "\n";
    };
    row("teacher", "main", ts.main);
    row("teacher", "aux", ts.aux);
    row("student", "main", ss.main);
    row("student", "aux", ss.aux);
  };
  rows_for(kd::Split::val, "val");
  rows_for(kd::Split::test, "test");
  std::cout << csv;

  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  std::ofstream os(out / "eval.csv", std::ios::binary);
  if (!os) throw kd::IoError("eval: cannot write eval.csv");
  os << csv;
  return 0;
}

int cmd_analyze(const CliOverrides& o) {
  kd::RunConfig cfg = resolve_config(o);
  const int classes = cfg.num_classes == 0 ? 2 : cfg.num_classes;
  kd::StudentNet student(classes, cfg.student_config(), cfg.train.seed);
  kd::TeacherNet teacher(classes, cfg.teacher_config(), cfg.train.seed);

  const auto student_layers = student.layers();
  const auto teacher_layers = teacher.layers();
  kd::ParamReport sp = kd::count_params(student_layers);
  kd::ParamReport tp = kd::count_params(teacher_layers);
  kd::FlopReport sf = kd::count_macs(student_layers, cfg.input_size, cfg.input_size);
  kd::FlopReport tf = kd::count_macs(teacher_layers, cfg.input_size, cfg.input_size);

  const fs::path out = fs::path(cfg.output_dir) / "analysis";
  fs::create_directories(out);
  kd::write_param_csv(sp, (out / "params_student.csv").string());
  kd::write_param_csv(tp, (out / "params_teacher.csv").string());
  kd::write_flop_csv(sf, (out / "flops_student.csv").string());
  kd::write_flop_csv(tf, (out / "flops_teacher.csv").string());

  const double param_ratio =
      static_cast<double>(tp.main_total()) / static_cast<double>(sp.main_total());
  const double mac_ratio =
      static_cast<double>(tf.main_macs()) / static_cast<double>(sf.main_macs());
  char rbuf[128];
  std::string summary;
  summary += "input: " + std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) +
             ", classes: " + std::to_string(classes) + "\n";
  summary += "student main path: " + mm(sp.main_total()) + "M params, " + gm(sf.main_macs()) +
             " GFLOPs (1 MAC = 1 FLOP)\n";
  summary += "student per-stage params: ";
  for (const auto& [stage, count] : sp.stage_subtotals)
    if (stage != "head" && stage != "aux") summary += stage + "=" + mm(count) + "M ";
  summary += "\n";
  summary += "student aux branch (reported separately): " + mm(sp.aux_total) + "M params, " +
             gm(sf.aux_macs) + " GFLOPs\n";
  summary += "teacher main path: " + mm(tp.main_total()) + "M params, " + gm(tf.main_macs()) +
             " GFLOPs\n";
  summary += "teacher aux branch (reported separately): " + mm(tp.aux_total) + "M params, " +
             gm(tf.aux_macs) + " GFLOPs\n";
  std::snprintf(rbuf, sizeof(rbuf), "teacher/student param ratio: %.1fx\n", param_ratio);
  summary += rbuf;
  std::snprintf(rbuf, sizeof(rbuf), "teacher/student compute ratio: %.1fx\n", mac_ratio);
  summary += rbuf;
  summary +=
      "reference deployment figures: student ~1.07M params / 0.68 GFLOPs, teacher ~11.18M / "
      "1.82 GFLOPs at 224x224\n";
  std::cout << summary;
  std::ofstream os(out / "summary.txt", std::ios::binary);
  if (!os) throw kd::IoError("analyze: cannot write summary.txt");
  os << summary;
  return 0;
}

int cmd_gradcam(const CliOverrides& o) {
  kd::RunConfig cfg = resolve_config(o);
  if (o.checkpoint.empty()) throw kd::ConfigError("gradcam: --checkpoint is required");
  if (o.image.empty()) throw kd::ConfigError("gradcam: --image is required");

  kd::CheckpointRecord rec = kd::load_checkpoint(o.checkpoint);
  const auto head_it = rec.tensors.find("student/head.fc.bias");
  if (head_it == rec.tensors.end())
    throw kd::LoadError("gradcam: checkpoint has no student head tensors");
  const int classes = static_cast<int>(head_it->second.numel());
  if (o.target_class >= classes)
    throw kd::ConfigError("gradcam: class index out of range [0, " + std::to_string(classes) + ")");

  kd::StudentNet student(classes, cfg.student_config(), cfg.train.seed);
  kd::TeacherNet teacher(classes, cfg.teacher_config(), cfg.train.seed);
  kd::load_tensors_into(student, rec, "student/");
  kd::load_tensors_into(teacher, rec, "teacher/");

  kd::Tensor<float> img = kd::decode_image(o.image);
  img = kd::resize_bilinear(img, cfg.augment.resize, cfg.augment.resize);
  kd::NormalizationSpec norm;  // fixed statistics for standalone images
  kd::normalize_image(img, norm);
  kd::Tensor<float> batch({1, 3, cfg.augment.resize, cfg.augment.resize}, std::move(img.data));

  const fs::path out = fs::path(cfg.output_dir) / "gradcam";
  fs::create_directories(out);
  for (const auto& net : cfg.gradcam_nets) {
    kd::GradCamMap map = net == "student" ? kd::grad_cam(student, batch, o.target_class)
                                          : kd::grad_cam(teacher, batch, o.target_class);
    const std::string base = net + "_main_class" + std::to_string(map.target_class);
    kd::write_pgm(map.normalized, (out / (base + ".pgm")).string());
    kd::write_matrix_csv(map.raw, (out / (base + ".csv")).string());
    std::cout << net << ": class " << map.target_class << " -> " << (out / base).string()
              << ".{pgm,csv}\n";
  }
  return 0;
}

int dispatch(const std::string& cmd, const CliOverrides& o) {
  if (cmd == "train" || cmd == "toy-run") return cmd_train(o);
  if (cmd == "eval") return cmd_eval(o);
  if (cmd == "analyze") return cmd_analyze(o);
  if (cmd == "gradcam") return cmd_gradcam(o);
  throw kd::ConfigError("unknown command " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid knowledge-distillation training and analysis"};
  app.require_subcommand(1);

  CliOverrides o;
  auto add_common = [&](CLI::App* sub, bool with_toy) {
    sub->add_option("--config", o.config_path, "JSON run configuration");
    sub->add_option("--preset", o.preset,
                    "preset name: rice-variety, rice-leaf, potato-leaf, coffee-leaf, corn-leaf");
    sub->add_option("--seed", o.seed, "run seed override")->each([&](const std::string&) {
      o.has_seed = true;
    });
    sub->add_option("--out", o.out, "output directory override");
    if (with_toy) sub->add_flag("--toy", o.toy, "use the built-in synthetic toy dataset");
  };

  CLI::App* train = app.add_subcommand("train", "sequential online distillation run");
  add_common(train, true);
  CLI::App* toyrun = app.add_subcommand("toy-run", "train on the synthetic toy dataset");
  add_common(toyrun, false);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval, true);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  CLI::App* analyze = app.add_subcommand("analyze", "parameter and FLOP reports");
  add_common(analyze, false);
  CLI::App* gradcam = app.add_subcommand("gradcam", "class activation heatmaps");
  add_common(gradcam, true);
  gradcam->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  gradcam->add_option("--image", o.image, "input image (JPEG/PNG)");
  gradcam->add_option("--class", o.target_class, "target class index (default: argmax)");

  CLI11_PARSE(app, argc, argv);
  std::string cmd = app.get_subcommands().front()->get_name();
  if (cmd == "toy-run") o.toy = true;

  try {
    return dispatch(cmd, o);
  } catch (const kd::LoadError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const kd::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const kd::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const kd::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const kd::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
