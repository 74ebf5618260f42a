#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kd/data/batch.hpp"
#include "kd/train.hpp"

namespace kd {

using json = nlohmann::json;

namespace detail {
inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                           const std::string& ctx) {
  if (!j.is_object()) throw ConfigError("config: '" + ctx + "' must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw ConfigError("config: unknown key '" + item.key() + "' in " + ctx);
  }
}
}  // namespace detail

struct DatasetCfg {
  enum class Kind { folder, toy };
  Kind kind = Kind::toy;
  std::string root;  // folder datasets
  ToySpec toy;
};

struct SplitCfg {
  bool present = false;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  uint64_t seed = 0;
};

// Fully resolved description of one run. Serializing and re-loading this is
// enough to reproduce a run byte-for-byte.
struct RunConfig {
  DatasetCfg dataset;
  SplitCfg split;
  std::optional<OneVsRestSpec> one_vs_rest;
  TrainConfig train;
  AugmentationSpec augment;
  NormalizationSpec::Mode norm_mode = NormalizationSpec::Mode::fixed;
  int num_classes = 0;      // 0: derive from the dataset (analyze falls back to 2)
  int64_t input_size = 224;  // analysis input resolution
  int64_t growth_rate = 16;
  int64_t expansion = 3;
  std::string output_dir = "runs/latest";
  std::vector<std::string> gradcam_nets{"student", "teacher"};

  StudentConfig student_config() const {
    StudentConfig c;
    c.block.growth_rate = growth_rate;
    c.block.bottleneck_width = 4 * growth_rate;
    c.block.expansion = expansion;
    return c;
  }
  TeacherConfig teacher_config() const {
    TeacherConfig c;
    c.aux_out_channels = student_config().aux_feature_width();
    return c;
  }

  void validate() const {
    train.validate();
    augment.validate();
    if (num_classes != 0 && num_classes < 2)
      throw ConfigError("config: num_classes must be 0 (auto) or >= 2");
    if (input_size < 32 || input_size % 32 != 0)
      throw ConfigError("config: input_size must be >= 32 and divisible by 32");
    if (dataset.kind == DatasetCfg::Kind::toy) dataset.toy.validate();
    for (const auto& n : gradcam_nets)
      if (n != "student" && n != "teacher")
        throw ConfigError("config: gradcam nets must be 'student' or 'teacher'");
  }
};

inline json run_config_to_json(const RunConfig& c) {
  json j;
  if (c.dataset.kind == DatasetCfg::Kind::folder) {
    j["dataset"] = {{"kind", "folder"}, {"root", c.dataset.root}};
  } else {
    j["dataset"] = {{"kind", "toy"},
                    {"classes", c.dataset.toy.num_classes},
                    {"per_class", c.dataset.toy.per_class},
                    {"image_size", c.dataset.toy.image_size},
                    {"seed", c.dataset.toy.seed},
                    {"noise_sigma", c.dataset.toy.noise_sigma}};
  }
  if (c.split.present)
    j["split"] = {{"ratios", c.split.ratios}, {"seed", c.split.seed}};
  if (c.one_vs_rest) {
    j["one_vs_rest"] = {{"target", c.one_vs_rest->target},
                        {"seed", c.one_vs_rest->seed},
                        {"margin", c.one_vs_rest->margin}};
    if (c.one_vs_rest->negative_count)
      j["one_vs_rest"]["negative_count"] = *c.one_vs_rest->negative_count;
  }
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"optimizer", c.train.optimizer == OptimizerConfig::Kind::adamw ? "adamw" : "adam"},
                {"learning_rate", c.train.learning_rate},
                {"weight_decay", c.train.weight_decay},
                {"teacher_learning_rate", c.train.teacher_learning_rate},
                {"early_stop_patience", c.train.early_stop_patience},
                {"seed", c.train.seed}};
  j["loss"] = {{"lambda1", c.train.loss_weights.lambda1},
               {"lambda2", c.train.loss_weights.lambda2},
               {"lambda3", c.train.loss_weights.lambda3},
               {"lambda4", c.train.loss_weights.lambda4},
               {"tau", c.train.loss_weights.tau},
               {"tau_prime", c.train.loss_weights.tau_prime},
               {"feature_loss", c.train.feature_loss == FeatureLossKind::mse ? "mse" : "euclidean"},
               {"kl_direction",
                c.train.kl_direction == KlDirection::literal ? "literal" : "mentor_targets"}};
  j["augment"] = {{"resize", c.augment.resize},
                  {"hflip", c.augment.hflip},
                  {"vflip", c.augment.vflip},
                  {"rotation_deg", c.augment.rotation_deg},
                  {"color_jitter", c.augment.color_jitter},
                  {"affine", c.augment.affine}};
  j["normalize"] = {{"mode", c.norm_mode == NormalizationSpec::Mode::dataset ? "dataset" : "fixed"}};
  j["model"] = {{"num_classes", c.num_classes},
                {"input_size", c.input_size},
                {"growth_rate", c.growth_rate},
                {"expansion", c.expansion}};
  j["gradcam"] = {{"nets", c.gradcam_nets}};
  j["output_dir"] = c.output_dir;
  return j;
}

inline RunConfig run_config_from_json(const json& j) {
  detail::reject_unknown(j,
                         {"dataset", "split", "one_vs_rest", "train", "loss", "augment",
                          "normalize", "model", "gradcam", "output_dir"},
                         "config");
  RunConfig c;
  if (!j.contains("dataset")) throw ConfigError("config: missing 'dataset'");
  {
    const json& d = j.at("dataset");
    detail::reject_unknown(d, {"kind", "root", "classes", "per_class", "image_size", "seed",
                               "noise_sigma"},
                           "dataset");
    const std::string kind = d.at("kind").get<std::string>();
    if (kind == "folder") {
      c.dataset.kind = DatasetCfg::Kind::folder;
      c.dataset.root = d.value("root", std::string{});
    } else if (kind == "toy") {
      c.dataset.kind = DatasetCfg::Kind::toy;
      c.dataset.toy.num_classes = d.value("classes", 2);
      c.dataset.toy.per_class = d.value("per_class", 200);
      c.dataset.toy.image_size = d.value("image_size", 64);
      c.dataset.toy.seed = d.value("seed", uint64_t{0});
      c.dataset.toy.noise_sigma = d.value("noise_sigma", 0.1);
    } else {
      throw ConfigError("config: dataset.kind must be 'folder' or 'toy'");
    }
  }
  if (j.contains("split")) {
    const json& s = j.at("split");
    detail::reject_unknown(s, {"ratios", "seed"}, "split");
    c.split.present = true;
    const auto r = s.at("ratios").get<std::vector<double>>();
    if (r.size() != 3) throw ConfigError("config: split.ratios must have 3 entries");
    c.split.ratios = {r[0], r[1], r[2]};
    c.split.seed = s.value("seed", uint64_t{0});
  }
  if (j.contains("one_vs_rest")) {
    const json& o = j.at("one_vs_rest");
    detail::reject_unknown(o, {"target", "seed", "margin", "negative_count"}, "one_vs_rest");
    OneVsRestSpec spec;
    spec.target = o.at("target").get<std::string>();
    spec.seed = o.value("seed", uint64_t{0});
    spec.margin = o.value("margin", int64_t{0});
    if (o.contains("negative_count")) spec.negative_count = o.at("negative_count").get<int64_t>();
    c.one_vs_rest = spec;
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    detail::reject_unknown(t,
                           {"epochs", "batch_size", "optimizer", "learning_rate", "weight_decay",
                            "teacher_learning_rate", "early_stop_patience", "seed"},
                           "train");
    c.train.epochs = t.value("epochs", 100);
    c.train.batch_size = t.value("batch_size", 64);
    const std::string opt = t.value("optimizer", std::string("adam"));
    if (opt == "adam")
      c.train.optimizer = OptimizerConfig::Kind::adam;
    else if (opt == "adamw")
      c.train.optimizer = OptimizerConfig::Kind::adamw;
    else
      throw ConfigError("config: train.optimizer must be 'adam' or 'adamw'");
    c.train.learning_rate = t.value("learning_rate", 1e-4);
    c.train.weight_decay = t.value("weight_decay", 1e-2);
    c.train.teacher_learning_rate = t.value("teacher_learning_rate", -1.0);
    c.train.early_stop_patience = t.value("early_stop_patience", 20);
    c.train.seed = t.value("seed", uint64_t{0});
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    detail::reject_unknown(
        l, {"lambda1", "lambda2", "lambda3", "lambda4", "tau", "tau_prime", "feature_loss",
            "kl_direction"},
        "loss");
    auto& w = c.train.loss_weights;
    w.lambda1 = l.value("lambda1", 0.3f);
    w.lambda2 = l.value("lambda2", 0.7f);
    w.lambda3 = l.value("lambda3", 0.7f);
    w.lambda4 = l.value("lambda4", 0.7f);
    w.tau = l.value("tau", 4.0f);
    w.tau_prime = l.value("tau_prime", 4.0f);
    const std::string fk = l.value("feature_loss", std::string("euclidean"));
    if (fk == "euclidean")
      c.train.feature_loss = FeatureLossKind::euclidean;
    else if (fk == "mse")
      c.train.feature_loss = FeatureLossKind::mse;
    else
      throw ConfigError("config: loss.feature_loss must be 'euclidean' or 'mse'");
    const std::string kdir = l.value("kl_direction", std::string("mentor_targets"));
    if (kdir == "mentor_targets")
      c.train.kl_direction = KlDirection::mentor_targets;
    else if (kdir == "literal")
      c.train.kl_direction = KlDirection::literal;
    else
      throw ConfigError("config: loss.kl_direction must be 'mentor_targets' or 'literal'");
  }
  if (j.contains("augment")) {
    const json& a = j.at("augment");
    detail::reject_unknown(a, {"resize", "hflip", "vflip", "rotation_deg", "color_jitter",
                               "affine"},
                           "augment");
    c.augment.resize = a.value("resize", int64_t{224});
    c.augment.hflip = a.value("hflip", false);
    c.augment.vflip = a.value("vflip", false);
    c.augment.rotation_deg = a.value("rotation_deg", 0.0);
    c.augment.color_jitter = a.value("color_jitter", false);
    c.augment.affine = a.value("affine", false);
  }
  if (j.contains("normalize")) {
    const json& n = j.at("normalize");
    detail::reject_unknown(n, {"mode"}, "normalize");
    const std::string mode = n.value("mode", std::string("fixed"));
    if (mode == "fixed")
      c.norm_mode = NormalizationSpec::Mode::fixed;
    else if (mode == "dataset")
      c.norm_mode = NormalizationSpec::Mode::dataset;
    else
      throw ConfigError("config: normalize.mode must be 'fixed' or 'dataset'");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    detail::reject_unknown(m, {"num_classes", "input_size", "growth_rate", "expansion"}, "model");
    c.num_classes = m.value("num_classes", 0);
    c.input_size = m.value("input_size", int64_t{224});
    c.growth_rate = m.value("growth_rate", int64_t{16});
    c.expansion = m.value("expansion", int64_t{3});
  }
  if (j.contains("gradcam")) {
    const json& g = j.at("gradcam");
    detail::reject_unknown(g, {"nets"}, "gradcam");
    if (g.contains("nets")) c.gradcam_nets = g.at("nets").get<std::vector<std::string>>();
  }
  c.output_dir = j.value("output_dir", std::string("runs/latest"));
  c.validate();
  return c;
}

// Presets mirror the published per-dataset training configurations. The
// rice-variety preset deliberately leaves the split ratios unset (they are
// run-specific for that dataset) and the folder presets leave the data root
// to the caller's config file.
inline json preset_config(const std::string& name) {
  json base = {
      {"dataset", {{"kind", "folder"}, {"root", ""}}},
      {"train",
       {{"epochs", 100},
        {"batch_size", 64},
        {"optimizer", "adam"},
        {"learning_rate", 1e-4},
        {"early_stop_patience", 20},
        {"seed", 0}}},
      {"loss",
       {{"lambda1", 0.3},
        {"lambda2", 0.7},
        {"lambda3", 0.7},
        {"lambda4", 0.7},
        {"tau", 4.0},
        {"tau_prime", 4.0}}},
      {"augment", {{"resize", 224}}},
      {"normalize", {{"mode", "fixed"}}},
      {"model", {{"input_size", 224}}},
  };
  if (name == "rice-variety") {
    base["augment"]["hflip"] = true;
    base["augment"]["vflip"] = true;
    base["augment"]["rotation_deg"] = 10.0;
    return base;
  }
  if (name == "rice-leaf") {
    base["augment"]["color_jitter"] = true;
    base["augment"]["affine"] = true;
    base["augment"]["rotation_deg"] = 20.0;
    base["split"] = {{"ratios", {0.8, 0.1, 0.1}}, {"seed", 0}};
    return base;
  }
  if (name == "potato-leaf") {
    base["augment"]["color_jitter"] = true;
    base["augment"]["affine"] = true;
    base["augment"]["rotation_deg"] = 30.0;
    base["train"]["batch_size"] = 4;
    base["train"]["optimizer"] = "adamw";
    base["train"]["weight_decay"] = 1e-2;
    base["loss"]["lambda1"] = 0.2;
    base["loss"]["lambda2"] = 1.0;
    base["loss"]["lambda3"] = 0.8;
    base["loss"]["lambda4"] = 0.8;
    base["split"] = {{"ratios", {0.81, 0.09, 0.10}}, {"seed", 0}};
    return base;
  }
  if (name == "coffee-leaf") {
    base["augment"]["color_jitter"] = true;
    base["augment"]["affine"] = true;
    base["augment"]["rotation_deg"] = 20.0;
    base["split"] = {{"ratios", {0.64, 0.16, 0.20}}, {"seed", 0}};
    return base;
  }
  if (name == "corn-leaf") {
    base["augment"]["hflip"] = true;
    base["augment"]["vflip"] = true;
    base["augment"]["rotation_deg"] = 30.0;
    base["train"]["batch_size"] = 8;
    base["split"] = {{"ratios", {0.64, 0.16, 0.20}}, {"seed", 0}};
    return base;
  }
  if (name == "toy") {
    return json{
        {"dataset",
         {{"kind", "toy"}, {"classes", 2}, {"per_class", 200}, {"image_size", 64}, {"seed", 0}}},
        {"split", {{"ratios", {0.8, 0.1, 0.1}}, {"seed", 0}}},
        {"train",
         {{"epochs", 10},
          {"batch_size", 64},
          {"optimizer", "adam"},
          {"learning_rate", 1e-3},
          {"early_stop_patience", 3},
          {"seed", 0}}},
        {"loss",
         {{"lambda1", 0.3},
          {"lambda2", 0.7},
          {"lambda3", 0.7},
          {"lambda4", 0.7},
          {"tau", 4.0},
          {"tau_prime", 4.0}}},
        {"augment", {{"resize", 64}}},
        {"normalize", {{"mode", "dataset"}}},
        {"model", {{"input_size", 64}}},
    };
  }
  throw ConfigError("config: unknown preset '" + name + "'");
}

}  // namespace kd
