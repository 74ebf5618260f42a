#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "kd/analysis/layer_desc.hpp"
#include "kd/core/modules.hpp"

namespace kd {

struct TeacherConfig {
  std::array<int64_t, 4> stage_widths{64, 128, 256, 512};
  std::array<int64_t, 4> stage_blocks{2, 2, 2, 2};
  int64_t aux_out_channels = 352;  // must match the student's stage-3 width
  std::string pretrained_weights_path;

  void validate() const {
    for (int64_t w : stage_widths)
      if (w < 1) throw ConfigError("teacher config: stage widths must be positive");
    for (int64_t b : stage_blocks)
      if (b < 1) throw ConfigError("teacher config: every stage needs at least one block");
    if (aux_out_channels < 1) throw ConfigError("teacher config: aux channels must be positive");
  }
};

struct TeacherBundle {
  FVar main_logits;  // (N, C)
  FVar aux_logits;   // (N, C)
  FVar f_main;       // (N, 512)
  FVar f_aux;        // (N, 352)
  FVar tap_layer3;   // feature map feeding the aux branch
  FVar layer4_out;   // last feature map of the main path
  FVar aux_map;
  std::array<FVar, 4> stage_out;
};

// Two-conv residual block with identity (or 1x1 projection) shortcut.
class BasicBlock {
 public:
  BasicBlock(const std::string& prefix, int64_t in_channels, int64_t out_channels, int64_t stride,
             Rng& rng)
      : in_channels_(in_channels),
        out_channels_(out_channels),
        stride_(stride),
        conv1_(prefix + ".conv1", in_channels, out_channels, 3, stride, 1, rng),
        bn1_(prefix + ".bn1", out_channels),
        conv2_(prefix + ".conv2", out_channels, out_channels, 3, 1, 1, rng),
        bn2_(prefix + ".bn2", out_channels) {
    if (stride != 1 || in_channels != out_channels) {
      ds_conv_.emplace(prefix + ".downsample", in_channels, out_channels, 1, stride, 0, rng);
      ds_bn_.emplace(prefix + ".downsample_bn", out_channels);
    }
  }

  FVar forward(const FVar& x, bool training) {
    auto h = relu(bn1_.forward(conv1_.forward(x), training));
    h = bn2_.forward(conv2_.forward(h), training);
    auto idn = ds_conv_ ? ds_bn_->forward(ds_conv_->forward(x), training) : x;
    return relu(add(h, idn));
  }

  bool has_downsample() const { return ds_conv_.has_value(); }
  BatchNorm2dModule<float>& bn2() { return bn2_; }

  void visit_params(const ParamVisitor<float>& fn) const {
    conv1_.visit_params(fn);
    bn1_.visit_params(fn);
    conv2_.visit_params(fn);
    bn2_.visit_params(fn);
    if (ds_conv_) {
      ds_conv_->visit_params(fn);
      ds_bn_->visit_params(fn);
    }
  }
  void visit_state(const StateVisitor<float>& fn) {
    conv1_.visit_state(fn);
    bn1_.visit_state(fn);
    conv2_.visit_state(fn);
    bn2_.visit_state(fn);
    if (ds_conv_) {
      ds_conv_->visit_state(fn);
      ds_bn_->visit_state(fn);
    }
  }

  void append_layers(std::vector<LayerDesc>& out, const std::string& prefix,
                     const std::string& stage, int64_t in_divisor) const {
    const int64_t mid_divisor = in_divisor * stride_;
    out.push_back({prefix + ".conv1", stage, LayerKind::conv2d, conv1_.cin, conv1_.cout, 3, 3,
                   stride_, 1, 0, 0, in_divisor, conv1_.param_count()});
    out.push_back({prefix + ".bn1", stage, LayerKind::batch_norm, out_channels_, out_channels_, 0,
                   0, 1, 0, 0, 0, mid_divisor, bn1_.param_count()});
    out.push_back({prefix + ".conv2", stage, LayerKind::conv2d, conv2_.cin, conv2_.cout, 3, 3, 1,
                   1, 0, 0, mid_divisor, conv2_.param_count()});
    out.push_back({prefix + ".bn2", stage, LayerKind::batch_norm, out_channels_, out_channels_, 0,
                   0, 1, 0, 0, 0, mid_divisor, bn2_.param_count()});
    if (ds_conv_) {
      out.push_back({prefix + ".downsample", stage, LayerKind::conv2d, ds_conv_->cin,
                     ds_conv_->cout, 1, 1, stride_, 0, 0, 0, in_divisor, ds_conv_->param_count()});
      out.push_back({prefix + ".downsample_bn", stage, LayerKind::batch_norm, out_channels_,
                     out_channels_, 0, 0, 1, 0, 0, 0, mid_divisor, ds_bn_->param_count()});
    }
    out.push_back({prefix + ".add", stage, LayerKind::add, out_channels_, out_channels_, 0, 0, 1,
                   0, 0, 0, mid_divisor, 0});
  }

 private:
  int64_t in_channels_, out_channels_, stride_;
  Conv2dModule<float> conv1_;
  BatchNorm2dModule<float> bn1_;
  Conv2dModule<float> conv2_;
  BatchNorm2dModule<float> bn2_;
  std::optional<Conv2dModule<float>> ds_conv_;
  std::optional<BatchNorm2dModule<float>> ds_bn_;
};

// 18-layer residual teacher with an auxiliary alignment branch tapped at the
// layer-3 output. The branch downsamples with a stride-2 depthwise conv, maps
// to the student's stage-3 width pointwise, and adds a strided 1x1 shortcut.
class TeacherNet {
 public:
  explicit TeacherNet(int num_classes, TeacherConfig cfg = {}, uint64_t seed = 0)
      : num_classes_(num_classes), cfg_(cfg) {
    if (num_classes < 2) throw ConfigError("teacher: need at least 2 classes");
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x5445414348ull));

    stem_conv_ = Conv2dModule<float>("stem.conv", 3, cfg_.stage_widths[0], 7, 2, 3, rng);
    stem_bn_ = BatchNorm2dModule<float>("stem.bn", cfg_.stage_widths[0]);

    int64_t ch = cfg_.stage_widths[0];
    for (int s = 0; s < 4; ++s) {
      stages_.emplace_back();
      const int64_t width = cfg_.stage_widths[static_cast<size_t>(s)];
      for (int64_t b = 0; b < cfg_.stage_blocks[static_cast<size_t>(s)]; ++b) {
        const int64_t stride = (s > 0 && b == 0) ? 2 : 1;
        std::string prefix = "layer" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        stages_.back().emplace_back(prefix, ch, width, stride, rng);
        ch = width;
      }
    }

    // Aux input width is read from the actual layer-3 output.
    const int64_t aux_in = cfg_.stage_widths[2];
    const int64_t aux_out = cfg_.aux_out_channels;
    aux_dw_ = DepthwiseConv2dModule<float>("aux.dw", aux_in, 3, 2, 1, rng);
    aux_bn_dw_ = BatchNorm2dModule<float>("aux.dw_bn", aux_in);
    aux_pw_ = Conv2dModule<float>("aux.pw", aux_in, aux_out, 1, 1, 0, rng);
    aux_bn_pw_ = BatchNorm2dModule<float>("aux.pw_bn", aux_out);
    aux_sc_ = Conv2dModule<float>("aux.shortcut", aux_in, aux_out, 1, 2, 0, rng);
    aux_bn_sc_ = BatchNorm2dModule<float>("aux.shortcut_bn", aux_out);
    aux_head_ = LinearModule<float>("aux.fc", aux_out, num_classes_, rng);

    head_ = LinearModule<float>("head.fc", cfg_.stage_widths[3], num_classes_, rng);
  }

  TeacherBundle forward(const FVar& x, bool training) {
    check_input(x->value.shape);
    TeacherBundle out;

    auto h = relu(stem_bn_.forward(stem_conv_.forward(x), training));
    h = max_pool(h, 3, 2, 1);
    for (int s = 0; s < 4; ++s) {
      for (auto& block : stages_[static_cast<size_t>(s)]) h = block.forward(h, training);
      out.stage_out[static_cast<size_t>(s)] = h;
      if (s == 2) out.tap_layer3 = h;
    }
    out.layer4_out = h;
    out.f_main = flatten(global_avg_pool(h));
    out.main_logits = head_.forward(out.f_main);

    auto a = relu(aux_bn_dw_.forward(aux_dw_.forward(out.tap_layer3), training));
    a = aux_bn_pw_.forward(aux_pw_.forward(a), training);
    auto asc = aux_bn_sc_.forward(aux_sc_.forward(out.tap_layer3), training);
    out.aux_map = add(a, asc);
    out.f_aux = flatten(global_avg_pool(out.aux_map));
    out.aux_logits = aux_head_.forward(out.f_aux);
    return out;
  }

  int num_classes() const { return num_classes_; }
  const TeacherConfig& config() const { return cfg_; }
  std::vector<std::vector<BasicBlock>>& stages() { return stages_; }

  void visit_params(const ParamVisitor<float>& fn) const {
    stem_conv_.visit_params(fn);
    stem_bn_.visit_params(fn);
    for (const auto& stage : stages_)
      for (const auto& block : stage) block.visit_params(fn);
    head_.visit_params(fn);
    aux_dw_.visit_params(fn);
    aux_bn_dw_.visit_params(fn);
    aux_pw_.visit_params(fn);
    aux_bn_pw_.visit_params(fn);
    aux_sc_.visit_params(fn);
    aux_bn_sc_.visit_params(fn);
    aux_head_.visit_params(fn);
  }
  void visit_state(const StateVisitor<float>& fn) {
    stem_conv_.visit_state(fn);
    stem_bn_.visit_state(fn);
    for (auto& stage : stages_)
      for (auto& block : stage) block.visit_state(fn);
    head_.visit_state(fn);
    aux_dw_.visit_state(fn);
    aux_bn_dw_.visit_state(fn);
    aux_pw_.visit_state(fn);
    aux_bn_pw_.visit_state(fn);
    aux_sc_.visit_state(fn);
    aux_bn_sc_.visit_state(fn);
    aux_head_.visit_state(fn);
  }

  std::vector<LayerDesc> layers() const {
    std::vector<LayerDesc> rows;
    rows.push_back({"stem.conv", "stem", LayerKind::conv2d, 3, cfg_.stage_widths[0], 7, 7, 2, 3, 0,
                    0, 1, stem_conv_.param_count()});
    rows.push_back({"stem.bn", "stem", LayerKind::batch_norm, cfg_.stage_widths[0],
                    cfg_.stage_widths[0], 0, 0, 1, 0, 0, 0, 2, stem_bn_.param_count()});
    rows.push_back({"stem.maxpool", "stem", LayerKind::max_pool, cfg_.stage_widths[0],
                    cfg_.stage_widths[0], 3, 3, 2, 1, 0, 0, 2, 0});
    int64_t divisor = 4;
    for (int s = 0; s < 4; ++s) {
      const std::string stage = "stage" + std::to_string(s + 1);
      int64_t b = 1;
      for (const auto& block : stages_[static_cast<size_t>(s)]) {
        const int64_t in_div = (s > 0 && b == 1) ? divisor / 2 : divisor;
        block.append_layers(rows, "layer" + std::to_string(s + 1) + ".block" + std::to_string(b),
                            stage, in_div);
        ++b;
      }
      if (s < 3) divisor *= 2;
    }
    rows.push_back({"head.gap", "head", LayerKind::global_avg_pool, cfg_.stage_widths[3],
                    cfg_.stage_widths[3], 0, 0, 1, 0, 0, 0, 32, 0});
    rows.push_back({"head.fc", "head", LayerKind::linear, 0, 0, 0, 0, 1, 0, cfg_.stage_widths[3],
                    num_classes_, 32, head_.param_count()});

    const int64_t aux_in = cfg_.stage_widths[2], aux_out = cfg_.aux_out_channels;
    rows.push_back({"aux.dw", "aux", LayerKind::depthwise_conv2d, aux_in, aux_in, 3, 3, 2, 1, 0, 0,
                    16, aux_dw_.param_count()});
    rows.push_back({"aux.dw_bn", "aux", LayerKind::batch_norm, aux_in, aux_in, 0, 0, 1, 0, 0, 0,
                    32, aux_bn_dw_.param_count()});
    rows.push_back({"aux.pw", "aux", LayerKind::conv2d, aux_in, aux_out, 1, 1, 1, 0, 0, 0, 32,
                    aux_pw_.param_count()});
    rows.push_back({"aux.pw_bn", "aux", LayerKind::batch_norm, aux_out, aux_out, 0, 0, 1, 0, 0, 0,
                    32, aux_bn_pw_.param_count()});
    rows.push_back({"aux.shortcut", "aux", LayerKind::conv2d, aux_in, aux_out, 1, 1, 2, 0, 0, 0,
                    16, aux_sc_.param_count()});
    rows.push_back({"aux.shortcut_bn", "aux", LayerKind::batch_norm, aux_out, aux_out, 0, 0, 1, 0,
                    0, 0, 32, aux_bn_sc_.param_count()});
    rows.push_back({"aux.gap", "aux", LayerKind::global_avg_pool, aux_out, aux_out, 0, 0, 1, 0, 0,
                    0, 32, 0});
    rows.push_back({"aux.fc", "aux", LayerKind::linear, 0, 0, 0, 0, 1, 0, aux_out, num_classes_,
                    32, aux_head_.param_count()});
    return rows;
  }

 private:
  static void check_input(const Shape& s) {
    if (s.rank() != 4) throw ShapeError("teacher: input must be rank 4, got " + s.str());
    if (s[1] != 3) throw ShapeError("teacher: expected 3 input channels, got " + std::to_string(s[1]));
    if (s[2] < 32 || s[3] < 32 || s[2] % 32 != 0 || s[3] % 32 != 0)
      throw ConfigError("teacher: input spatial dims must be >= 32 and divisible by 32, got " +
                        s.str());
  }

  int num_classes_;
  TeacherConfig cfg_;
  Conv2dModule<float> stem_conv_;
  BatchNorm2dModule<float> stem_bn_;
  std::vector<std::vector<BasicBlock>> stages_;
  DepthwiseConv2dModule<float> aux_dw_;
  BatchNorm2dModule<float> aux_bn_dw_;
  Conv2dModule<float> aux_pw_;
  BatchNorm2dModule<float> aux_bn_pw_;
  Conv2dModule<float> aux_sc_;
  BatchNorm2dModule<float> aux_bn_sc_;
  LinearModule<float> aux_head_;
  LinearModule<float> head_;
};

}  // namespace kd
