#pragma once

#include <array>
#include <string>
#include <vector>

#include "kd/analysis/layer_desc.hpp"
#include "kd/core/modules.hpp"

namespace kd {

struct HybridBlockConfig {
  int64_t growth_rate = 16;       // channels appended per block
  int64_t expansion = 3;          // width multiplier inside the inverted residual
  int64_t bottleneck_width = 64;  // 1x1 compression target, 4 * growth_rate

  int64_t expanded_width() const { return expansion * bottleneck_width; }

  void validate() const {
    if (growth_rate < 1 || expansion < 1 || bottleneck_width < 1)
      throw ConfigError("hybrid block config: all fields must be positive");
  }
};

struct StudentConfig {
  HybridBlockConfig block;
  std::array<int64_t, 4> stage_blocks{4, 6, 8, 10};
  int64_t stem_channels = 64;

  void validate() const {
    block.validate();
    if (stem_channels < 1) throw ConfigError("student config: stem channels must be positive");
    for (int64_t b : stage_blocks)
      if (b < 1) throw ConfigError("student config: every stage needs at least one block");
  }

  int64_t stage_in_channels(int s) const {
    int64_t ch = stem_channels;
    for (int i = 0; i < s; ++i) ch += stage_blocks[static_cast<size_t>(i)] * block.growth_rate;
    return ch;
  }
  int64_t stage_out_channels(int s) const { return stage_in_channels(s + 1); }
  int64_t feature_width() const { return stage_out_channels(3); }      // main GAP vector length
  int64_t aux_feature_width() const { return stage_out_channels(2); }  // aux GAP vector length
};

// One supervision bundle from a student forward pass. Feature-map taps keep
// their graph alive so attention maps can be pulled from them afterwards.
struct StudentBundle {
  FVar main_logits;  // (N, C)
  FVar aux_logits;   // (N, C)
  FVar f_main;       // (N, 512) canonical
  FVar f_aux;        // (N, 352) canonical
  FVar tap_stage3_down;  // feature map feeding the aux branch
  FVar stage4_out;       // last feature map of the main path
  FVar aux_map;          // aux branch output map
  std::array<FVar, 4> stage_out;
};

// Dense-concat inverted-residual block: a 1x1 bottleneck feeds two parallel
// paths (expand -> depthwise -> linear projection, and a linear 1x1 shortcut)
// whose sum is concatenated onto the block input.
class HybridBlock {
 public:
  HybridBlock(const std::string& prefix, int64_t in_channels, const HybridBlockConfig& cfg,
              Rng& rng)
      : in_channels_(in_channels),
        growth_(cfg.growth_rate),
        bottleneck_(prefix + ".bottleneck", in_channels, cfg.bottleneck_width, 1, 1, 0, rng),
        bn_bot_(prefix + ".bottleneck_bn", cfg.bottleneck_width),
        expand_(prefix + ".expand", cfg.bottleneck_width, cfg.expanded_width(), 1, 1, 0, rng),
        bn_exp_(prefix + ".expand_bn", cfg.expanded_width()),
        dw_(prefix + ".dw", cfg.expanded_width(), 3, 1, 1, rng),
        bn_dw_(prefix + ".dw_bn", cfg.expanded_width()),
        project_(prefix + ".project", cfg.expanded_width(), cfg.growth_rate, 1, 1, 0, rng),
        bn_proj_(prefix + ".project_bn", cfg.growth_rate),
        shortcut_(prefix + ".shortcut", cfg.bottleneck_width, cfg.growth_rate, 1, 1, 0, rng),
        bn_sc_(prefix + ".shortcut_bn", cfg.growth_rate) {}

  FVar forward(const FVar& x, bool training) {
    if (x->value.shape[1] != in_channels_)
      throw ShapeError("hybrid block expects " + std::to_string(in_channels_) +
                       " input channels, got " + std::to_string(x->value.shape[1]));
    auto xb = relu6(bn_bot_.forward(bottleneck_.forward(x), training));
    auto m = relu6(bn_exp_.forward(expand_.forward(xb), training));
    m = relu6(bn_dw_.forward(dw_.forward(m), training));
    m = bn_proj_.forward(project_.forward(m), training);        // linear projection
    auto sc = bn_sc_.forward(shortcut_.forward(xb), training);  // linear shortcut
    return concat_channels(x, add(m, sc));
  }

  int64_t in_channels() const { return in_channels_; }
  int64_t out_channels() const { return in_channels_ + growth_; }

  void visit_params(const ParamVisitor<float>& fn) const {
    bottleneck_.visit_params(fn);
    bn_bot_.visit_params(fn);
    expand_.visit_params(fn);
    bn_exp_.visit_params(fn);
    dw_.visit_params(fn);
    bn_dw_.visit_params(fn);
    project_.visit_params(fn);
    bn_proj_.visit_params(fn);
    shortcut_.visit_params(fn);
    bn_sc_.visit_params(fn);
  }
  void visit_state(const StateVisitor<float>& fn) {
    bottleneck_.visit_state(fn);
    bn_bot_.visit_state(fn);
    expand_.visit_state(fn);
    bn_exp_.visit_state(fn);
    dw_.visit_state(fn);
    bn_dw_.visit_state(fn);
    project_.visit_state(fn);
    bn_proj_.visit_state(fn);
    shortcut_.visit_state(fn);
    bn_sc_.visit_state(fn);
  }

  void append_layers(std::vector<LayerDesc>& out, const std::string& prefix,
                     const std::string& stage, int64_t divisor) const {
    auto conv_row = [&](const std::string& n, const Conv2dModule<float>& c) {
      out.push_back({prefix + "." + n, stage, LayerKind::conv2d, c.cin, c.cout, c.k, c.k, c.stride,
                     c.pad, 0, 0, divisor, c.param_count()});
    };
    auto bn_row = [&](const std::string& n, const BatchNorm2dModule<float>& b) {
      out.push_back({prefix + "." + n, stage, LayerKind::batch_norm, b.channels, b.channels, 0, 0,
                     1, 0, 0, 0, divisor, b.param_count()});
    };
    conv_row("bottleneck", bottleneck_);
    bn_row("bottleneck_bn", bn_bot_);
    conv_row("expand", expand_);
    bn_row("expand_bn", bn_exp_);
    out.push_back({prefix + ".dw", stage, LayerKind::depthwise_conv2d, dw_.channels, dw_.channels,
                   dw_.k, dw_.k, dw_.stride, dw_.pad, 0, 0, divisor, dw_.param_count()});
    bn_row("dw_bn", bn_dw_);
    conv_row("project", project_);
    bn_row("project_bn", bn_proj_);
    conv_row("shortcut", shortcut_);
    bn_row("shortcut_bn", bn_sc_);
    out.push_back({prefix + ".add", stage, LayerKind::add, growth_, growth_, 0, 0, 1, 0, 0, 0,
                   divisor, 0});
    out.push_back({prefix + ".concat", stage, LayerKind::concat_channels, in_channels_,
                   out_channels(), 0, 0, 1, 0, 0, 0, divisor, 0});
  }

 private:
  int64_t in_channels_, growth_;
  Conv2dModule<float> bottleneck_;
  BatchNorm2dModule<float> bn_bot_;
  Conv2dModule<float> expand_;
  BatchNorm2dModule<float> bn_exp_;
  DepthwiseConv2dModule<float> dw_;
  BatchNorm2dModule<float> bn_dw_;
  Conv2dModule<float> project_;
  BatchNorm2dModule<float> bn_proj_;
  Conv2dModule<float> shortcut_;
  BatchNorm2dModule<float> bn_sc_;
};

// Lightweight student: 7x7/2 stem with max pool, four stages of dense-concat
// inverted-residual blocks separated by 2x2 average-pool transitions, GAP
// classifier head, and a stride-1 alignment branch tapped after the third
// transition. ReLU6 follows every non-projection convolution.
class StudentNet {
 public:
  explicit StudentNet(int num_classes, StudentConfig cfg = {}, uint64_t seed = 0)
      : num_classes_(num_classes), cfg_(cfg) {
    if (num_classes < 2) throw ConfigError("student: need at least 2 classes");
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x5354554445ull));  // independent init stream per net

    stem_conv_ = Conv2dModule<float>("stem.conv", 3, cfg_.stem_channels, 7, 2, 3, rng);
    stem_bn_ = BatchNorm2dModule<float>("stem.bn", cfg_.stem_channels);

    for (int s = 0; s < 4; ++s) {
      stages_.emplace_back();
      int64_t ch = cfg_.stage_in_channels(s);
      for (int64_t b = 0; b < cfg_.stage_blocks[static_cast<size_t>(s)]; ++b) {
        std::string prefix =
            "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        stages_.back().emplace_back(prefix, ch, cfg_.block, rng);
        ch += cfg_.block.growth_rate;
      }
    }

    const int64_t aux_ch = cfg_.aux_feature_width();
    aux_dw_ = DepthwiseConv2dModule<float>("aux.dw", aux_ch, 3, 1, 1, rng);
    aux_bn_dw_ = BatchNorm2dModule<float>("aux.dw_bn", aux_ch);
    aux_pw_ = Conv2dModule<float>("aux.pw", aux_ch, aux_ch, 1, 1, 0, rng);
    aux_bn_pw_ = BatchNorm2dModule<float>("aux.pw_bn", aux_ch);
    aux_sc_ = Conv2dModule<float>("aux.shortcut", aux_ch, aux_ch, 1, 1, 0, rng);
    aux_bn_sc_ = BatchNorm2dModule<float>("aux.shortcut_bn", aux_ch);
    aux_head_ = LinearModule<float>("aux.fc", aux_ch, num_classes_, rng);

    head_ = LinearModule<float>("head.fc", cfg_.feature_width(), num_classes_, rng);
  }

  StudentBundle forward(const FVar& x, bool training) {
    check_input(x->value.shape);
    StudentBundle out;

    auto h = relu6(stem_bn_.forward(stem_conv_.forward(x), training));
    h = max_pool(h, 3, 2, 1);

    for (int s = 0; s < 4; ++s) {
      for (auto& block : stages_[static_cast<size_t>(s)]) h = block.forward(h, training);
      out.stage_out[static_cast<size_t>(s)] = h;
      if (s < 3) {
        h = avg_pool(h, 2, 2);
        if (s == 2) out.tap_stage3_down = h;
      }
    }
    out.stage4_out = h;

    out.f_main = flatten(global_avg_pool(h));
    out.main_logits = head_.forward(out.f_main);

    // Alignment branch: stride-1 inverted residual over the stage-3 tap.
    auto a = relu6(aux_bn_dw_.forward(aux_dw_.forward(out.tap_stage3_down), training));
    a = aux_bn_pw_.forward(aux_pw_.forward(a), training);
    auto asc = aux_bn_sc_.forward(aux_sc_.forward(out.tap_stage3_down), training);
    out.aux_map = add(a, asc);
    out.f_aux = flatten(global_avg_pool(out.aux_map));
    out.aux_logits = aux_head_.forward(out.f_aux);
    return out;
  }

  int num_classes() const { return num_classes_; }
  const StudentConfig& config() const { return cfg_; }
  std::vector<std::vector<HybridBlock>>& stages() { return stages_; }

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

  // Structural rows for the parameter/MAC audit. Main path first (stem,
  // stages with transitions, head), then the aux branch.
  std::vector<LayerDesc> layers() const {
    std::vector<LayerDesc> rows;
    rows.push_back({"stem.conv", "stem", LayerKind::conv2d, 3, cfg_.stem_channels, 7, 7, 2, 3, 0,
                    0, 1, stem_conv_.param_count()});
    rows.push_back({"stem.bn", "stem", LayerKind::batch_norm, cfg_.stem_channels,
                    cfg_.stem_channels, 0, 0, 1, 0, 0, 0, 2, stem_bn_.param_count()});
    rows.push_back({"stem.relu6", "stem", LayerKind::relu6, cfg_.stem_channels, cfg_.stem_channels,
                    0, 0, 1, 0, 0, 0, 2, 0});
    rows.push_back(
        {"stem.maxpool", "stem", LayerKind::max_pool, cfg_.stem_channels, cfg_.stem_channels, 3, 3,
         2, 1, 0, 0, 2, 0});
    int64_t divisor = 4;
    for (int s = 0; s < 4; ++s) {
      const std::string stage = "stage" + std::to_string(s + 1);
      int64_t b = 1;
      for (const auto& block : stages_[static_cast<size_t>(s)]) {
        block.append_layers(rows, stage + ".block" + std::to_string(b), stage, divisor);
        ++b;
      }
      if (s < 3) {
        const int64_t ch = cfg_.stage_out_channels(s);
        rows.push_back({"transition" + std::to_string(s + 1), stage, LayerKind::avg_pool, ch, ch,
                        2, 2, 2, 0, 0, 0, divisor, 0});
        divisor *= 2;
      }
    }
    rows.push_back({"head.gap", "head", LayerKind::global_avg_pool, cfg_.feature_width(),
                    cfg_.feature_width(), 0, 0, 1, 0, 0, 0, 32, 0});
    LayerDesc fc{"head.fc", "head", LayerKind::linear, 0, 0, 0, 0, 1, 0, cfg_.feature_width(),
                 num_classes_, 32, head_.param_count()};
    rows.push_back(fc);

    const int64_t aux_ch = cfg_.aux_feature_width();
    rows.push_back({"aux.dw", "aux", LayerKind::depthwise_conv2d, aux_ch, aux_ch, 3, 3, 1, 1, 0, 0,
                    32, aux_dw_.param_count()});
    rows.push_back({"aux.dw_bn", "aux", LayerKind::batch_norm, aux_ch, aux_ch, 0, 0, 1, 0, 0, 0,
                    32, aux_bn_dw_.param_count()});
    rows.push_back({"aux.pw", "aux", LayerKind::conv2d, aux_ch, aux_ch, 1, 1, 1, 0, 0, 0, 32,
                    aux_pw_.param_count()});
    rows.push_back({"aux.pw_bn", "aux", LayerKind::batch_norm, aux_ch, aux_ch, 0, 0, 1, 0, 0, 0,
                    32, aux_bn_pw_.param_count()});
    rows.push_back({"aux.shortcut", "aux", LayerKind::conv2d, aux_ch, aux_ch, 1, 1, 1, 0, 0, 0, 32,
                    aux_sc_.param_count()});
    rows.push_back({"aux.shortcut_bn", "aux", LayerKind::batch_norm, aux_ch, aux_ch, 0, 0, 1, 0, 0,
                    0, 32, aux_bn_sc_.param_count()});
    rows.push_back({"aux.gap", "aux", LayerKind::global_avg_pool, aux_ch, aux_ch, 0, 0, 1, 0, 0, 0,
                    32, 0});
    rows.push_back({"aux.fc", "aux", LayerKind::linear, 0, 0, 0, 0, 1, 0, aux_ch, num_classes_, 32,
                    aux_head_.param_count()});
    return rows;
  }

 private:
  static void check_input(const Shape& s) {
    if (s.rank() != 4) throw ShapeError("student: input must be rank 4, got " + s.str());
    if (s[1] != 3) throw ShapeError("student: expected 3 input channels, got " + std::to_string(s[1]));
    if (s[2] < 32 || s[3] < 32 || s[2] % 32 != 0 || s[3] % 32 != 0)
      throw ConfigError("student: input spatial dims must be >= 32 and divisible by 32, got " +
                        s.str());
  }

  int num_classes_;
  StudentConfig cfg_;
  Conv2dModule<float> stem_conv_;
  BatchNorm2dModule<float> stem_bn_;
  std::vector<std::vector<HybridBlock>> stages_;
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
