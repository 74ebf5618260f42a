#pragma once

#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kd/analysis/layer_desc.hpp"
#include "kd/core/error.hpp"
#include "kd/core/ops.hpp"

namespace kd {

inline const std::vector<std::string>& report_stage_order() {
  static const std::vector<std::string> order{"stem", "stage1", "stage2", "stage3",
                                              "stage4", "head", "aux"};
  return order;
}

struct ParamRow {
  std::string name, kind, stage;
  int64_t count = 0;
};

struct ParamReport {
  std::vector<ParamRow> rows;
  std::vector<std::pair<std::string, int64_t>> stage_subtotals;  // in report_stage_order
  int64_t backbone_total = 0;  // stem + stages, main path
  int64_t head_total = 0;
  int64_t aux_total = 0;

  int64_t main_total() const { return backbone_total + head_total; }
};

inline ParamReport count_params(const std::vector<LayerDesc>& layers) {
  ParamReport r;
  std::map<std::string, int64_t> by_stage;
  for (const auto& d : layers) {
    r.rows.push_back({d.name, layer_kind_name(d.kind), d.stage, d.params});
    by_stage[d.stage] += d.params;
    if (d.stage == "aux")
      r.aux_total += d.params;
    else if (d.stage == "head")
      r.head_total += d.params;
    else
      r.backbone_total += d.params;
  }
  for (const auto& s : report_stage_order())
    if (by_stage.count(s)) r.stage_subtotals.emplace_back(s, by_stage[s]);
  return r;
}

struct FlopRow {
  std::string name, kind, stage;
  int64_t macs = 0;
};

// One multiply-accumulate is reported as one FLOP; totals are per sample.
struct FlopReport {
  std::vector<FlopRow> rows;
  std::vector<std::pair<std::string, int64_t>> stage_subtotals;
  int64_t backbone_macs = 0;
  int64_t head_macs = 0;
  int64_t aux_macs = 0;
  int64_t input_h = 0, input_w = 0;
  std::string convention = "1 MAC counted as 1 FLOP; per-sample totals";

  int64_t main_macs() const { return backbone_macs + head_macs; }
};

inline int64_t layer_macs(const LayerDesc& d, int64_t input_h, int64_t input_w) {
  const int64_t in_h = input_h / d.input_divisor;
  const int64_t in_w = input_w / d.input_divisor;
  switch (d.kind) {
    case LayerKind::conv2d: {
      const int64_t oh = conv_out_dim(in_h, d.kh, d.stride, d.pad);
      const int64_t ow = conv_out_dim(in_w, d.kw, d.stride, d.pad);
      return d.cout * d.cin * d.kh * d.kw * oh * ow;
    }
    case LayerKind::depthwise_conv2d: {
      const int64_t oh = conv_out_dim(in_h, d.kh, d.stride, d.pad);
      const int64_t ow = conv_out_dim(in_w, d.kw, d.stride, d.pad);
      return d.cin * d.kh * d.kw * oh * ow;
    }
    case LayerKind::linear:
      return d.in_features * d.out_features;
    default:
      return 0;  // norm, activation, pooling, concat, add
  }
}

inline FlopReport count_macs(const std::vector<LayerDesc>& layers, int64_t input_h,
                             int64_t input_w) {
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0)
    throw ConfigError("count_macs: input dims must be >= 32 and divisible by 32");
  FlopReport r;
  r.input_h = input_h;
  r.input_w = input_w;
  std::map<std::string, int64_t> by_stage;
  for (const auto& d : layers) {
    const int64_t macs = layer_macs(d, input_h, input_w);
    r.rows.push_back({d.name, layer_kind_name(d.kind), d.stage, macs});
    by_stage[d.stage] += macs;
    if (d.stage == "aux")
      r.aux_macs += macs;
    else if (d.stage == "head")
      r.head_macs += macs;
    else
      r.backbone_macs += macs;
  }
  for (const auto& s : report_stage_order())
    if (by_stage.count(s)) r.stage_subtotals.emplace_back(s, by_stage[s]);
  return r;
}

inline void write_param_csv(const ParamReport& r, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("report: cannot write " + path);
  os << "name,kind,stage,count\n";
  for (const auto& row : r.rows)
    os << row.name << ',' << row.kind << ',' << row.stage << ',' << row.count << '\n';
}

inline void write_flop_csv(const FlopReport& r, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("report: cannot write " + path);
  os << "name,kind,stage,macs\n";
  for (const auto& row : r.rows)
    os << row.name << ',' << row.kind << ',' << row.stage << ',' << row.macs << '\n';
}

}  // namespace kd
