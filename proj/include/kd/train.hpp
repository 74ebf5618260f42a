#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "kd/checkpoint.hpp"
#include "kd/data/batch.hpp"
#include "kd/losses.hpp"
#include "kd/optim.hpp"

namespace kd {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 64;
  OptimizerConfig::Kind optimizer = OptimizerConfig::Kind::adam;
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;          // applied by adamw only
  double teacher_learning_rate = -1;   // < 0 means: same as learning_rate
  int early_stop_patience = 20;
  uint64_t seed = 0;
  LossWeights loss_weights;
  FeatureLossKind feature_loss = FeatureLossKind::euclidean;
  KlDirection kl_direction = KlDirection::mentor_targets;

  double effective_teacher_lr() const {
    return teacher_learning_rate < 0 ? learning_rate : teacher_learning_rate;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be positive");
    if (batch_size < 1) throw ConfigError("train: batch size must be positive");
    if (learning_rate < 0) throw ConfigError("train: learning rate must be >= 0");
    if (weight_decay < 0) throw ConfigError("train: weight decay must be >= 0");
    if (early_stop_patience < 1) throw ConfigError("train: patience must be positive");
    if (early_stop_patience > epochs) throw ConfigError("train: patience must not exceed epochs");
    loss_weights.validate();
  }

  OptimizerConfig optimizer_config(double lr) const {
    OptimizerConfig c;
    c.kind = optimizer;
    c.lr = lr;
    c.weight_decay = optimizer == OptimizerConfig::Kind::adamw ? weight_decay : 0.0;
    return c;
  }
};

// When the student's targets are produced relative to the teacher update in
// one sequential step. The default recomputes targets from the just-updated
// teacher; the pre-update variant exists to demonstrate the difference.
enum class TargetTiming { post_teacher_update, pre_teacher_update };

inline int64_t count_correct(const Tensor<float>& logits, const std::vector<int>& labels) {
  const int64_t n = logits.shape[0], c = logits.shape[1];
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;  // first index wins ties
    for (int64_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    if (best == labels[static_cast<size_t>(i)]) ++correct;
  }
  return correct;
}

struct StepResult {
  double teacher_loss = 0;
  double teacher_ce_main = 0, teacher_ce_aux = 0;
  int64_t teacher_correct_main = 0, teacher_correct_aux = 0;
  double student_ce_main = 0, student_ce_aux = 0;
  int64_t student_correct_main = 0, student_correct_aux = 0;
  LossBreakdown breakdown;
  uint64_t teacher_hash_at_targets = 0;
  int64_t batch_count = 0;
};

// One sequential online step: (1) teacher forward + update on ground truth,
// (2) gradient-free eval-statistics re-forward of the updated teacher to
// produce detached targets, (3) student forward + composite update against
// those targets. A non-finite loss aborts before the offending network's
// update is applied.
inline StepResult train_step_sequential(TeacherNet& teacher, StudentNet& student,
                                        Optimizer& teacher_opt, Optimizer& student_opt,
                                        const SampleBatch& batch, const TrainConfig& cfg,
                                        TargetTiming timing = TargetTiming::post_teacher_update) {
  StepResult r;
  r.batch_count = batch.images.shape[0];
  auto x = make_var(Tensor<float>(batch.images));

  auto make_targets = [&]() {
    NoGradGuard ng;
    return teacher.forward(x, /*training=*/false);
  };

  TeacherBundle pre_targets;
  if (timing == TargetTiming::pre_teacher_update) {
    pre_targets = make_targets();
    r.teacher_hash_at_targets = param_hash(teacher);
  }

  // (1) teacher update from ground truth only
  auto tb = teacher.forward(x, /*training=*/true);
  auto t_loss = teacher_loss(tb, batch.labels);
  r.teacher_loss = scalar_value(t_loss);
  if (!std::isfinite(r.teacher_loss))
    throw NumericError("train step: teacher loss is not finite; no update applied");
  teacher_opt.zero_grad();
  backward(t_loss);
  teacher_opt.step();
  {
    NoGradGuard ng;
    r.teacher_ce_main = scalar_value(cross_entropy(tb.main_logits, batch.labels));
    r.teacher_ce_aux = scalar_value(cross_entropy(tb.aux_logits, batch.labels));
  }
  r.teacher_correct_main = count_correct(tb.main_logits->value, batch.labels);
  r.teacher_correct_aux = count_correct(tb.aux_logits->value, batch.labels);

  // (2) updated teacher immediately provides the targets
  TeacherBundle targets = pre_targets;
  if (timing == TargetTiming::post_teacher_update) {
    targets = make_targets();
    r.teacher_hash_at_targets = param_hash(teacher);
  }

  // (3) student update against the detached targets
  auto sb = student.forward(x, /*training=*/true);
  auto [total, breakdown] =
      student_total(sb, targets, batch.labels, cfg.loss_weights, cfg.feature_loss, cfg.kl_direction);
  breakdown.teacher_total = static_cast<float>(r.teacher_loss);
  r.breakdown = breakdown;
  if (!std::isfinite(static_cast<double>(breakdown.total)))
    throw NumericError("train step: student loss is not finite; no update applied");
  student_opt.zero_grad();
  backward(total);
  student_opt.step();
  {
    NoGradGuard ng;
    r.student_ce_main = scalar_value(cross_entropy(sb.main_logits, batch.labels));
    r.student_ce_aux = scalar_value(cross_entropy(sb.aux_logits, batch.labels));
  }
  r.student_correct_main = count_correct(sb.main_logits->value, batch.labels);
  r.student_correct_aux = count_correct(sb.aux_logits->value, batch.labels);
  return r;
}

struct HeadEval {
  double loss = 0;
  double accuracy = 0;
};

struct EvalResult {
  HeadEval main, aux;
  int64_t count = 0;
};

// Side-effect-free evaluation: eval-mode statistics, no graph recording.
template <typename Net>
EvalResult evaluate(Net& net, const DataView& data, int64_t batch_size) {
  if (data.size() == 0) throw ConfigError("evaluate: dataset split is empty");
  NoGradGuard ng;
  EvalResult r;
  double loss_main = 0, loss_aux = 0;
  int64_t correct_main = 0, correct_aux = 0;
  BatchStream stream(data, batch_size, /*seed=*/0, /*epoch=*/0, /*train_mode=*/false);
  SampleBatch b;
  while (stream.next(b)) {
    auto bundle = net.forward(make_var(Tensor<float>(b.images)), /*training=*/false);
    const auto n = static_cast<double>(b.images.shape[0]);
    loss_main += scalar_value(cross_entropy(bundle.main_logits, b.labels)) * n;
    loss_aux += scalar_value(cross_entropy(bundle.aux_logits, b.labels)) * n;
    correct_main += count_correct(bundle.main_logits->value, b.labels);
    correct_aux += count_correct(bundle.aux_logits->value, b.labels);
    r.count += b.images.shape[0];
  }
  r.main.loss = loss_main / static_cast<double>(r.count);
  r.aux.loss = loss_aux / static_cast<double>(r.count);
  r.main.accuracy = static_cast<double>(correct_main) / static_cast<double>(r.count);
  r.aux.accuracy = static_cast<double>(correct_aux) / static_cast<double>(r.count);
  return r;
}

struct EpochMetrics {
  int epoch = 0;
  HeadEval teacher_train_main, teacher_train_aux, teacher_val_main, teacher_val_aux;
  HeadEval student_train_main, student_train_aux, student_val_main, student_val_aux;
  double l_hard = 0, l_fd = 0, l_rd = 0, l_sd = 0;  // epoch means, student train
};

namespace detail {
inline std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}
}  // namespace detail

// One row per (net, head, split) per epoch. Loss/accuracy columns are the
// head's cross-entropy and argmax accuracy; the component columns carry the
// student's train-split composite means and are zero elsewhere.
inline std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,net,head,split,loss,accuracy,l_hard,l_fd,l_rd,l_sd\n";
  auto row = [&](int epoch, const char* net, const char* head, const char* split,
                 const HeadEval& he, const EpochMetrics* comp) {
    out += std::to_string(epoch);
    out += ',';
    out += net;
    out += ',';
    out += head;
    out += ',';
    out += split;
    out += ',';
    out += detail::fmt6(he.loss) + ',' + detail::fmt6(he.accuracy) + ',';
    if (comp) {
      out += detail::fmt6(comp->l_hard) + ',' + detail::fmt6(comp->l_fd) + ',' +
             detail::fmt6(comp->l_rd) + ',' + detail::fmt6(comp->l_sd);
    } else {
      out += "0.000000,0.000000,0.000000,0.000000";
    }
    out += '\n';
  };
  for (const auto& m : history) {
    row(m.epoch, "teacher", "main", "train", m.teacher_train_main, nullptr);
    row(m.epoch, "teacher", "main", "val", m.teacher_val_main, nullptr);
    row(m.epoch, "teacher", "aux", "train", m.teacher_train_aux, nullptr);
    row(m.epoch, "teacher", "aux", "val", m.teacher_val_aux, nullptr);
    row(m.epoch, "student", "main", "train", m.student_train_main, &m);
    row(m.epoch, "student", "main", "val", m.student_val_main, nullptr);
    row(m.epoch, "student", "aux", "train", m.student_train_aux, &m);
    row(m.epoch, "student", "aux", "val", m.student_val_aux, nullptr);
  }
  return out;
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("metrics: cannot write " + path);
  os << metrics_csv(history);
}

// Snapshot of both networks plus optimizer state, suitable for bit-exact
// restore. Network tensors are prefixed teacher/ and student/.
inline CheckpointRecord make_checkpoint(TeacherNet& teacher, StudentNet& student,
                                        Optimizer* teacher_opt, Optimizer* student_opt,
                                        uint32_t epoch, double best_metric,
                                        const std::string& rng_state) {
  CheckpointRecord rec;
  teacher.visit_state([&](const std::string& n, Tensor<float>* t) { rec.tensors["teacher/" + n] = *t; });
  student.visit_state([&](const std::string& n, Tensor<float>* t) { rec.tensors["student/" + n] = *t; });
  rec.has_state = true;
  rec.epoch = epoch;
  rec.best_metric = best_metric;
  rec.rng_state = rng_state;
  if (teacher_opt) {
    teacher_opt->visit_state([&](const std::string& n, Tensor<float>* t) { rec.moments["teacher/" + n] = *t; });
    rec.counters["teacher/steps"] = teacher_opt->step_count();
  }
  if (student_opt) {
    student_opt->visit_state([&](const std::string& n, Tensor<float>* t) { rec.moments["student/" + n] = *t; });
    rec.counters["student/steps"] = student_opt->step_count();
  }
  return rec;
}

struct FitResult {
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
  double best_val_accuracy = 0;
  double best_val_loss = 0;
  bool early_stopped = false;
  CheckpointRecord best_checkpoint;
};

// Full sequential online loop with early stopping on the student main-head
// validation accuracy (ties broken by lower validation loss). The best
// epoch's weights are restored into both networks before returning.
inline FitResult fit(TeacherNet& teacher, StudentNet& student, const DataView& train_data,
                     const DataView& val_data, const TrainConfig& cfg,
                     TargetTiming timing = TargetTiming::post_teacher_update) {
  cfg.validate();
  if (train_data.size() == 0) throw ConfigError("fit: training split is empty");
  if (val_data.size() == 0) throw ConfigError("fit: validation split is empty");

  Optimizer teacher_opt(collect_params(teacher), cfg.optimizer_config(cfg.effective_teacher_lr()));
  Optimizer student_opt(collect_params(student), cfg.optimizer_config(cfg.learning_rate));
  Rng run_rng(mix_seed(cfg.seed, 0x52554e08ull));

  FitResult result;
  int since_improvement = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    BatchStream stream(train_data, cfg.batch_size, cfg.seed, epoch, /*train_mode=*/true);
    SampleBatch batch;
    double t_ce_main = 0, t_ce_aux = 0, s_ce_main = 0, s_ce_aux = 0;
    double hard = 0, fd = 0, rd = 0, sd = 0;
    int64_t t_ok_main = 0, t_ok_aux = 0, s_ok_main = 0, s_ok_aux = 0, seen = 0;
    while (stream.next(batch)) {
      StepResult r =
          train_step_sequential(teacher, student, teacher_opt, student_opt, batch, cfg, timing);
      const auto n = static_cast<double>(r.batch_count);
      t_ce_main += r.teacher_ce_main * n;
      t_ce_aux += r.teacher_ce_aux * n;
      s_ce_main += r.student_ce_main * n;
      s_ce_aux += r.student_ce_aux * n;
      hard += r.breakdown.hard * n;
      fd += r.breakdown.feature * n;
      rd += r.breakdown.response * n;
      sd += r.breakdown.self_distill * n;
      t_ok_main += r.teacher_correct_main;
      t_ok_aux += r.teacher_correct_aux;
      s_ok_main += r.student_correct_main;
      s_ok_aux += r.student_correct_aux;
      seen += r.batch_count;
    }

    EpochMetrics m;
    m.epoch = epoch;
    const auto dn = static_cast<double>(seen);
    m.teacher_train_main = {t_ce_main / dn, static_cast<double>(t_ok_main) / dn};
    m.teacher_train_aux = {t_ce_aux / dn, static_cast<double>(t_ok_aux) / dn};
    m.student_train_main = {s_ce_main / dn, static_cast<double>(s_ok_main) / dn};
    m.student_train_aux = {s_ce_aux / dn, static_cast<double>(s_ok_aux) / dn};
    m.l_hard = hard / dn;
    m.l_fd = fd / dn;
    m.l_rd = rd / dn;
    m.l_sd = sd / dn;
    EvalResult tv = evaluate(teacher, val_data, cfg.batch_size);
    EvalResult sv = evaluate(student, val_data, cfg.batch_size);
    m.teacher_val_main = tv.main;
    m.teacher_val_aux = tv.aux;
    m.student_val_main = sv.main;
    m.student_val_aux = sv.aux;
    result.history.push_back(m);

    const bool improved = result.best_epoch == 0 ||
                          sv.main.accuracy > result.best_val_accuracy ||
                          (sv.main.accuracy == result.best_val_accuracy &&
                           sv.main.loss < result.best_val_loss);
    if (improved) {
      result.best_epoch = epoch;
      result.best_val_accuracy = sv.main.accuracy;
      result.best_val_loss = sv.main.loss;
      since_improvement = 0;
      result.best_checkpoint =
          make_checkpoint(teacher, student, &teacher_opt, &student_opt,
                          static_cast<uint32_t>(epoch), sv.main.accuracy, run_rng.serialize());
    } else if (++since_improvement >= cfg.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }

  // Restore the best weights (documented choice: best, not last).
  load_tensors_into(teacher, result.best_checkpoint, "teacher/");
  load_tensors_into(student, result.best_checkpoint, "student/");
  return result;
}

}  // namespace kd
