#pragma once

#include <utility>
#include <vector>

#include "kd/core/ops.hpp"
#include "kd/nets/student.hpp"
#include "kd/nets/teacher.hpp"

namespace kd {

// Weights and temperatures of the composite student objective. The canonical
// values for the rice-variety preset are (0.3, 0.7, 0.7, 0.7, 4, 4).
template <typename S>
struct LossWeightsT {
  S lambda1 = S(0.3);
  S lambda2 = S(0.7);
  S lambda3 = S(0.7);
  S lambda4 = S(0.7);
  S tau = S(4);
  S tau_prime = S(4);

  // Canonical configurations keep every lambda in (0, 1]; zero is accepted so
  // ablation variants can switch individual terms off.
  void validate() const {
    auto in_unit = [](S v) { return v >= S(0) && v <= S(1); };
    if (!in_unit(lambda1) || !in_unit(lambda2) || !in_unit(lambda3) || !in_unit(lambda4))
      throw ConfigError("loss weights: every lambda must lie in [0, 1]");
    if (!(tau > S(0)) || !(tau_prime > S(0)))
      throw DomainError("loss weights: temperatures must be > 0");
  }
};

using LossWeights = LossWeightsT<float>;

enum class FeatureLossKind { euclidean, mse };

// Direction of the softened KL terms. `mentor_targets` treats the mentor
// distribution (teacher, or the aux head in self-distillation) as the
// zero-gradient target P of KL(P || Q); `literal` swaps the roles while still
// keeping the mentor detached.
enum class KlDirection { mentor_targets, literal };

template <typename S>
struct LossBreakdownT {
  S hard = S(0);
  S feature = S(0);
  S response = S(0);
  S self_distill = S(0);
  S total = S(0);
  S teacher_total = S(0);
};

using LossBreakdown = LossBreakdownT<float>;

// Mean cross-entropy from logits at temperature 1.
template <typename S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& labels) {
  return nll_loss(log_softmax_tau(logits, S(1)), labels);
}

// Batch-mean KL divergence between temperature-softened distributions. The
// mentor side is detached, so gradients reach only the learner logits. There
// is deliberately no tau^2 rescaling of this term.
template <typename S>
Var<S> kl_softened(const Var<S>& mentor_logits, const Var<S>& learner_logits, S tau,
                   KlDirection dir = KlDirection::mentor_targets) {
  if (!(tau > S(0))) throw DomainError("kl_softened: temperature must be > 0");
  if (mentor_logits->value.shape != learner_logits->value.shape)
    throw ShapeError("kl_softened: logit shapes differ");
  auto lp_mentor = log_softmax_tau(detach(mentor_logits), tau);
  auto lq_learner = log_softmax_tau(learner_logits, tau);
  Var<S> per;
  if (dir == KlDirection::mentor_targets) {
    auto p = exp_op(lp_mentor);
    per = row_sum(mul(p, sub(lp_mentor, lq_learner)));
  } else {
    auto q = exp_op(lq_learner);
    per = row_sum(mul(q, sub(lq_learner, lp_mentor)));
  }
  return mean_all(per);
}

// Feature alignment between GAP vectors of matching branches. Teacher vectors
// are detached. Euclidean mode takes the batch mean of the unsquared L2
// distance per branch; mse mode is the elementwise mean of squared
// differences (kept for the ablation configuration).
template <typename S>
Var<S> feature_distill(const Var<S>& f_s_main, const Var<S>& f_t_main, const Var<S>& f_s_aux,
                       const Var<S>& f_t_aux, FeatureLossKind kind = FeatureLossKind::euclidean) {
  auto branch = [&](const Var<S>& fs, const Var<S>& ft) {
    if (fs->value.shape != ft->value.shape)
      throw ShapeError("feature_distill: vector shapes differ: " + fs->value.shape.str() + " vs " +
                       ft->value.shape.str());
    auto diff = sub(fs, detach(ft));
    auto sq = mul(diff, diff);
    if (kind == FeatureLossKind::euclidean) return mean_all(sqrt_op(row_sum(sq)));
    return mean_all(sq);
  };
  return add(branch(f_s_main, f_t_main), branch(f_s_aux, f_t_aux));
}

// Softened-output distillation over both branches; the teacher distribution
// is the target side.
template <typename S>
Var<S> response_distill(const Var<S>& s_main, const Var<S>& t_main, const Var<S>& s_aux,
                        const Var<S>& t_aux, S tau, KlDirection dir = KlDirection::mentor_targets) {
  return add(kl_softened(t_main, s_main, tau, dir), kl_softened(t_aux, s_aux, tau, dir));
}

// Intra-network transfer: the aux head acts as a detached mentor for the main
// head, so this term never trains the aux branch toward the main one.
template <typename S>
Var<S> self_distill(const Var<S>& s_main, const Var<S>& s_aux, S tau_prime,
                    KlDirection dir = KlDirection::mentor_targets) {
  return kl_softened(s_aux, s_main, tau_prime, dir);
}

template <typename S>
struct StudentLossInputs {
  Var<S> s_main, s_aux, f_s_main, f_s_aux;
  Var<S> t_main, t_aux, f_t_main, f_t_aux;
};

// Weighted composite student objective. The teacher side is detached inside
// every component, so the result is differentiable with respect to student
// parameters only.
template <typename S>
std::pair<Var<S>, LossBreakdownT<S>> student_total(const StudentLossInputs<S>& in,
                                                   const std::vector<int>& labels,
                                                   const LossWeightsT<S>& w,
                                                   FeatureLossKind feature_kind,
                                                   KlDirection dir) {
  w.validate();
  auto hard = add(cross_entropy(in.s_main, labels), cross_entropy(in.s_aux, labels));
  auto feat = feature_distill(in.f_s_main, in.f_t_main, in.f_s_aux, in.f_t_aux, feature_kind);
  auto resp = response_distill(in.s_main, in.t_main, in.s_aux, in.t_aux, w.tau, dir);
  auto sd = self_distill(in.s_main, in.s_aux, w.tau_prime, dir);
  auto total = add(add(scale(hard, w.lambda1), scale(feat, w.lambda2)),
                   add(scale(resp, w.lambda3), scale(sd, w.lambda4)));
  LossBreakdownT<S> b;
  b.hard = scalar_value(hard);
  b.feature = scalar_value(feat);
  b.response = scalar_value(resp);
  b.self_distill = scalar_value(sd);
  b.total = scalar_value(total);
  return {total, b};
}

inline FVar teacher_loss(const TeacherBundle& tb, const std::vector<int>& labels) {
  return add(cross_entropy(tb.main_logits, labels), cross_entropy(tb.aux_logits, labels));
}

inline FVar hard_loss(const StudentBundle& sb, const std::vector<int>& labels) {
  return add(cross_entropy(sb.main_logits, labels), cross_entropy(sb.aux_logits, labels));
}

inline StudentLossInputs<float> make_loss_inputs(const StudentBundle& sb, const TeacherBundle& tb) {
  StudentLossInputs<float> in;
  in.s_main = sb.main_logits;
  in.s_aux = sb.aux_logits;
  in.f_s_main = sb.f_main;
  in.f_s_aux = sb.f_aux;
  in.t_main = tb.main_logits;
  in.t_aux = tb.aux_logits;
  in.f_t_main = tb.f_main;
  in.f_t_aux = tb.f_aux;
  return in;
}

inline std::pair<FVar, LossBreakdown> student_total(const StudentBundle& sb,
                                                    const TeacherBundle& tb,
                                                    const std::vector<int>& labels,
                                                    const LossWeights& w,
                                                    FeatureLossKind feature_kind =
                                                        FeatureLossKind::euclidean,
                                                    KlDirection dir = KlDirection::mentor_targets) {
  return student_total(make_loss_inputs(sb, tb), labels, w, feature_kind, dir);
}

}  // namespace kd
