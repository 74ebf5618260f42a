// Acceptance suite. Each test case is one acceptance criterion; a listener
// prints one [PASS]/[FAIL] line per criterion as it finishes.
#include "testutil.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "kd/analysis/gradcam.hpp"
#include "kd/analysis/report.hpp"
#include "kd/losses.hpp"
#include "kd/runconfig.hpp"
#include "kd/train.hpp"

namespace {

class CriterionReporter : public Catch::EventListenerBase {
 public:
  using Catch::EventListenerBase::EventListenerBase;
  void testCaseEnded(const Catch::TestCaseStats& stats) override {
    const bool ok = stats.totals.assertions.failed == 0 && !stats.aborting;
    std::printf("[%s] %s\n", ok ? "PASS" : "FAIL", stats.testInfo->name.c_str());
    std::fflush(stdout);
  }
};
CATCH_REGISTER_LISTENER(CriterionReporter)

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

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

kd::DataView toy_view(const kd::DatasetManifest& m, const kd::ImageProvider& p,
                      const kd::NormalizationSpec& n, kd::Split split, int64_t resize) {
  kd::DataView v;
  v.manifest = &m;
  v.provider = &p;
  v.split = split;
  v.augment.resize = resize;
  v.normalize = n;
  return v;
}

}  // namespace

TEST_CASE("criterion 1: architecture audit against the reference stage totals", "[c1]") {
  const auto start = Clock::now();
  auto dir = kdtest::temp_dir("acc_c1");
  REQUIRE(run_cli("analyze --preset rice-variety --out " + dir.string()) == 0);

  // parse the per-stage student subtotals out of the emitted report
  std::ifstream is(dir / "analysis" / "params_student.csv");
  REQUIRE(is.good());
  std::string line;
  std::getline(is, line);
  REQUIRE(line == "name,kind,stage,count");
  std::map<std::string, int64_t> stage_totals;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string name, kind, stage, count;
    std::getline(ls, name, ',');
    std::getline(ls, kind, ',');
    std::getline(ls, stage, ',');
    std::getline(ls, count, ',');
    stage_totals[stage] += std::stoll(count);
  }
  const std::map<std::string, int64_t> reference{{"stem", 10'000},
                                                 {"stage1", 100'000},
                                                 {"stage2", 180'000},
                                                 {"stage3", 300'000},
                                                 {"stage4", 470'000}};
  for (const auto& [stage, ref] : reference) {
    INFO(stage << " -> " << stage_totals[stage]);
    REQUIRE(std::abs(stage_totals[stage] - ref) <= 20'000);
  }
  const int64_t backbone = stage_totals["stem"] + stage_totals["stage1"] +
                           stage_totals["stage2"] + stage_totals["stage3"] +
                           stage_totals["stage4"];
  REQUIRE(backbone >= 1'030'000);
  REQUIRE(backbone <= 1'090'000);
  REQUIRE(backbone + stage_totals["head"] <= 1'090'000);
  REQUIRE(stage_totals["head"] == 1026);
  REQUIRE(seconds_since(start) < 5.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("criterion 2: stage shapes at 224x224 and dense-concat prefixes", "[c2]") {
  kd::StudentNet net(2, {}, 0);
  kd::Rng rng(100);
  kd::NoGradGuard ng;
  auto bundle =
      net.forward(kd::make_var(kdtest::random_tensor<float>({1, 3, 224, 224}, rng)), false);
  REQUIRE(bundle.stage_out[0]->value.shape == kd::Shape{1, 128, 56, 56});
  REQUIRE(bundle.stage_out[1]->value.shape == kd::Shape{1, 224, 28, 28});
  REQUIRE(bundle.stage_out[2]->value.shape == kd::Shape{1, 352, 14, 14});
  REQUIRE(bundle.stage_out[3]->value.shape == kd::Shape{1, 512, 7, 7});

  for (auto& stage : net.stages()) {
    for (auto& block : stage) {
      auto x = kd::make_var(kdtest::random_tensor<float>({1, block.in_channels(), 6, 6}, rng));
      auto y = block.forward(x, false);
      REQUIRE(y->value.shape[1] == block.out_channels());
      bool prefix_exact = true;
      for (int64_t c = 0; c < block.in_channels() && prefix_exact; ++c)
        for (int64_t s = 0; s < 36 && prefix_exact; ++s)
          prefix_exact = y->value.at4(0, c, s / 6, s % 6) == x->value.at4(0, c, s / 6, s % 6);
      REQUIRE(prefix_exact);
    }
  }
}

TEST_CASE("criterion 3: compute cost against the reference figures", "[c3]") {
  const auto start = Clock::now();
  kd::StudentNet student(2, {}, 0);
  kd::TeacherNet teacher(2, {}, 0);
  kd::FlopReport sf = kd::count_macs(student.layers(), 224, 224);
  kd::FlopReport tf = kd::count_macs(teacher.layers(), 224, 224);

  REQUIRE(std::abs(static_cast<double>(tf.main_macs()) - 1.82e9) <= 0.05 * 1.82e9);
  REQUIRE(sf.main_macs() >= 600'000'000);
  REQUIRE(sf.main_macs() <= 750'000'000);
  const double ratio = static_cast<double>(tf.main_macs()) / static_cast<double>(sf.main_macs());
  REQUIRE(ratio >= 2.4);
  REQUIRE(seconds_since(start) < 5.0);
}

TEST_CASE("criterion 4: loss identities, linearity, and gradient isolation", "[c4]") {
  using kd::Var;
  auto logits2 = [](float a, float b) {
    kd::Tensor<float> t({1, 2});
    t.at2(0, 0) = a;
    t.at2(0, 1) = b;
    return kd::make_var(std::move(t));
  };

  // closed forms at 1e-4 absolute
  REQUIRE(std::abs(kd::scalar_value(kd::cross_entropy(logits2(1, 0), {0})) -
                   0.3132616875182228) <= 1e-4);
  REQUIRE(std::abs(kd::scalar_value(kd::cross_entropy(logits2(0, 0), {0})) -
                   0.6931471805599453) <= 1e-4);
  kd::TeacherBundle tb;
  tb.main_logits = logits2(1, 0);
  tb.aux_logits = logits2(0, 1);
  REQUIRE(std::abs(kd::scalar_value(kd::teacher_loss(tb, {0})) - 1.6265233750364456) <= 1e-4);
  auto equal = logits2(0.4f, 0.1f);
  REQUIRE(std::abs(kd::scalar_value(kd::response_distill(logits2(0, 0), logits2(1, 0), equal,
                                                         equal, 1.0f)) -
                   0.11094407167172735) <= 1e-4);
  REQUIRE(std::abs(kd::scalar_value(kd::self_distill(logits2(0, 0), logits2(1, 0), 1.0f)) -
                   0.11094407167172735) <= 1e-4);
  std::vector<float> d345(512, 0.0f);
  d345[0] = 3;
  d345[1] = 4;
  auto vec = [](std::vector<float> v) {
    return kd::make_var(kd::Tensor<float>({1, static_cast<int64_t>(v.size())}, std::move(v)));
  };
  auto z512 = vec(std::vector<float>(512, 0.0f));
  auto z352 = vec(std::vector<float>(352, 0.0f));
  REQUIRE(std::abs(kd::scalar_value(kd::feature_distill(vec(d345), z512, z352, z352)) - 5.0) <=
          1e-4);

  // non-negativity and lambda linearity on a random bundle
  kd::Rng rng(101);
  auto rnd = [&](int64_t r, int64_t c) {
    return kd::make_var(kdtest::random_tensor<float>({r, c}, rng, 2.0));
  };
  kd::StudentLossInputs<float> in;
  in.s_main = rnd(4, 3);
  in.s_aux = rnd(4, 3);
  in.t_main = rnd(4, 3);
  in.t_aux = rnd(4, 3);
  in.f_s_main = rnd(4, 5);
  in.f_t_main = rnd(4, 5);
  in.f_s_aux = rnd(4, 4);
  in.f_t_aux = rnd(4, 4);
  std::vector<int> labels{0, 1, 2, 1};
  kd::LossWeightsT<float> w{0.3f, 0.7f, 0.7f, 0.7f, 4.0f, 4.0f};
  auto [total, br] =
      kd::student_total(in, labels, w, kd::FeatureLossKind::euclidean,
                        kd::KlDirection::mentor_targets);
  REQUIRE(br.hard >= 0);
  REQUIRE(br.feature >= 0);
  REQUIRE(br.response >= 0);
  REQUIRE(br.self_distill >= 0);
  REQUIRE(std::abs(br.total - (0.3 * br.hard + 0.7 * br.feature + 0.7 * br.response +
                               0.7 * br.self_distill)) <= 1e-6);

  // argmax invariance of the softened targets
  for (int t = 0; t < 8; ++t) {
    auto z = kdtest::random_tensor<float>({1, 5}, rng, 3.0);
    int64_t want = 0;
    for (int64_t j = 1; j < 5; ++j)
      if (z[j] > z[want]) want = j;
    for (float tau : {0.5f, 1.0f, 4.0f, 64.0f}) {
      auto p = kd::softmax_tau(kd::make_var(kd::Tensor<float>(z)), tau);
      int64_t got = 0;
      for (int64_t j = 1; j < 5; ++j)
        if (p->value[j] > p->value[got]) got = j;
      REQUIRE(got == want);
    }
  }

  // exact gradient isolation, all three directions
  kd::Rng drng(102);
  auto dx = kd::make_var(kdtest::random_tensor<double>({4, 6}, drng));
  std::vector<kd::Var<double>> sp, tp;
  for (int i = 0; i < 4; ++i) {
    sp.push_back(kdtest::random_param<double>("s" + std::to_string(i),
                                              {i < 2 ? 3 : (i == 2 ? 5 : 4), 6}, drng));
    tp.push_back(kdtest::random_param<double>("t" + std::to_string(i),
                                              {i < 2 ? 3 : (i == 2 ? 5 : 4), 6}, drng));
  }
  auto build = [&] {
    kd::StudentLossInputs<double> b;
    b.s_main = kd::linear(dx, sp[0], kd::Var<double>{});
    b.s_aux = kd::linear(dx, sp[1], kd::Var<double>{});
    b.f_s_main = kd::linear(dx, sp[2], kd::Var<double>{});
    b.f_s_aux = kd::linear(dx, sp[3], kd::Var<double>{});
    b.t_main = kd::linear(dx, tp[0], kd::Var<double>{});
    b.t_aux = kd::linear(dx, tp[1], kd::Var<double>{});
    b.f_t_main = kd::linear(dx, tp[2], kd::Var<double>{});
    b.f_t_aux = kd::linear(dx, tp[3], kd::Var<double>{});
    return b;
  };
  std::vector<int> dl{0, 2, 1, 2};
  kd::LossWeightsT<double> dw{0.3, 0.7, 0.7, 0.7, 4.0, 4.0};
  auto [dtotal, dbr] = kd::student_total(build(), dl, dw, kd::FeatureLossKind::euclidean,
                                         kd::KlDirection::mentor_targets);
  kd::backward(dtotal);
  for (auto& p : tp)
    for (double g : p->grad.data) REQUIRE(g == 0.0);  // dL_student/d(teacher) == 0

  for (auto& p : sp) p->zero_grad();
  auto bb = build();
  kd::backward(kd::self_distill(bb.s_main, bb.s_aux, 4.0));
  for (double g : sp[1]->grad.data) REQUIRE(g == 0.0);  // dL_SD/d(aux head) == 0

  for (auto& p : sp) p->zero_grad();
  auto bc = build();
  kd::backward(kd::add(kd::cross_entropy(bc.t_main, dl), kd::cross_entropy(bc.t_aux, dl)));
  for (auto& p : sp)
    for (double g : p->grad.data) REQUIRE(g == 0.0);  // dL_teacher/d(student) == 0
}

TEST_CASE("criterion 5: finite-difference gradients for every layer kind", "[c5]") {
  const auto start = Clock::now();
  kd::Rng rng(103);

  {  // conv2d (strided + padded) and the pointwise fast path
    auto x = kdtest::random_param<double>("x", {2, 3, 7, 7}, rng);
    auto w = kdtest::random_param<double>("w", {4, 3, 3, 3}, rng);
    auto b = kdtest::random_param<double>("b", {4}, rng);
    kdtest::check_gradients({x, w, b}, [&] { return kd::mean_all(kd::conv2d(x, w, b, 2, 1)); });
    auto wp = kdtest::random_param<double>("wp", {5, 3, 1, 1}, rng);
    kdtest::check_gradients(
        {x, wp}, [&] { return kd::mean_all(kd::conv2d(x, wp, kd::Var<double>{}, 1, 0)); });
  }
  {  // depthwise
    auto x = kdtest::random_param<double>("x", {2, 4, 6, 6}, rng);
    auto w = kdtest::random_param<double>("w", {4, 1, 3, 3}, rng);
    kdtest::check_gradients({x, w}, [&] { return kd::mean_all(kd::depthwise_conv2d(x, w, 2, 1)); });
  }
  {  // batch norm (train statistics)
    auto x = kdtest::random_param<double>("x", {3, 2, 4, 4}, rng);
    auto g = kdtest::random_param<double>("g", {2}, rng);
    auto b = kdtest::random_param<double>("b", {2}, rng);
    kd::Tensor<double> rm = kd::Tensor<double>::zeros({2});
    kd::Tensor<double> rv = kd::Tensor<double>::full({2}, 1.0);
    auto wob = kdtest::random_tensor<double>({3, 2, 4, 4}, rng);
    kdtest::check_gradients({x, g, b}, [&] {
      auto y = kd::batch_norm(x, g, b, rm, rv, 0.1, 1e-5, true);
      return kd::mean_all(kd::mul(y, kd::make_var(kd::Tensor<double>(wob))));
    });
  }
  {  // activations and pooling
    auto x = kdtest::random_param<double>("x", {2, 3, 6, 6}, rng, 2.0);
    kdtest::check_gradients({x}, [&] { return kd::mean_all(kd::relu(x)); });
    kdtest::check_gradients({x}, [&] { return kd::mean_all(kd::relu6(kd::scale(x, 2.0))); });
    auto wob = kdtest::random_tensor<double>({2, 3, 3, 3}, rng);
    kdtest::check_gradients({x}, [&] {
      return kd::mean_all(kd::mul(kd::max_pool(x, 3, 2, 1), kd::make_var(kd::Tensor<double>(wob))));
    });
    kdtest::check_gradients({x}, [&] {
      return kd::mean_all(kd::mul(kd::avg_pool(x, 2, 2), kd::make_var(kd::Tensor<double>(wob))));
    });
    kdtest::check_gradients({x}, [&] { return kd::mean_all(kd::global_avg_pool(x)); });
  }
  {  // linear, concat, add, softmax
    auto x = kdtest::random_param<double>("x", {3, 4}, rng);
    auto w = kdtest::random_param<double>("w", {2, 4}, rng);
    auto b = kdtest::random_param<double>("b", {2}, rng);
    kdtest::check_gradients({x, w, b}, [&] { return kd::mean_all(kd::linear(x, w, b)); });
    auto a4 = kdtest::random_param<double>("a4", {1, 2, 3, 3}, rng);
    auto b4 = kdtest::random_param<double>("b4", {1, 3, 3, 3}, rng);
    auto wob = kdtest::random_tensor<double>({1, 5, 3, 3}, rng);
    kdtest::check_gradients({a4, b4}, [&] {
      return kd::mean_all(
          kd::mul(kd::concat_channels(a4, b4), kd::make_var(kd::Tensor<double>(wob))));
    });
    auto c4 = kdtest::random_param<double>("c4", {1, 2, 3, 3}, rng);
    kdtest::check_gradients({a4, c4}, [&] { return kd::mean_all(kd::add(a4, c4)); });
    auto z = kdtest::random_param<double>("z", {3, 5}, rng, 2.0);
    auto zwob = kdtest::random_tensor<double>({3, 5}, rng);
    kdtest::check_gradients({z}, [&] {
      return kd::mean_all(kd::mul(kd::softmax_tau(z, 4.0), kd::make_var(kd::Tensor<double>(zwob))));
    });
  }

  // full composite student loss on a 4-sample, C=3 bundle
  kd::Rng brng(104);
  auto x = kd::make_var(kdtest::random_tensor<double>({4, 6}, brng));
  std::vector<kd::Var<double>> sp{kdtest::random_param<double>("sm", {3, 6}, brng),
                                  kdtest::random_param<double>("sa", {3, 6}, brng),
                                  kdtest::random_param<double>("fm", {5, 6}, brng),
                                  kdtest::random_param<double>("fa", {4, 6}, brng)};
  std::vector<kd::Var<double>> tp{kdtest::random_param<double>("tm", {3, 6}, brng),
                                  kdtest::random_param<double>("ta", {3, 6}, brng),
                                  kdtest::random_param<double>("gm", {5, 6}, brng),
                                  kdtest::random_param<double>("ga", {4, 6}, brng)};
  std::vector<int> labels{0, 2, 1, 2};
  kd::LossWeightsT<double> w{0.3, 0.7, 0.7, 0.7, 4.0, 4.0};
  kdtest::check_gradients(sp, [&] {
    kd::StudentLossInputs<double> in;
    in.s_main = kd::linear(x, sp[0], kd::Var<double>{});
    in.s_aux = kd::linear(x, sp[1], kd::Var<double>{});
    in.f_s_main = kd::linear(x, sp[2], kd::Var<double>{});
    in.f_s_aux = kd::linear(x, sp[3], kd::Var<double>{});
    in.t_main = kd::linear(x, tp[0], kd::Var<double>{});
    in.t_aux = kd::linear(x, tp[1], kd::Var<double>{});
    in.f_t_main = kd::linear(x, tp[2], kd::Var<double>{});
    in.f_t_aux = kd::linear(x, tp[3], kd::Var<double>{});
    return kd::student_total(in, labels, w, kd::FeatureLossKind::euclidean,
                             kd::KlDirection::mentor_targets)
        .first;
  });
  REQUIRE(seconds_since(start) < 120.0);
}

TEST_CASE("criterion 6: teacher updates strictly precede target production", "[c6]") {
  kd::ToySpec spec{2, 16, 32, 0, 0.1};
  kd::DatasetManifest m = kd::assign_splits(kd::make_toy_manifest(spec), {0.8, 0.1, 0.1}, 0);
  kd::ToyImageProvider provider(spec);
  kd::NormalizationSpec norm = kd::compute_dataset_stats(m, provider, kd::Split::train, 32);
  kd::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.early_stop_patience = 1;
  cfg.learning_rate = 1e-3;

  kd::BatchStream stream(toy_view(m, provider, norm, kd::Split::train, 32), 8, 0, 1, true);
  kd::SampleBatch batch;
  REQUIRE(stream.next(batch));

  {
    kd::TeacherNet teacher(2, {}, 1);
    kd::StudentNet student(2, {}, 1);
    kd::Optimizer topt(kd::collect_params(teacher), cfg.optimizer_config(cfg.learning_rate));
    kd::Optimizer sopt(kd::collect_params(student), cfg.optimizer_config(cfg.learning_rate));
    kd::StepResult r = kd::train_step_sequential(teacher, student, topt, sopt, batch, cfg);
    REQUIRE(r.teacher_hash_at_targets == kd::param_hash(teacher));
  }

  kd::LossBreakdown post, pre;
  {
    kd::TeacherNet teacher(2, {}, 1);
    kd::StudentNet student(2, {}, 1);
    kd::Optimizer topt(kd::collect_params(teacher), cfg.optimizer_config(cfg.learning_rate));
    kd::Optimizer sopt(kd::collect_params(student), cfg.optimizer_config(cfg.learning_rate));
    post = kd::train_step_sequential(teacher, student, topt, sopt, batch, cfg,
                                     kd::TargetTiming::post_teacher_update)
               .breakdown;
  }
  {
    kd::TeacherNet teacher(2, {}, 1);
    kd::StudentNet student(2, {}, 1);
    kd::Optimizer topt(kd::collect_params(teacher), cfg.optimizer_config(cfg.learning_rate));
    kd::Optimizer sopt(kd::collect_params(student), cfg.optimizer_config(cfg.learning_rate));
    pre = kd::train_step_sequential(teacher, student, topt, sopt, batch, cfg,
                                    kd::TargetTiming::pre_teacher_update)
              .breakdown;
  }
  REQUIRE(post.response != pre.response);
}

TEST_CASE("criterion 7: desk-scale training and the ablation ladder", "[c7]") {
  const auto start = Clock::now();
  kd::ToySpec spec{2, 200, 64, 0, 0.1};
  kd::DatasetManifest m = kd::assign_splits(kd::make_toy_manifest(spec), {0.8, 0.1, 0.1}, 0);
  kd::ToyImageProvider provider(spec);
  kd::NormalizationSpec norm = kd::compute_dataset_stats(m, provider, kd::Split::train, 64);
  const auto train = toy_view(m, provider, norm, kd::Split::train, 64);
  const auto val = toy_view(m, provider, norm, kd::Split::val, 64);

  // full hybrid pipeline reaches the accuracy bar within 30 epochs
  {
    kd::TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 64;
    cfg.learning_rate = 1e-3;
    cfg.early_stop_patience = 3;
    cfg.seed = 0;
    kd::TeacherNet teacher(2, {}, cfg.seed);
    kd::StudentNet student(2, {}, cfg.seed);
    kd::FitResult r = kd::fit(teacher, student, train, val, cfg);
    REQUIRE(r.best_epoch <= 30);
    REQUIRE(r.best_val_accuracy >= 0.95);
  }

  // ablation ladder: every configuration trains to completion with a
  // downward-trending train loss and no non-finite values
  struct Rung {
    const char* name;
    float l2, l4;
    kd::FeatureLossKind kind;
  };
  const Rung ladder[] = {
      {"baseline", 0.0f, 0.0f, kd::FeatureLossKind::euclidean},
      {"+fd-mse", 0.7f, 0.0f, kd::FeatureLossKind::mse},
      {"+fd-euclidean", 0.7f, 0.0f, kd::FeatureLossKind::euclidean},
      {"full", 0.7f, 0.7f, kd::FeatureLossKind::euclidean},
  };
  for (const Rung& rung : ladder) {
    kd::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 64;
    cfg.learning_rate = 1e-3;
    cfg.early_stop_patience = 2;
    cfg.seed = 0;
    cfg.loss_weights.lambda2 = rung.l2;
    cfg.loss_weights.lambda4 = rung.l4;
    cfg.feature_loss = rung.kind;
    kd::TeacherNet teacher(2, {}, cfg.seed);
    kd::StudentNet student(2, {}, cfg.seed);
    kd::FitResult r = kd::fit(teacher, student, train, val, cfg);
    INFO("ladder rung " << rung.name);
    REQUIRE(r.history.size() == 2);  // ran to completion
    double first = 0, last = 0;
    for (const auto& epoch : r.history) {
      const double composite = cfg.loss_weights.lambda1 * epoch.l_hard +
                               cfg.loss_weights.lambda2 * epoch.l_fd +
                               cfg.loss_weights.lambda3 * epoch.l_rd +
                               cfg.loss_weights.lambda4 * epoch.l_sd;
      REQUIRE(std::isfinite(composite));
      REQUIRE(std::isfinite(epoch.student_train_main.loss));
      if (epoch.epoch == 1) first = composite;
      last = composite;
    }
    REQUIRE(last < first);  // downward trend
  }
  REQUIRE(seconds_since(start) < 600.0);
}

TEST_CASE("criterion 8: one-vs-rest construction at the published counts", "[c8]") {
  // nine classes with the published per-class image counts
  const std::vector<std::pair<std::string, int>> classes{
      {"BC-15", 1834},      {"Huong Thom-1", 2116}, {"Nep-87", 1399},
      {"Q-5", 1924},        {"TBR-36", 1136},       {"TBR-45", 1140},
      {"TH-35", 1012},      {"Thien Uu-8", 1026},   {"Xi-23", 2340}};
  kd::DatasetManifest m;
  for (int c = 0; c < static_cast<int>(classes.size()); ++c) {
    m.class_names.push_back(classes[static_cast<size_t>(c)].first);
    for (int i = 0; i < classes[static_cast<size_t>(c)].second; ++i)
      m.entries.push_back({classes[static_cast<size_t>(c)].first + "/" + std::to_string(i), c,
                           kd::Split::none});
  }

  kd::OneVsRestSpec spec;
  spec.target = "Xi-23";
  spec.seed = 0;
  spec.negative_count = 2239;
  spec.margin = 101;
  kd::DatasetManifest ovr = kd::build_one_vs_rest(m, spec);
  REQUIRE(ovr.class_names[0] == "Xi-23");
  REQUIRE(ovr.class_count(0) == 2340);
  REQUIRE(ovr.class_count(1) == 2239);
  REQUIRE(static_cast<int64_t>(ovr.entries.size()) == 4579);

  std::set<std::string> ids;
  for (const auto& e : ovr.entries) {
    REQUIRE(ids.insert(e.id).second);  // duplicate-free
    if (e.class_index == 1) REQUIRE(e.id.rfind("Xi-23/", 0) != 0);  // target-exclusive
  }
}

TEST_CASE("criterion 9: byte-identical reruns and bit-exact checkpoints", "[c9]") {
  auto dir = kdtest::temp_dir("acc_c9");
  const std::string out1 = (dir / "r1").string(), out2 = (dir / "r2").string();
  REQUIRE(run_cli("train --toy --seed 0 --out " + out1) == 0);
  REQUIRE(run_cli("train --toy --seed 0 --out " + out2) == 0);
  REQUIRE(slurp(dir / "r1" / "metrics.csv") == slurp(dir / "r2" / "metrics.csv"));

  // checkpoint roundtrip: byte-identical resave, forward-equivalent restore
  const std::string ck = out1 + "/checkpoints/best.kdf";
  kd::CheckpointRecord rec = kd::load_checkpoint(ck);
  const std::string ck2 = (dir / "resaved.kdf").string();
  kd::save_checkpoint(rec, ck2);
  REQUIRE(slurp(ck) == slurp(ck2));

  kd::StudentNet a(2, {}, 1), b(2, {}, 2);
  kd::load_tensors_into(a, rec, "student/");
  kd::load_tensors_into(b, rec, "student/");
  kd::Rng rng(105);
  auto x = kdtest::random_tensor<float>({1, 3, 64, 64}, rng);
  kd::NoGradGuard ng;
  auto ya = a.forward(kd::make_var(kd::Tensor<float>(x)), false);
  auto yb = b.forward(kd::make_var(kd::Tensor<float>(x)), false);
  REQUIRE(ya.main_logits->value.data == yb.main_logits->value.data);
  REQUIRE(ya.aux_logits->value.data == yb.aux_logits->value.data);
  std::filesystem::remove_all(dir);
}

TEST_CASE("criterion 10: class-activation map contract", "[c10]") {
  // analytic single-channel case is exact
  kd::Rng rng(106);
  auto x = kdtest::random_param<float>("x", {1, 2, 5, 5}, rng);
  for (auto& v : x->value.data) v = std::abs(v);
  auto gap = kd::flatten(kd::global_avg_pool(x));
  kd::Tensor<float> w = kd::Tensor<float>::zeros({2, 2});
  w.at2(1, 1) = 1.0f;
  auto logits = kd::linear(gap, kd::make_var(std::move(w)), kd::Var<float>{});
  kd::GradCamMap analytic = kd::grad_cam_from(x, logits, 1, 10, 10);
  for (int64_t i = 0; i < 25; ++i)
    REQUIRE(analytic.raw[i] == Catch::Approx(x->value[25 + i] / 25.0f).margin(1e-7));

  // full-network maps: rectified, max-normalized, shift invariant at 1e-5
  kd::StudentNet net(3, {}, 2);
  kd::Rng irng(107);
  kd::Tensor<float> img = kdtest::random_tensor<float>({1, 3, 64, 64}, irng);
  kd::GradCamMap m1 = kd::grad_cam(net, img, 0);
  for (float v : m1.raw.data) REQUIRE(v >= 0.0f);
  float mx = 0;
  for (float v : m1.normalized.data) mx = std::max(mx, v);
  REQUIRE(mx == Catch::Approx(1.0f).margin(1e-6));

  net.visit_params([&](const kd::Var<float>& p) {
    if (p->name == "head.fc.bias")
      for (auto& v : p->value.data) v += 3.0f;
  });
  kd::GradCamMap m2 = kd::grad_cam(net, img, 0);
  for (int64_t i = 0; i < m1.normalized.numel(); ++i)
    REQUIRE(std::abs(m1.normalized[i] - m2.normalized[i]) <= 1e-5f);

  // degenerate all-zero gradient: all-zero map, no division fault
  auto x0 = kdtest::random_param<float>("x0", {1, 2, 4, 4}, rng);
  auto gap0 = kd::flatten(kd::global_avg_pool(x0));
  auto logits0 = kd::linear(gap0, kd::make_var(kd::Tensor<float>::zeros({2, 2})), kd::Var<float>{});
  kd::GradCamMap z = kd::grad_cam_from(x0, logits0, 0, 8, 8);
  for (float v : z.normalized.data) REQUIRE(v == 0.0f);
}
