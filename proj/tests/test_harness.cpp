#include <cmath>
#include <vector>

#include "doctest.h"
#include "wb/harness.hpp"

using namespace wb;

namespace {

ModelConfig copy_config(long d_model, long layers, long vocab) {
  ModelConfig cfg;
  cfg.l_enc = layers;
  cfg.l_dec = layers;
  cfg.d_model = d_model;
  cfg.d_ff = 4 * d_model;
  cfg.heads = 4;
  cfg.d_kv = d_model / 4;
  cfg.d_vocab = vocab;
  cfg.t_max = 16;
  cfg.u_max = 16;
  return cfg;
}

}  // namespace

TEST_CASE("copy and reverse batches") {
  TaskSpec task;
  task.kind = TaskKind::Copy;
  task.vocab = 16;
  task.length = 3;
  task.seed = 5;
  Batch b = make_batch(task, 0, 3);
  CHECK(b.n_seq == 1);
  CHECK(b.y == b.x);
  for (long t : b.x) {
    CHECK(t >= 1);
    CHECK(t < 16);
  }
  task.kind = TaskKind::Reverse;
  Batch r = make_batch(task, 0, 3);
  CHECK(r.x == b.x);  // same stream, same draw
  std::vector<long> expect = {b.x[2], b.x[1], b.x[0]};
  CHECK(r.y == expect);
}

TEST_CASE("span corruption batches") {
  TaskSpec task;
  task.kind = TaskKind::SpanCorruption;
  task.vocab = 32;
  task.length = 12;
  task.seed = 9;
  Batch b = make_batch(task, 3, 12);
  CHECK(b.n_seq == 1);
  // sentinels sit at the top of the vocabulary and appear in matched pairs
  bool has_sentinel_x = false;
  for (long t : b.x)
    if (t >= 32 - 4) has_sentinel_x = true;
  CHECK(has_sentinel_x);
  CHECK(b.y[0] >= 32 - 4);  // targets start with the first sentinel
  // masked tail
  bool has_masked = false;
  for (double m : b.mask)
    if (m == 0.0) has_masked = true;
  CHECK(has_masked);

  // rate 0: source unchanged (one reserved sentinel), target sentinel-only
  task.corruption_rate = 0.0;
  Batch z = make_batch(task, 3, 12);
  for (long i = 0; i < 12; ++i) CHECK(z.x[static_cast<size_t>(i)] < 32 - 1);
  double scored = 0;
  for (double m : z.mask) scored += m;
  CHECK(scored == 1.0);
}

TEST_CASE("batches are deterministic in (seed, step)") {
  TaskSpec task;
  task.vocab = 32;
  task.length = 8;
  task.seed = 11;
  Batch a = make_batch(task, 17, 32);
  Batch b = make_batch(task, 17, 32);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  Batch c = make_batch(task, 18, 32);
  CHECK(a.x != c.x);
}

TEST_CASE("learning-rate schedule anchors") {
  long warmup = 100;
  double peak = 3e-3;
  // warmup step is the maximum of the schedule
  double at_peak = lr_at(ScheduleKind::InverseSqrt, warmup, warmup, peak);
  CHECK(at_peak == doctest::Approx(peak).epsilon(1e-12));
  for (long s : {1L, 10L, 50L, 150L, 400L, 10000L})
    CHECK(lr_at(ScheduleKind::InverseSqrt, s, warmup, peak) <= at_peak + 1e-15);
  // linear warmup: half way = half the warmup-step value
  CHECK(lr_at(ScheduleKind::InverseSqrt, warmup / 2, warmup, peak) ==
        doctest::Approx(peak / 2).epsilon(1e-12));
  // inverse sqrt: 4x warmup = half the peak
  CHECK(lr_at(ScheduleKind::InverseSqrt, 4 * warmup, warmup, peak) ==
        doctest::Approx(peak / 2).epsilon(1e-12));
  CHECK(lr_at(ScheduleKind::Constant, 4 * warmup, warmup, peak) == peak);
  CHECK(lr_at(ScheduleKind::Constant, warmup / 2, warmup, peak) ==
        doctest::Approx(peak / 2).epsilon(1e-12));
  CHECK_THROWS_AS((void)lr_at(ScheduleKind::InverseSqrt, 5, 0, peak), ConfigError);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamStore ps;
  ps.register_param("w", {3}, InitScheme::constant(1.5));
  ps.init_all(Rng(0));
  AdamState st;
  st.reset(ps);
  adam_step(ps, st, AdamConfig{}, 0.1);
  for (long i = 0; i < 3; ++i) CHECK(ps.value("w")[i] == 1.5);
}

TEST_CASE("adam: constant gradient approaches a signed step of size lr") {
  ParamStore ps;
  ps.register_param("w", {1}, InitScheme::zeros());
  ps.init_all(Rng(0));
  AdamState st;
  st.reset(ps);
  AdamConfig hp;
  double lr = 0.01;
  double prev = 0.0;
  double update = 0.0;
  for (int k = 0; k < 300; ++k) {
    ps.grad("w")[0] = 0.37;  // constant positive gradient
    prev = ps.value("w")[0];
    adam_step(ps, st, hp, lr);
    update = ps.value("w")[0] - prev;
  }
  CHECK(update == doctest::Approx(-lr).epsilon(1e-3));
}

TEST_CASE("adam matches a hand-rolled trace on a scalar quadratic") {
  // f(w) = w^2, gradient 2w, three steps
  ParamStore ps;
  ps.register_param("w", {1}, InitScheme::constant(1.0));
  ps.init_all(Rng(0));
  AdamState st;
  st.reset(ps);
  AdamConfig hp;
  double lr = 0.1;

  double w = 1.0, m = 0.0, v = 0.0;
  for (long step = 1; step <= 3; ++step) {
    ps.grad("w")[0] = 2.0 * ps.value("w")[0];
    adam_step(ps, st, hp, lr);

    double g = 2.0 * w;
    m = hp.beta1 * m + (1.0 - hp.beta1) * g;
    v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
    double mh = m / (1.0 - std::pow(hp.beta1, static_cast<double>(step)));
    double vh = v / (1.0 - std::pow(hp.beta2, static_cast<double>(step)));
    w -= lr * mh / (std::sqrt(vh) + hp.eps);
    CHECK(ps.value("w")[0] == w);  // bit-identical
  }
}

TEST_CASE("optimizer respects sharing: tied step equals summed-gradient step") {
  // two usage sites of one slot: the applied update uses the summed gradient
  ParamStore tied;
  tied.register_param("a", {2}, InitScheme::constant(0.5), "shared");
  tied.register_param("b", {2}, InitScheme::constant(0.5), "shared");
  tied.init_all(Rng(0));
  Tape t;
  ParamVars pv(t, tied);
  Var loss = add(reduce_sum_all(mul(pv("a"), pv("a"))), reduce_sum_all(pv("b")));
  t.backward(loss);
  tied.zero_grads();
  tied.absorb_grads(t);
  AdamState st;
  st.reset(tied);
  adam_step(tied, st, AdamConfig{}, 0.05);

  ParamStore manual;
  manual.register_param("w", {2}, InitScheme::constant(0.5));
  manual.init_all(Rng(0));
  manual.grad("w") = Tensor({2}, {2 * 0.5 + 1, 2 * 0.5 + 1});  // summed gradient by hand
  AdamState st2;
  st2.reset(manual);
  adam_step(manual, st2, AdamConfig{}, 0.05);
  for (long i = 0; i < 2; ++i) CHECK(tied.value("a")[i] == manual.value("w")[i]);
}

TEST_CASE("zero-step run emits the initial eval row only") {
  TrainRun run;
  run.config = copy_config(16, 1, 16);
  run.task.vocab = 16;
  run.task.length = 8;
  run.steps = 0;
  run.batch_tokens = 32;
  TrainResult res = train(run);
  CHECK(res.log.size() == 1);
  CHECK(res.log[0].step == 0);
  CHECK(!std::isnan(res.log[0].eval_acc));
  CHECK(std::isnan(res.log[0].loss));
}

TEST_CASE("identical seeds give byte-identical metric logs") {
  TrainRun run;
  run.config = copy_config(16, 1, 16);
  run.task.vocab = 16;
  run.task.length = 8;
  run.task.seed = 3;
  run.steps = 12;
  run.batch_tokens = 64;
  run.warmup = 4;
  run.eval_every = 6;
  run.seed = 21;
  TrainResult a = train(run);
  TrainResult b = train(run);
  CHECK(metrics_csv(a) == metrics_csv(b));
  CHECK(!a.diverged);
  TrainRun other = run;
  other.seed = 22;
  CHECK(metrics_csv(train(other)) != metrics_csv(a));
}

TEST_CASE("a short copy run decreases the loss") {
  TrainRun run;
  run.config = copy_config(16, 1, 16);
  run.task.vocab = 16;
  run.task.length = 8;
  run.steps = 60;
  run.batch_tokens = 128;
  run.warmup = 10;
  run.peak_lr = 3e-3;
  TrainResult res = train(run);
  CHECK(!res.diverged);
  CHECK(res.final_loss < res.first_loss);
}

TEST_CASE("baseline gradcheck passes through the suite entry point") {
  GradCheckResult r = gradcheck_variant("baseline");
  CHECK(r.instantiated);
  CHECK(r.pass);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("suite reports an instantiation failure without stopping") {
  auto results = gradcheck_suite({"baseline", "evolved"}, false);
  CHECK(results[0].pass);
  CHECK(!results[1].instantiated);
  CHECK(!results[1].pass);
  CHECK(!results[1].error.empty());
}
