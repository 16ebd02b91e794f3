#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "minimt/eval.hpp"
#include "minimt/train.hpp"

using namespace minimt;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

ModelConfig micro_config(int vocab) {
  ModelConfig c;
  c.num_encoder_layers = 1;
  c.num_decoder_layers = 1;
  c.d_model = 8;
  c.d_ff = 16;
  c.num_heads = 2;
  c.src_vocab_size = vocab;
  c.tgt_vocab_size = vocab;
  c.dropout = 0.0f;
  c.max_seq_len = 16;
  return c;
}

// Copy-task corpus with constant sentence length so batching never reorders.
void copy_data(int sentences, Vocabulary& vocab, BatchSet& one_batch,
               BatchSet& two_batches) {
  ParallelCorpus corpus = generate_task(TaskKind::kCopy, 6, sentences, 3, 3,
                                        false, 71);
  vocab = build_vocab(corpus.src, 100);
  one_batch = make_batches(corpus, vocab, vocab, {}, 4L * sentences, 16);
  two_batches = make_batches(corpus, vocab, vocab, {}, 2L * sentences, 16);
}

bool params_equal(const TransformerModel& a, const TransformerModel& b,
                  float tol) {
  for (const auto& [name, t] : a.params()) {
    const Tensor& u = b.param(name);
    for (Index i = 0; i < t.numel(); ++i)
      if (std::abs(t.data[i] - u.data[i]) > tol) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("cross entropy on uniform logits is ln V") {
  Tensor logits = Tensor::zeros({3, 5});
  CHECK(cross_entropy_loss(logits, {0, 2, 4}, 0.0f).item() ==
        doctest::Approx(std::log(5.0f)));
  CHECK(cross_entropy_sum(logits, {0, 2, 4}, 0.0f).item() ==
        doctest::Approx(3.0f * std::log(5.0f)));
  // smoothing cannot change anything when all classes are equiprobable
  CHECK(cross_entropy_loss(logits, {0, 2, 4}, 0.3f).item() ==
        doctest::Approx(std::log(5.0f)));
}

TEST_CASE("smoothed cross entropy matches the closed form") {
  Tensor logits = Tensor::from_matrix(
      (RowMatrixXf(1, 2) << std::log(3.0f), 0.0f).finished());
  // softmax = [3/4, 1/4]; q = [0.8, 0.2] at smoothing 0.2
  float want = -(0.8f * std::log(0.75f) + 0.2f * std::log(0.25f));
  CHECK(cross_entropy_loss(logits, {0}, 0.2f).item() ==
        doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("cross entropy gradient is softmax minus the smoothed target") {
  Tensor logits = Tensor::from_matrix(
      (RowMatrixXf(1, 3) << 0.2f, -0.1f, 0.4f).finished());
  Tape tape;
  tape.watch(logits);
  Tensor loss = cross_entropy_loss(logits, {1}, 0.3f, &tape);
  tape.backward(loss);
  Eigen::RowVector3f p;
  float z = std::exp(0.2f) + std::exp(-0.1f) + std::exp(0.4f);
  p << std::exp(0.2f) / z, std::exp(-0.1f) / z, std::exp(0.4f) / z;
  Eigen::RowVector3f q;
  q << 0.15f, 0.7f, 0.15f;  // off-target mass s/(V-1) = 0.15
  for (int j = 0; j < 3; ++j)
    CHECK(logits.grad[j] == doctest::Approx(p[j] - q[j]).epsilon(1e-5));
}

TEST_CASE("cross entropy validates its inputs") {
  Tensor logits = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(cross_entropy_loss(logits, {}, 0.0f), ValueError);
  CHECK_THROWS_AS(cross_entropy_loss(logits, {0, 4}, 0.0f), IndexError);
  CHECK_THROWS_AS(cross_entropy_loss(logits, {0, 1}, 1.0f), ValueError);
  CHECK_THROWS_AS(cross_entropy_loss(logits, {0}, 0.0f), ShapeError);
}

TEST_CASE("one effective batch equals the same data split into micro-batches") {
  Vocabulary vocab;
  BatchSet one, two;
  copy_data(8, vocab, one, two);
  REQUIRE(one.batches.size() == 1);
  REQUIRE(two.batches.size() == 2);

  TransformerModel a(micro_config(vocab.size()));
  Rng rng(3);
  a.init_params(rng);
  TransformerModel b = a;
  AdamOptimizer oa(a), ob(b);

  TrainStats sa = effective_batch_update(a, {&one.batches[0]}, oa, 0.01f, 0.1f);
  TrainStats sb = effective_batch_update(
      b, {&two.batches[0], &two.batches[1]}, ob, 0.01f, 0.1f);
  CHECK(sa.tokens == sb.tokens);
  CHECK(sa.loss == doctest::Approx(sb.loss).epsilon(1e-6));
  CHECK(params_equal(a, b, 1e-6f));
}

TEST_CASE("scaled_lr grows with the square root of the batch multiple") {
  CHECK(scaled_lr(0.001f, 1) == doctest::Approx(0.001f));
  CHECK(scaled_lr(0.001f, 4) == doctest::Approx(0.002f));
  CHECK(scaled_lr(0.001f, 16) == doctest::Approx(0.004f));
  CHECK_THROWS_AS(scaled_lr(0.001f, 0), UsageError);
}

TEST_CASE("inverse-square-root schedule warms up linearly then decays") {
  CHECK(inv_sqrt_lr(1, 100, 1.0f) == doctest::Approx(0.01f));
  CHECK(inv_sqrt_lr(50, 100, 1.0f) == doctest::Approx(0.5f));
  CHECK(inv_sqrt_lr(100, 100, 1.0f) == doctest::Approx(1.0f));  // continuous
  CHECK(inv_sqrt_lr(400, 100, 1.0f) == doctest::Approx(0.5f));
  CHECK(inv_sqrt_lr(99, 100, 1.0f) < inv_sqrt_lr(100, 100, 1.0f));
  CHECK(inv_sqrt_lr(101, 100, 1.0f) < inv_sqrt_lr(100, 100, 1.0f));
}

TEST_CASE("plateau schedule reduces at patience multiples and stops at the cap") {
  PlateauReduceState state;
  state.config = {8, 60, 0.9f};
  float lr = 0.00113f;

  CHECK(plateau_step(state, 1, 10.0f, lr).kind == PlateauAction::kContinue);
  CHECK(plateau_step(state, 2, 9.0f, lr).kind == PlateauAction::kContinue);
  // equal perplexity is not an improvement
  for (int i = 0; i < 7; ++i)
    CHECK(plateau_step(state, 3 + i, 9.0f, lr).kind ==
          PlateauAction::kContinue);
  PlateauAction red = plateau_step(state, 10, 9.5f, lr);
  CHECK(red.kind == PlateauAction::kReduceAndRewind);
  CHECK(red.rewind_to == 2);
  CHECK(red.new_lr == doctest::Approx(0.001017f).epsilon(1e-6));

  // the counter keeps running across rewinds: reductions at 16, 24, ... and
  // a hard stop when 60 non-improving checkpoints accumulate
  lr = red.new_lr;
  int reduces = 0, index = 11;
  PlateauAction last;
  do {
    last = plateau_step(state, index++, 9.5f, lr);
    if (last.kind == PlateauAction::kReduceAndRewind) {
      ++reduces;
      lr = last.new_lr;
    }
  } while (last.kind != PlateauAction::kStop);
  CHECK(reduces == 6);  // at 16, 24, 32, 40, 48, 56 non-improvements
  CHECK(state.since_improvement == 60);

  // an improvement resets the counter and the best checkpoint
  PlateauReduceState s2;
  s2.config = {2, 5, 0.5f};
  plateau_step(s2, 1, 5.0f, lr);
  plateau_step(s2, 2, 6.0f, lr);
  CHECK(plateau_step(s2, 3, 4.0f, lr).kind == PlateauAction::kContinue);
  CHECK(s2.best_checkpoint == 3);
  CHECK(s2.since_improvement == 0);

  PlateauConfig bad{8, 8, 0.9f};
  CHECK_THROWS_AS(bad.validate(), UsageError);
  PlateauConfig bad2{2, 5, 1.0f};
  CHECK_THROWS_AS(bad2.validate(), UsageError);
}

TEST_CASE("checkpoint averaging keeps the k best and averages elementwise") {
  auto make = [](int index, float ppl, float value) {
    CheckpointRecord r;
    r.index = index;
    r.dev_ppl = ppl;
    r.params["w"] = Eigen::VectorXf::Constant(3, value);
    return r;
  };
  // equal inputs average to themselves
  auto same = average_checkpoints({make(1, 2.0f, 5.0f), make(2, 3.0f, 5.0f)}, 8);
  CHECK(same.at("w")[0] == 5.0f);
  // p and -p cancel exactly
  auto zero = average_checkpoints({make(1, 2.0f, 1.5f), make(2, 3.0f, -1.5f)}, 2);
  CHECK(zero.at("w")[0] == 0.0f);
  // only the k lowest-perplexity records contribute
  std::vector<CheckpointRecord> records;
  for (int i = 1; i <= 10; ++i)
    records.push_back(make(i, static_cast<float>(i), static_cast<float>(i)));
  auto best8 = average_checkpoints(records, 8);
  CHECK(best8.at("w")[0] == doctest::Approx(4.5f));  // mean of 1..8
  auto best1 = average_checkpoints(records, 1);
  CHECK(best1.at("w")[0] == 1.0f);
  CHECK_THROWS_AS(average_checkpoints({}, 8), UsageError);
}

TEST_CASE("checkpoints round-trip and support bit-exact rewind") {
  Vocabulary vocab;
  BatchSet one, two;
  copy_data(6, vocab, one, two);
  TransformerModel m(micro_config(vocab.size()));
  Rng rng(13);
  m.init_params(rng);
  AdamOptimizer opt(m);
  for (int i = 0; i < 3; ++i)
    effective_batch_update(m, {&one.batches[0]}, opt, 0.01f, 0.1f);

  CheckpointRecord rec;
  rec.index = 3;
  rec.dev_ppl = 7.5f;
  rec.lr = 0.01f;
  for (const auto& [name, t] : m.params()) rec.params[name] = t.data;
  rec.optimizer = opt.snapshot();
  std::string path = tmp_path("minimt_ckpt.bin");
  save_checkpoint(rec, m.config(), path);

  // run A continues directly with the two-batch step
  TransformerModel a = m;
  AdamOptimizer oa(a);
  oa.restore(rec.optimizer);
  effective_batch_update(a, {&two.batches[0]}, oa, 0.01f, 0.1f);

  // run B wanders off for two extra steps, then rewinds from the file
  for (int i = 0; i < 2; ++i)
    effective_batch_update(m, {&one.batches[0]}, opt, 0.02f, 0.1f);
  ModelConfig loaded_config;
  CheckpointRecord loaded = load_checkpoint(path, &loaded_config);
  CHECK(loaded.index == 3);
  CHECK(loaded.dev_ppl == 7.5f);
  CHECK(loaded.optimizer.step == rec.optimizer.step);
  CHECK(loaded_config.to_json() == m.config().to_json());
  for (auto& [name, t] : m.mutable_params()) t.data = loaded.params.at(name);
  opt.restore(loaded.optimizer);
  effective_batch_update(m, {&two.batches[0]}, opt, 0.01f, 0.1f);

  CHECK(params_equal(a, m, 0.0f));  // trajectories reconverge bit-exactly
  std::remove(path.c_str());
}

TEST_CASE("train_loop follows a scripted plateau trace") {
  Vocabulary vocab;
  BatchSet one, two;
  copy_data(6, vocab, one, two);
  TransformerModel m(micro_config(vocab.size()));
  Rng rng(17);
  m.init_params(rng);

  TrainConfig cfg;
  cfg.scheduler = Scheduler::kPlateauReduce;
  cfg.effective_batch_tokens = 24;
  cfg.base_lr = 0.01f;
  cfg.warmup = 1;
  cfg.checkpoint_interval = 1;
  cfg.plateau = {2, 5, 0.9f};
  cfg.average_best = 2;
  cfg.max_steps = 50;
  cfg.dropout_active = false;

  std::vector<double> script{5, 4, 6, 6, 6, 6, 6};
  std::size_t call = 0;
  auto evaluator = [&](const TransformerModel&) {
    return script[std::min(call++, script.size() - 1)];
  };
  TrainResult result = train_loop(m, one, one, cfg, evaluator);

  std::vector<std::string> actions;
  for (const auto& row : result.log) actions.push_back(row.action);
  std::vector<std::string> want{"continue",          "continue", "continue",
                                "reduce_and_rewind", "continue",
                                "reduce_and_rewind", "stop"};
  CHECK(actions == want);
  CHECK(result.steps == 7);
  CHECK(result.best_ppl == 4.0f);
  CHECK(result.log[4].lr == doctest::Approx(0.009f));   // after one reduction
  CHECK(result.log[6].lr == doctest::Approx(0.0081f));  // after two
}

TEST_CASE("train_loop with the inverse-sqrt schedule never rewinds") {
  Vocabulary vocab;
  BatchSet one, two;
  copy_data(6, vocab, one, two);
  TransformerModel m(micro_config(vocab.size()));
  Rng rng(19);
  m.init_params(rng);

  TrainConfig cfg;
  cfg.scheduler = Scheduler::kInvSqrt;
  cfg.effective_batch_tokens = 24;
  cfg.base_lr = 0.02f;
  cfg.warmup = 4;
  cfg.checkpoint_interval = 2;
  cfg.average_best = 2;
  cfg.max_steps = 6;
  cfg.dropout_active = false;
  cfg.out_dir = tmp_path("minimt_run");

  TrainResult result = train_loop(m, one, one, cfg);
  REQUIRE(result.log.size() == 3);
  for (const auto& row : result.log) CHECK(row.action == "continue");
  CHECK(result.log[0].lr == doctest::Approx(inv_sqrt_lr(2, 4, 0.02f)));
  CHECK(result.log[2].lr == doctest::Approx(inv_sqrt_lr(6, 4, 0.02f)));
  CHECK(std::filesystem::exists(cfg.out_dir + "/model.bin"));
  CHECK(std::filesystem::exists(cfg.out_dir + "/train.log"));
  auto log_lines = read_lines(cfg.out_dir + "/train.log");
  REQUIRE(log_lines.size() == 4);
  CHECK(log_lines[0] == "step\tlr\ttrain_loss\tdev_ppl\taction");
  std::filesystem::remove_all(cfg.out_dir);
}
