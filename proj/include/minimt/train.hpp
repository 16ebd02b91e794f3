#pragma once

#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "minimt/data.hpp"
#include "minimt/model.hpp"

namespace minimt {

// Mean token-level smoothed NLL; the smoothed target puts 1-s on the label
// and s/(V-1) on every other class.
Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& targets,
                          float label_smoothing, Tape* tape = nullptr);
// Sum variant used for token-count-normalized gradient accumulation.
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         float label_smoothing, Tape* tape = nullptr);

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.98f;
  float eps = 1e-9f;
};

struct OptimizerSnapshot {
  std::map<std::string, Eigen::VectorXf> m, v;
  long step = 0;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(const TransformerModel& model, AdamConfig cfg = {});

  void step(TransformerModel& model,
            const std::map<std::string, Eigen::VectorXf>& grads, float lr);

  long step_count() const { return step_; }
  OptimizerSnapshot snapshot() const;
  void restore(const OptimizerSnapshot& snap);
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::map<std::string, Eigen::VectorXf> m_, v_;
  long step_ = 0;
};

struct TrainStats {
  double loss = 0.0;  // mean smoothed NLL per token over the effective batch
  long tokens = 0;
};

// Gradients summed over all micro-batches, normalized by the total non-pad
// token count, then exactly one optimizer step.
TrainStats effective_batch_update(TransformerModel& model,
                                  const std::vector<const Batch*>& micro_batches,
                                  AdamOptimizer& optimizer, float lr,
                                  float label_smoothing, Rng* dropout_rng = nullptr);

float scaled_lr(float base_lr, int n);
// base_lr * min(step/warmup, sqrt(warmup/step)): linear warmup, then 1/sqrt
// decay, continuous at step == warmup.
float inv_sqrt_lr(long step, long warmup, float base_lr);

struct PlateauConfig {
  int reduce_patience = 8;   // P
  int stop_patience = 60;    // S
  float reduce_rate = 0.9f;  // r

  void validate() const;
};

struct PlateauReduceState {
  PlateauConfig config;
  float best_ppl = std::numeric_limits<float>::infinity();
  int best_checkpoint = -1;
  int since_improvement = 0;
};

struct PlateauAction {
  enum Kind { kContinue, kReduceAndRewind, kStop };
  Kind kind = kContinue;
  int rewind_to = -1;
  float new_lr = 0.0f;

  std::string name() const;
};

// Strictly lower perplexity counts as improvement; the counter is not reset
// by a rewind, so a persistent plateau always reaches the stop patience.
PlateauAction plateau_step(PlateauReduceState& state, int checkpoint_index,
                           float dev_ppl, float current_lr);

struct CheckpointRecord {
  int index = 0;
  std::map<std::string, Eigen::VectorXf> params;
  OptimizerSnapshot optimizer;
  float dev_ppl = 0.0f;
  float lr = 0.0f;
};

// Mean of the min(k, available) records with the lowest perplexity (ties by
// lower checkpoint index).
std::map<std::string, Eigen::VectorXf> average_checkpoints(
    const std::vector<CheckpointRecord>& records, int k);

void save_checkpoint(const CheckpointRecord& rec, const ModelConfig& config,
                     const std::string& path);
CheckpointRecord load_checkpoint(const std::string& path, ModelConfig* config_out = nullptr);

enum class Scheduler { kInvSqrt, kPlateauReduce };
Scheduler scheduler_from_string(const std::string& s);

struct TrainConfig {
  Scheduler scheduler = Scheduler::kPlateauReduce;
  long effective_batch_tokens = 2048;
  long micro_batch_tokens = 512;
  float base_lr = 0.001f;
  long warmup = 200;
  int checkpoint_interval = 50;
  PlateauConfig plateau;
  int average_best = 8;
  long max_steps = 100000;
  float label_smoothing = 0.1f;
  bool dropout_active = true;
  std::uint64_t seed = 1;
  double stop_at_dev_ppl = 0.0;  // 0 disables this early stop
  std::string out_dir;           // checkpoints + log; empty keeps all in memory
};

struct TrainLogRow {
  long step;
  float lr;
  double train_loss;
  double dev_ppl;
  std::string action;
};

struct TrainResult {
  TransformerModel final_model;  // averaged best checkpoints
  std::vector<TrainLogRow> log;
  float best_ppl = std::numeric_limits<float>::infinity();
  long steps = 0;
};

using DevEvaluator = std::function<double(const TransformerModel&)>;

// Runs effective-batch updates; every checkpoint_interval steps evaluates dev
// perplexity, snapshots a checkpoint (written to disk before the scheduler
// decision is acted on), and consults the scheduler. The final model averages
// the best `average_best` checkpoints.
TrainResult train_loop(TransformerModel& model, const BatchSet& train,
                       const BatchSet& dev, const TrainConfig& config,
                       DevEvaluator evaluator = nullptr);

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log);

}  // namespace minimt
