#include "minimt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "minimt/eval.hpp"
#include "minimt/io.hpp"

namespace minimt {

namespace {

Tensor cross_entropy_impl(const Tensor& logits, const std::vector<int>& targets,
                          float smoothing, bool mean, Tape* tape) {
  if (targets.empty())
    throw ValueError("cross_entropy: no target tokens (all-padding batch?)");
  if (logits.rows() != static_cast<Index>(targets.size()))
    throw ShapeError("cross_entropy: logits rows vs target length");
  if (smoothing < 0.0f || smoothing >= 1.0f)
    throw ValueError("cross_entropy: need 0 <= smoothing < 1");
  Index t_count = logits.rows(), v = logits.cols();
  for (int tgt : targets)
    if (tgt < 0 || tgt >= v) throw IndexError("cross_entropy: target id out of vocab");

  // forward: loss = -sum_t sum_j q[t][j] * logsoftmax(logits)[t][j]
  RowMatrixXf probs(t_count, v);
  double total = 0.0;
  auto lm = logits.mat();
  float off = v > 1 ? smoothing / static_cast<float>(v - 1) : 0.0f;
  float on = 1.0f - smoothing;
  for (Index t = 0; t < t_count; ++t) {
    float mx = lm.row(t).maxCoeff();
    Eigen::RowVectorXf ex = (lm.row(t).array() - mx).exp();
    float z = ex.sum();
    probs.row(t) = ex / z;
    double logz = std::log(static_cast<double>(z)) + mx;
    // sum_j q[j]*logits[j] = on*logit[tgt] + off*(rowsum - logit[tgt])
    double row_sum = lm.row(t).sum();
    double qlogit = on * lm(t, targets[t]) + off * (row_sum - lm(t, targets[t]));
    total += logz - qlogit;
  }
  float denom = mean ? static_cast<float>(t_count) : 1.0f;
  Tensor out = Tensor::scalar(static_cast<float>(total) / denom);
  if (tape && tape->tracks(logits)) {
    int idl = logits.node_id;
    out.node_id = tape->add_node(1);
    out.tape_uid = tape->uid();
    int ido = out.node_id;
    std::vector<int> tv = targets;
    tape->record([=](Tape& tp) {
      float go = tp.grad(ido)[0] / denom;
      Eigen::Map<RowMatrixXf> gl(tp.grad(idl).data(), t_count, v);
      for (Index t = 0; t < t_count; ++t) {
        gl.row(t).array() += go * (probs.row(t).array() - off);
        gl(t, tv[t]) -= go * (on - off);
      }
    });
  }
  return out;
}

}  // namespace

Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& targets,
                          float label_smoothing, Tape* tape) {
  return cross_entropy_impl(logits, targets, label_smoothing, true, tape);
}

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         float label_smoothing, Tape* tape) {
  return cross_entropy_impl(logits, targets, label_smoothing, false, tape);
}

AdamOptimizer::AdamOptimizer(const TransformerModel& model, AdamConfig cfg)
    : cfg_(cfg) {
  for (const auto& [name, t] : model.params()) {
    m_[name] = Eigen::VectorXf::Zero(t.numel());
    v_[name] = Eigen::VectorXf::Zero(t.numel());
  }
}

void AdamOptimizer::step(TransformerModel& model,
                         const std::map<std::string, Eigen::VectorXf>& grads,
                         float lr) {
  ++step_;
  float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(step_));
  float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(step_));
  for (auto& [name, t] : model.mutable_params()) {
    auto git = grads.find(name);
    if (git == grads.end()) throw StateError("missing gradient for " + name);
    const Eigen::VectorXf& g = git->second;
    Eigen::VectorXf& m = m_[name];
    Eigen::VectorXf& v = v_[name];
    m = cfg_.beta1 * m + (1.0f - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0f - cfg_.beta2) * g.cwiseProduct(g);
    t.data.array() -= lr * (m.array() / bc1) /
                      ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

OptimizerSnapshot AdamOptimizer::snapshot() const {
  return OptimizerSnapshot{m_, v_, step_};
}

void AdamOptimizer::restore(const OptimizerSnapshot& snap) {
  m_ = snap.m;
  v_ = snap.v;
  step_ = snap.step;
}

TrainStats effective_batch_update(TransformerModel& model,
                                  const std::vector<const Batch*>& micro_batches,
                                  AdamOptimizer& optimizer, float lr,
                                  float label_smoothing, Rng* dropout_rng) {
  if (micro_batches.empty())
    throw UsageError("effective_batch_update: no micro-batches");
  std::map<std::string, Eigen::VectorXf> accum;
  for (const auto& [name, t] : model.params())
    accum[name] = Eigen::VectorXf::Zero(t.numel());
  TrainStats stats;
  bool training_dropout = dropout_rng != nullptr;
  for (const Batch* batch : micro_batches) {
    Tape tape;
    model.watch_all(tape);
    Tensor total;
    for (std::size_t i = 0; i < batch->size(); ++i) {
      BatchSentence s = batch->sentence(i);
      Tensor logits =
          forward_teacher_forced(model, s.src_ids, s.factor_ids, s.tgt_ids,
                                 &tape, dropout_rng, training_dropout);
      Tensor l = cross_entropy_sum(logits, s.tgt_ids, label_smoothing, &tape);
      total = i == 0 ? l : add(total, l, &tape);
      stats.tokens += static_cast<long>(s.tgt_ids.size());
    }
    if (batch->size() == 0) continue;
    stats.loss += total.item();
    tape.backward(total);
    for (const auto& [name, t] : model.params()) accum[name] += t.grad;
  }
  if (stats.tokens == 0)
    throw ValueError("effective_batch_update: zero non-pad tokens");
  float inv = 1.0f / static_cast<float>(stats.tokens);
  for (auto& [name, g] : accum) g *= inv;
  optimizer.step(model, accum, lr);
  stats.loss /= stats.tokens;
  return stats;
}

float scaled_lr(float base_lr, int n) {
  if (n < 1) throw UsageError("scaled_lr: N must be >= 1");
  return base_lr * std::sqrt(static_cast<float>(n));
}

float inv_sqrt_lr(long step, long warmup, float base_lr) {
  if (step < 1) step = 1;
  if (warmup < 1) warmup = 1;
  float a = static_cast<float>(step) / static_cast<float>(warmup);
  float b = std::sqrt(static_cast<float>(warmup) / static_cast<float>(step));
  return base_lr * std::min(a, b);
}

void PlateauConfig::validate() const {
  if (!(reduce_rate > 0.0f && reduce_rate < 1.0f))
    throw UsageError("plateau: reduce rate must be in (0,1)");
  if (reduce_patience < 1 || stop_patience < 1 ||
      reduce_patience >= stop_patience)
    throw UsageError("plateau: need 0 < reduce patience < stop patience");
}

std::string PlateauAction::name() const {
  switch (kind) {
    case kContinue: return "continue";
    case kReduceAndRewind: return "reduce_and_rewind";
    case kStop: return "stop";
  }
  return "continue";
}

PlateauAction plateau_step(PlateauReduceState& state, int checkpoint_index,
                           float dev_ppl, float current_lr) {
  state.config.validate();
  PlateauAction action;
  if (dev_ppl < state.best_ppl) {
    state.best_ppl = dev_ppl;
    state.best_checkpoint = checkpoint_index;
    state.since_improvement = 0;
    return action;
  }
  ++state.since_improvement;
  if (state.since_improvement >= state.config.stop_patience) {
    action.kind = PlateauAction::kStop;
    return action;
  }
  if (state.since_improvement % state.config.reduce_patience == 0) {
    action.kind = PlateauAction::kReduceAndRewind;
    action.rewind_to = state.best_checkpoint;
    action.new_lr = current_lr * state.config.reduce_rate;
  }
  return action;
}

std::map<std::string, Eigen::VectorXf> average_checkpoints(
    const std::vector<CheckpointRecord>& records, int k) {
  if (records.empty()) throw UsageError("average_checkpoints: no records");
  if (k < 1) throw UsageError("average_checkpoints: k must be >= 1");
  std::vector<const CheckpointRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const CheckpointRecord* a, const CheckpointRecord* b) {
              if (a->dev_ppl != b->dev_ppl) return a->dev_ppl < b->dev_ppl;
              return a->index < b->index;
            });
  std::size_t take = std::min<std::size_t>(k, sorted.size());
  std::map<std::string, Eigen::VectorXf> out;
  for (std::size_t i = 0; i < take; ++i)
    for (const auto& [name, p] : sorted[i]->params) {
      auto it = out.find(name);
      if (it == out.end())
        out[name] = p;
      else
        it->second += p;
    }
  for (auto& [name, p] : out) p /= static_cast<float>(take);
  return out;
}

void save_checkpoint(const CheckpointRecord& rec, const ModelConfig& config,
                     const std::string& path) {
  ParamFile file;
  nlohmann::json j = nlohmann::json::parse(config.to_json());
  j["checkpoint"] = {{"index", rec.index},
                     {"dev_ppl", rec.dev_ppl},
                     {"lr", rec.lr},
                     {"optimizer_step", rec.optimizer.step}};
  file.config_json = j.dump();
  auto push = [&](const std::string& name, const Eigen::VectorXf& v) {
    ParamRecord p;
    p.name = name;
    p.dtype = 0;
    p.dims = {static_cast<std::uint32_t>(v.size())};
    p.payload.resize(v.size() * 4);
    std::memcpy(p.payload.data(), v.data(), p.payload.size());
    file.params.push_back(std::move(p));
  };
  for (const auto& [name, v] : rec.params) push(name, v);
  for (const auto& [name, v] : rec.optimizer.m) push("adam.m." + name, v);
  for (const auto& [name, v] : rec.optimizer.v) push("adam.v." + name, v);
  write_param_file(path, file);
}

CheckpointRecord load_checkpoint(const std::string& path,
                                 ModelConfig* config_out) {
  ParamFile file = read_param_file(path);
  nlohmann::json j = nlohmann::json::parse(file.config_json);
  CheckpointRecord rec;
  rec.index = j["checkpoint"].value("index", 0);
  rec.dev_ppl = j["checkpoint"].value("dev_ppl", 0.0f);
  rec.lr = j["checkpoint"].value("lr", 0.0f);
  rec.optimizer.step = j["checkpoint"].value("optimizer_step", 0L);
  if (config_out) *config_out = ModelConfig::from_json(file.config_json);
  for (const auto& p : file.params) {
    Eigen::VectorXf v(p.numel());
    std::memcpy(v.data(), p.payload.data(), p.payload.size());
    if (p.name.starts_with("adam.m."))
      rec.optimizer.m[p.name.substr(7)] = std::move(v);
    else if (p.name.starts_with("adam.v."))
      rec.optimizer.v[p.name.substr(7)] = std::move(v);
    else
      rec.params[p.name] = std::move(v);
  }
  return rec;
}

Scheduler scheduler_from_string(const std::string& s) {
  if (s == "inv-sqrt" || s == "inv_sqrt") return Scheduler::kInvSqrt;
  if (s == "plateau-reduce" || s == "plateau_reduce")
    return Scheduler::kPlateauReduce;
  throw UsageError("unknown scheduler: " + s);
}

namespace {

std::map<std::string, Eigen::VectorXf> snapshot_params(
    const TransformerModel& m) {
  std::map<std::string, Eigen::VectorXf> out;
  for (const auto& [name, t] : m.params()) out[name] = t.data;
  return out;
}

void restore_params(TransformerModel& m,
                    const std::map<std::string, Eigen::VectorXf>& snap) {
  for (auto& [name, t] : m.mutable_params()) t.data = snap.at(name);
}

void prune_checkpoints(std::vector<CheckpointRecord>& records, int keep,
                       const std::string& out_dir) {
  if (static_cast<int>(records.size()) <= keep) return;
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (records[a].dev_ppl != records[b].dev_ppl)
      return records[a].dev_ppl < records[b].dev_ppl;
    return records[a].index < records[b].index;
  });
  std::set<std::size_t> keep_set(order.begin(), order.begin() + keep);
  std::vector<CheckpointRecord> kept;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (keep_set.count(i)) {
      kept.push_back(std::move(records[i]));
    } else if (!out_dir.empty()) {
      std::error_code ec;
      std::filesystem::remove(out_dir + "/checkpoint_" +
                                  std::to_string(records[i].index) + ".bin",
                              ec);
    }
  }
  std::sort(kept.begin(), kept.end(),
            [](const CheckpointRecord& a, const CheckpointRecord& b) {
              return a.index < b.index;
            });
  records = std::move(kept);
}

}  // namespace

TrainResult train_loop(TransformerModel& model, const BatchSet& train,
                       const BatchSet& dev, const TrainConfig& config,
                       DevEvaluator evaluator) {
  if (train.batches.empty()) throw UsageError("train_loop: empty training set");
  if (!evaluator)
    evaluator = [&dev](const TransformerModel& m) { return perplexity(m, dev); };

  AdamOptimizer optimizer(model);
  Rng dropout_rng(config.seed);
  PlateauReduceState plateau{config.plateau};
  float current_lr = config.base_lr;  // plateau schedule's post-warmup level
  std::vector<CheckpointRecord> records;
  TrainResult result;
  if (!config.out_dir.empty())
    std::filesystem::create_directories(config.out_dir);

  std::size_t next_batch = 0;
  int ckpt_index = 0;
  bool stop = false;
  for (long step = 1; step <= config.max_steps && !stop; ++step) {
    // assemble one effective batch from consecutive micro-batches
    std::vector<const Batch*> micro;
    long tokens = 0;
    do {
      const Batch* b = &train.batches[next_batch];
      next_batch = (next_batch + 1) % train.batches.size();
      micro.push_back(b);
      tokens += b->tgt_tokens;
    } while (tokens < config.effective_batch_tokens &&
             micro.size() < train.batches.size());

    float lr;
    if (config.scheduler == Scheduler::kInvSqrt) {
      lr = inv_sqrt_lr(step, config.warmup, config.base_lr);
    } else {
      lr = step < config.warmup
               ? current_lr * static_cast<float>(step) / config.warmup
               : current_lr;
    }
    TrainStats stats = effective_batch_update(
        model, micro, optimizer, lr, config.label_smoothing,
        config.dropout_active ? &dropout_rng : nullptr);

    if (step % config.checkpoint_interval != 0 && step != config.max_steps)
      continue;

    double ppl = evaluator(model);
    CheckpointRecord rec;
    rec.index = ++ckpt_index;
    rec.params = snapshot_params(model);
    rec.optimizer = optimizer.snapshot();
    rec.dev_ppl = static_cast<float>(ppl);
    rec.lr = lr;
    if (!config.out_dir.empty())
      save_checkpoint(rec, model.config(),
                      config.out_dir + "/checkpoint_" +
                          std::to_string(rec.index) + ".bin");
    records.push_back(rec);

    std::string action_name = "continue";
    if (config.scheduler == Scheduler::kPlateauReduce) {
      PlateauAction action = plateau_step(plateau, rec.index,
                                          rec.dev_ppl, current_lr);
      action_name = action.name();
      if (action.kind == PlateauAction::kReduceAndRewind) {
        current_lr = action.new_lr;
        for (const auto& r : records)
          if (r.index == action.rewind_to) {
            restore_params(model, r.params);
            optimizer.restore(r.optimizer);
            break;
          }
      } else if (action.kind == PlateauAction::kStop) {
        stop = true;
      }
    }
    result.best_ppl = std::min(result.best_ppl, rec.dev_ppl);
    result.log.push_back({step, lr, stats.loss, ppl, action_name});
    result.steps = step;
    if (config.stop_at_dev_ppl > 0.0 && ppl < config.stop_at_dev_ppl)
      stop = true;
    prune_checkpoints(records, std::max(config.average_best, 8), config.out_dir);
  }

  auto averaged = average_checkpoints(records, config.average_best);
  result.final_model = model;  // copies config and shapes
  restore_params(result.final_model, averaged);
  if (!config.out_dir.empty()) {
    save_params(result.final_model, config.out_dir + "/model.bin");
    write_train_log(config.out_dir + "/train.log", result.log);
  }
  return result;
}

void write_train_log(const std::string& path,
                     const std::vector<TrainLogRow>& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write training log: " + path);
  f << "step\tlr\ttrain_loss\tdev_ppl\taction\n";
  for (const auto& row : log)
    f << row.step << '\t' << row.lr << '\t' << row.train_loss << '\t'
      << row.dev_ppl << '\t' << row.action << '\n';
}

}  // namespace minimt
