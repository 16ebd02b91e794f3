#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "minimt/quant.hpp"
#include "minimt/tensor.hpp"

namespace minimt {

constexpr float kLayerNormEps = 1e-5f;

constexpr int kPadId = 0;
constexpr int kUnkId = 1;
constexpr int kBosId = 2;
constexpr int kEosId = 3;

enum class FactorCombine { kConcat, kSum, kAverage };

std::string to_string(FactorCombine c);
FactorCombine factor_combine_from_string(const std::string& s);

struct SourceFactorConfig {
  int factor_vocab_size = 0;
  int embed_dim = 0;
  FactorCombine combine = FactorCombine::kSum;
  bool share_with_word_embedding = false;
};

struct ModelConfig {
  int num_encoder_layers = 6;
  int num_decoder_layers = 6;
  int d_model = 32;
  int d_ff = 128;
  int num_heads = 4;
  int src_vocab_size = 0;
  int tgt_vocab_size = 0;
  std::vector<SourceFactorConfig> factor_configs;
  float dropout = 0.1f;
  int max_seq_len = 128;

  // d_model minus the concatenated factor widths; equals d_model for
  // sum/average/no factors.
  int word_embed_dim() const;

  // Throws UsageError when the dimension constraints do not hold. Layer
  // counts of 0 are tolerated (test relaxation); the CLI enforces >= 1.
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& json);

  // Defaults follow the common base-transformer preset (512/2048/8 heads, 6:6).
  static ModelConfig paper_base(int src_vocab, int tgt_vocab);
  // Desk-scale default used by tests and the CLI.
  static ModelConfig desk_default(int src_vocab, int tgt_vocab);
};

/// Parameter set with stable unique names; shapes are fully determined by
/// the config. The target embedding doubles as the output projection.
class TransformerModel {
 public:
  TransformerModel() = default;
  explicit TransformerModel(ModelConfig config);

  void init_params(Rng& rng);

  const ModelConfig& config() const { return config_; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, Tensor>& mutable_params() { return params_; }

  void watch_all(Tape& tape);
  std::size_t param_count() const;

  const RowMatrixXf& pos_enc() const { return pos_enc_; }

  // Deterministic name/shape layout; also drives file order.
  static std::vector<std::pair<std::string, std::vector<Index>>> param_shapes(
      const ModelConfig& config);

 private:
  ModelConfig config_;
  std::map<std::string, Tensor> params_;
  RowMatrixXf pos_enc_;
};

// ---- training-path forward (tape-based, per sentence) ---------------------

Tensor embed_source(const TransformerModel& m, const std::vector<int>& word_ids,
                    const std::vector<std::vector<int>>& factor_ids,
                    Tape* tape = nullptr, Rng* rng = nullptr,
                    bool training = false);

Tensor encode(const TransformerModel& m, const Tensor& src_embedded,
              Tape* tape = nullptr, Rng* rng = nullptr, bool training = false);

// Causal-masked decoder over the full target (BOS-shifted internally);
// returns logits [len(tgt) x tgt_vocab].
Tensor forward_teacher_forced(const TransformerModel& m,
                              const std::vector<int>& src_ids,
                              const std::vector<std::vector<int>>& factor_ids,
                              const std::vector<int>& tgt_ids,
                              Tape* tape = nullptr, Rng* rng = nullptr,
                              bool training = false);

// ---- inference execution (f32 or int8 behind one interface) ---------------

class Executor {
 public:
  virtual ~Executor() = default;
  virtual const ModelConfig& config() const = 0;
  // x[r x k] times the named [k x n] weight.
  virtual Tensor linear(const Tensor& x, const std::string& name) const = 0;
  // x times tgt_embed rows transposed; `rows` slices/reorders the output
  // vocabulary (shortlist).
  virtual Tensor project_logits(const Tensor& x,
                                const std::vector<int>* rows) const = 0;
  virtual Tensor embed_rows(const std::string& table,
                            const std::vector<int>& ids) const = 0;
  virtual const Tensor& f32_param(const std::string& name) const = 0;
  virtual const RowMatrixXf& pos_enc() const = 0;

  int workers = 1;
};

class F32Executor final : public Executor {
 public:
  explicit F32Executor(const TransformerModel& m) : model_(&m) {}
  const ModelConfig& config() const override { return model_->config(); }
  Tensor linear(const Tensor& x, const std::string& name) const override;
  Tensor project_logits(const Tensor& x,
                        const std::vector<int>* rows) const override;
  Tensor embed_rows(const std::string& table,
                    const std::vector<int>& ids) const override;
  const Tensor& f32_param(const std::string& name) const override;
  const RowMatrixXf& pos_enc() const override { return model_->pos_enc(); }

 private:
  const TransformerModel* model_;
};

/// Weight matrices int8, everything else f32 (norms, biases, source and
/// factor embeddings). The tied target table is stored int8; its lookup
/// dequantizes rows.
struct QuantizedModel {
  ModelConfig config;
  std::map<std::string, Tensor> f32_params;
  std::map<std::string, QuantizedTensor> q_params;
  RowMatrixXf pos_enc;
};

class Int8Executor final : public Executor {
 public:
  explicit Int8Executor(const QuantizedModel& m) : model_(&m) {}
  const ModelConfig& config() const override { return model_->config; }
  Tensor linear(const Tensor& x, const std::string& name) const override;
  Tensor project_logits(const Tensor& x,
                        const std::vector<int>* rows) const override;
  Tensor embed_rows(const std::string& table,
                    const std::vector<int>& ids) const override;
  const Tensor& f32_param(const std::string& name) const override;
  const RowMatrixXf& pos_enc() const override { return model_->pos_enc; }

 private:
  const QuantizedModel* model_;
};

Tensor embed_source_infer(const Executor& ex, const std::vector<int>& word_ids,
                          const std::vector<std::vector<int>>& factor_ids);
Tensor encode_infer(const Executor& ex, const Tensor& src_embedded);

/// Per-sentence decoding state: appended self-attention K/V per layer plus
/// fixed cross-attention K/V computed from the encoder output. Confined to
/// one worker.
struct DecoderState {
  const Executor* exec = nullptr;
  std::vector<RowMatrixXf> self_k, self_v;    // per layer, one row per step
  std::vector<RowMatrixXf> cross_k, cross_v;  // per layer, fixed
  int pos = 0;
};

DecoderState init_decoder(const Executor& ex, const Tensor& enc_out);

// Feeds one token, returns next-position logits (over the shortlist when
// given) and advances the cached state.
Tensor decode_step(DecoderState& state, int prev_token,
                   const std::vector<int>* shortlist_rows = nullptr);

// ---- persistence -----------------------------------------------------------

void save_params(const TransformerModel& m, const std::string& path);
TransformerModel load_params(const std::string& path,
                             const ModelConfig* expect = nullptr);

bool is_quantized_param(const std::string& name);

// In-memory quantization (the on-load path quantizes an f32 file's tensors
// with the same formula, so both routes are bit-identical).
QuantizedModel quantize_model(const TransformerModel& m);
void save_quantized(const QuantizedModel& m, const std::string& path);
QuantizedModel load_quantized(const std::string& path);
QuantizedModel load_model_quantized_on_load(const std::string& f32_path);

}  // namespace minimt
