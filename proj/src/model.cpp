#include "minimt/model.hpp"

#include <cmath>
#include <cstring>

#include "json.hpp"
#include "minimt/io.hpp"

namespace minimt {

namespace {

RowMatrixXf make_pos_enc(int max_len, int d) {
  RowMatrixXf pe(max_len, d);
  for (int pos = 0; pos < max_len; ++pos)
    for (int i = 0; i < d; i += 2) {
      double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
      pe(pos, i) = static_cast<float>(std::sin(angle));
      if (i + 1 < d) pe(pos, i + 1) = static_cast<float>(std::cos(angle));
    }
  return pe;
}

RowMatrixXf causal_mask(Index t) {
  RowMatrixXf m = RowMatrixXf::Zero(t, t);
  for (Index i = 0; i < t; ++i)
    for (Index j = i + 1; j < t; ++j) m(i, j) = -1e9f;
  return m;
}

std::string layer_name(const char* stack, int layer, const char* suffix) {
  return std::string(stack) + std::to_string(layer) + "." + suffix;
}

}  // namespace

std::string to_string(FactorCombine c) {
  switch (c) {
    case FactorCombine::kConcat: return "concat";
    case FactorCombine::kSum: return "sum";
    case FactorCombine::kAverage: return "average";
  }
  return "sum";
}

FactorCombine factor_combine_from_string(const std::string& s) {
  if (s == "concat") return FactorCombine::kConcat;
  if (s == "sum") return FactorCombine::kSum;
  if (s == "average") return FactorCombine::kAverage;
  throw UsageError("unknown factor combine mode: " + s);
}

int ModelConfig::word_embed_dim() const {
  if (!factor_configs.empty() &&
      factor_configs.front().combine == FactorCombine::kConcat) {
    int total = 0;
    for (const auto& f : factor_configs) total += f.embed_dim;
    return d_model - total;
  }
  return d_model;
}

void ModelConfig::validate() const {
  if (d_model <= 0 || d_ff <= 0 || num_heads <= 0)
    throw UsageError("d_model, d_ff, num_heads must be positive");
  if (d_model % num_heads != 0)
    throw UsageError("d_model must be divisible by num_heads");
  if (num_encoder_layers < 0 || num_decoder_layers < 0)
    throw UsageError("layer counts must be non-negative");
  if (src_vocab_size < 4 || tgt_vocab_size < 4)
    throw UsageError("vocabulary sizes must cover the reserved tokens");
  if (max_seq_len < 1) throw UsageError("max_seq_len must be positive");
  if (!factor_configs.empty()) {
    FactorCombine mode = factor_configs.front().combine;
    for (const auto& f : factor_configs) {
      if (f.combine != mode)
        throw UsageError("all source factors must use one combine mode");
      if (f.factor_vocab_size < 4 || f.embed_dim <= 0)
        throw UsageError("bad factor vocab size or embed dim");
    }
    int wdim = word_embed_dim();
    if (mode == FactorCombine::kConcat) {
      if (wdim <= 0)
        throw UsageError(
            "concat factors: word dim + factor dims must equal d_model");
    } else {
      for (const auto& f : factor_configs)
        if (f.embed_dim != wdim)
          throw UsageError("sum/average factors need embed_dim == word dim");
    }
    for (const auto& f : factor_configs)
      if (f.share_with_word_embedding) {
        if (f.embed_dim != wdim)
          throw UsageError("shared factor embedding needs word embed dim");
        if (f.factor_vocab_size > src_vocab_size)
          throw UsageError(
              "shared factor vocabulary must fit inside the word vocabulary");
      }
  }
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["num_encoder_layers"] = num_encoder_layers;
  j["num_decoder_layers"] = num_decoder_layers;
  j["d_model"] = d_model;
  j["d_ff"] = d_ff;
  j["num_heads"] = num_heads;
  j["src_vocab_size"] = src_vocab_size;
  j["tgt_vocab_size"] = tgt_vocab_size;
  j["dropout"] = dropout;
  j["max_seq_len"] = max_seq_len;
  j["factors"] = nlohmann::json::array();
  for (const auto& f : factor_configs)
    j["factors"].push_back({{"vocab_size", f.factor_vocab_size},
                            {"embed_dim", f.embed_dim},
                            {"combine", to_string(f.combine)},
                            {"share", f.share_with_word_embedding}});
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& json) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model config JSON: ") + e.what());
  }
  ModelConfig c;
  c.num_encoder_layers = j.value("num_encoder_layers", 6);
  c.num_decoder_layers = j.value("num_decoder_layers", 6);
  c.d_model = j.value("d_model", 32);
  c.d_ff = j.value("d_ff", 128);
  c.num_heads = j.value("num_heads", 4);
  c.src_vocab_size = j.value("src_vocab_size", 0);
  c.tgt_vocab_size = j.value("tgt_vocab_size", 0);
  c.dropout = j.value("dropout", 0.1f);
  c.max_seq_len = j.value("max_seq_len", 128);
  for (const auto& f : j.value("factors", nlohmann::json::array())) {
    SourceFactorConfig fc;
    fc.factor_vocab_size = f.value("vocab_size", 0);
    fc.embed_dim = f.value("embed_dim", 0);
    fc.combine = factor_combine_from_string(f.value("combine", "sum"));
    fc.share_with_word_embedding = f.value("share", false);
    c.factor_configs.push_back(fc);
  }
  return c;
}

ModelConfig ModelConfig::paper_base(int src_vocab, int tgt_vocab) {
  ModelConfig c;
  c.num_encoder_layers = 6;
  c.num_decoder_layers = 6;
  c.d_model = 512;
  c.d_ff = 2048;
  c.num_heads = 8;
  c.src_vocab_size = src_vocab;
  c.tgt_vocab_size = tgt_vocab;
  return c;
}

ModelConfig ModelConfig::desk_default(int src_vocab, int tgt_vocab) {
  ModelConfig c;
  c.num_encoder_layers = 2;
  c.num_decoder_layers = 2;
  c.d_model = 32;
  c.d_ff = 128;
  c.num_heads = 4;
  c.src_vocab_size = src_vocab;
  c.tgt_vocab_size = tgt_vocab;
  return c;
}

std::vector<std::pair<std::string, std::vector<Index>>>
TransformerModel::param_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::vector<Index>>> out;
  Index d = c.d_model, dff = c.d_ff;
  out.emplace_back("src_embed",
                   std::vector<Index>{c.src_vocab_size, c.word_embed_dim()});
  for (std::size_t i = 0; i < c.factor_configs.size(); ++i)
    if (!c.factor_configs[i].share_with_word_embedding)
      out.emplace_back("factor" + std::to_string(i) + "_embed",
                       std::vector<Index>{c.factor_configs[i].factor_vocab_size,
                                          c.factor_configs[i].embed_dim});
  out.emplace_back("tgt_embed", std::vector<Index>{c.tgt_vocab_size, d});
  auto norm = [&](const std::string& prefix) {
    out.emplace_back(prefix + ".gain", std::vector<Index>{d});
    out.emplace_back(prefix + ".bias", std::vector<Index>{d});
  };
  auto attn = [&](const std::string& prefix) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"})
      out.emplace_back(prefix + w, std::vector<Index>{d, d});
  };
  auto ffn = [&](const std::string& prefix) {
    out.emplace_back(prefix + ".w1", std::vector<Index>{d, dff});
    out.emplace_back(prefix + ".b1", std::vector<Index>{dff});
    out.emplace_back(prefix + ".w2", std::vector<Index>{dff, d});
    out.emplace_back(prefix + ".b2", std::vector<Index>{d});
  };
  for (int l = 0; l < c.num_encoder_layers; ++l) {
    std::string p = "enc" + std::to_string(l);
    norm(p + ".norm1");
    attn(p + ".attn");
    norm(p + ".norm2");
    ffn(p + ".ffn");
  }
  if (c.num_encoder_layers > 0) norm("enc_final");
  for (int l = 0; l < c.num_decoder_layers; ++l) {
    std::string p = "dec" + std::to_string(l);
    norm(p + ".norm1");
    attn(p + ".self");
    norm(p + ".norm2");
    attn(p + ".cross");
    norm(p + ".norm3");
    ffn(p + ".ffn");
  }
  norm("dec_final");
  return out;
}

TransformerModel::TransformerModel(ModelConfig config)
    : config_(std::move(config)) {
  config_.validate();
  for (auto& [name, shape] : param_shapes(config_))
    params_.emplace(name, Tensor(shape));
  pos_enc_ = make_pos_enc(config_.max_seq_len, config_.d_model);
}

void TransformerModel::init_params(Rng& rng) {
  for (auto& [name, t] : params_) {
    if (t.rank() == 2) {
      float limit = std::sqrt(6.0f / static_cast<float>(t.rows() + t.cols()));
      for (Index i = 0; i < t.numel(); ++i) t.data[i] = rng.uniform(-limit, limit);
    } else {
      t.data.setConstant(name.ends_with(".gain") ? 1.0f : 0.0f);
    }
  }
}

Tensor& TransformerModel::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw StateError("unknown parameter: " + name);
  return it->second;
}

const Tensor& TransformerModel::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw StateError("unknown parameter: " + name);
  return it->second;
}

void TransformerModel::watch_all(Tape& tape) {
  for (auto& [name, t] : params_) tape.watch(t);
}

std::size_t TransformerModel::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += static_cast<std::size_t>(t.numel());
  return n;
}

// ---- training-path forward -------------------------------------------------

namespace {

Tensor maybe_dropout(const Tensor& x, const ModelConfig& c, Tape* tape,
                     Rng* rng, bool training) {
  if (!training || c.dropout == 0.0f) return x;
  if (!rng) throw StateError("training forward needs an RNG for dropout");
  return dropout(x, c.dropout, true, *rng, tape);
}

// Generic multi-head attention over full matrices (training path).
Tensor mha(const TransformerModel& m, const std::string& prefix,
           const Tensor& q_in, const Tensor& kv_in, const RowMatrixXf* mask,
           Tape* tape) {
  const ModelConfig& c = m.config();
  Index dh = c.d_model / c.num_heads;
  Tensor q = matmul(q_in, m.param(prefix + ".wq"), tape);
  Tensor k = matmul(kv_in, m.param(prefix + ".wk"), tape);
  Tensor v = matmul(kv_in, m.param(prefix + ".wv"), tape);
  float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> heads;
  heads.reserve(c.num_heads);
  for (int h = 0; h < c.num_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh, tape);
    Tensor kh = slice_cols(k, h * dh, dh, tape);
    Tensor vh = slice_cols(v, h * dh, dh, tape);
    Tensor scores = scale(matmul_nt(qh, kh, tape), inv_sqrt_dh, tape);
    if (mask) scores = add_const(scores, *mask, tape);
    Tensor attn = softmax_rows(scores, tape);
    heads.push_back(matmul(attn, vh, tape));
  }
  Tensor ctx = concat_cols(heads, tape);
  return matmul(ctx, m.param(prefix + ".wo"), tape);
}

Tensor ffn_block(const TransformerModel& m, const std::string& prefix,
                 const Tensor& x, Tape* tape) {
  Tensor h = relu(
      add_rowvec(matmul(x, m.param(prefix + ".w1"), tape),
                 m.param(prefix + ".b1"), tape),
      tape);
  return add_rowvec(matmul(h, m.param(prefix + ".w2"), tape),
                    m.param(prefix + ".b2"), tape);
}

Tensor norm_of(const TransformerModel& m, const std::string& prefix,
               const Tensor& x, Tape* tape) {
  return layer_norm(x, m.param(prefix + ".gain"), m.param(prefix + ".bias"),
                    kLayerNormEps, tape);
}

}  // namespace

Tensor embed_source(const TransformerModel& m, const std::vector<int>& word_ids,
                    const std::vector<std::vector<int>>& factor_ids,
                    Tape* tape, Rng* rng, bool training) {
  const ModelConfig& c = m.config();
  if (factor_ids.size() != c.factor_configs.size())
    throw ShapeError("embed_source: factor stream count vs config");
  for (const auto& f : factor_ids)
    if (f.size() != word_ids.size())
      throw ShapeError("embed_source: factor stream not aligned with words");
  Index t = static_cast<Index>(word_ids.size());
  if (t > c.max_seq_len) throw ValueError("embed_source: sequence too long");
  Tensor word = embedding_lookup(m.param("src_embed"), word_ids, tape);
  std::vector<Tensor> factors;
  for (std::size_t i = 0; i < factor_ids.size(); ++i) {
    const std::string table = c.factor_configs[i].share_with_word_embedding
                                  ? "src_embed"
                                  : "factor" + std::to_string(i) + "_embed";
    factors.push_back(embedding_lookup(m.param(table), factor_ids[i], tape));
  }
  Tensor combined;
  if (factors.empty()) {
    combined = word;
  } else {
    switch (c.factor_configs.front().combine) {
      case FactorCombine::kConcat: {
        std::vector<Tensor> parts{word};
        for (auto& f : factors) parts.push_back(f);
        combined = concat_cols(parts, tape);
        break;
      }
      case FactorCombine::kSum: {
        combined = word;
        for (auto& f : factors) combined = add(combined, f, tape);
        break;
      }
      case FactorCombine::kAverage: {
        combined = word;
        for (auto& f : factors) combined = add(combined, f, tape);
        combined = scale(combined, 1.0f / (1.0f + factors.size()), tape);
        break;
      }
    }
  }
  combined = scale(combined, std::sqrt(static_cast<float>(c.d_model)), tape);
  combined = add_const(combined, m.pos_enc().topRows(t), tape);
  return maybe_dropout(combined, c, tape, rng, training);
}

Tensor encode(const TransformerModel& m, const Tensor& src_embedded, Tape* tape,
              Rng* rng, bool training) {
  const ModelConfig& c = m.config();
  if (src_embedded.rows() > c.max_seq_len)
    throw ValueError("encode: sequence longer than max_seq_len");
  if (c.num_encoder_layers == 0) return src_embedded;
  Tensor x = src_embedded;
  for (int l = 0; l < c.num_encoder_layers; ++l) {
    std::string p = "enc" + std::to_string(l);
    Tensor n1 = norm_of(m, p + ".norm1", x, tape);
    Tensor a = mha(m, p + ".attn", n1, n1, nullptr, tape);
    x = add(x, maybe_dropout(a, c, tape, rng, training), tape);
    Tensor f = ffn_block(m, p + ".ffn", norm_of(m, p + ".norm2", x, tape), tape);
    x = add(x, maybe_dropout(f, c, tape, rng, training), tape);
  }
  return norm_of(m, "enc_final", x, tape);
}

Tensor forward_teacher_forced(const TransformerModel& m,
                              const std::vector<int>& src_ids,
                              const std::vector<std::vector<int>>& factor_ids,
                              const std::vector<int>& tgt_ids, Tape* tape,
                              Rng* rng, bool training) {
  const ModelConfig& c = m.config();
  if (tgt_ids.empty()) throw ValueError("teacher forcing needs a target");
  Index tt = static_cast<Index>(tgt_ids.size());
  if (tt > c.max_seq_len) throw ValueError("target longer than max_seq_len");
  Tensor enc_out =
      encode(m, embed_source(m, src_ids, factor_ids, tape, rng, training),
             tape, rng, training);

  std::vector<int> tgt_in(tgt_ids.size());
  tgt_in[0] = kBosId;
  for (std::size_t i = 1; i < tgt_ids.size(); ++i) tgt_in[i] = tgt_ids[i - 1];

  Tensor y = embedding_lookup(m.param("tgt_embed"), tgt_in, tape);
  y = scale(y, std::sqrt(static_cast<float>(c.d_model)), tape);
  y = add_const(y, m.pos_enc().topRows(tt), tape);
  y = maybe_dropout(y, c, tape, rng, training);

  RowMatrixXf mask = causal_mask(tt);
  for (int l = 0; l < c.num_decoder_layers; ++l) {
    std::string p = "dec" + std::to_string(l);
    Tensor n1 = norm_of(m, p + ".norm1", y, tape);
    Tensor a = mha(m, p + ".self", n1, n1, &mask, tape);
    y = add(y, maybe_dropout(a, c, tape, rng, training), tape);
    Tensor cr = mha(m, p + ".cross", norm_of(m, p + ".norm2", y, tape), enc_out,
                    nullptr, tape);
    y = add(y, maybe_dropout(cr, c, tape, rng, training), tape);
    Tensor f = ffn_block(m, p + ".ffn", norm_of(m, p + ".norm3", y, tape), tape);
    y = add(y, maybe_dropout(f, c, tape, rng, training), tape);
  }
  Tensor h = norm_of(m, "dec_final", y, tape);
  return matmul_nt(h, m.param("tgt_embed"), tape);
}

// ---- executors -------------------------------------------------------------

Tensor F32Executor::linear(const Tensor& x, const std::string& name) const {
  const Tensor& w = model_->param(name);
  if (x.cols() != w.rows()) throw ShapeError("linear: shape mismatch " + name);
  Tensor out({x.rows(), w.cols()});
  gemm_f32(x.data.data(), w.data.data(), out.data.data(), x.rows(), x.cols(),
           w.cols(), workers);
  return out;
}

Tensor F32Executor::project_logits(const Tensor& x,
                                   const std::vector<int>* rows) const {
  const Tensor& e = model_->param("tgt_embed");
  if (!rows) {
    Tensor out({x.rows(), e.rows()});
    gemm_f32_nt(x.data.data(), e.data.data(), out.data.data(), x.rows(),
                x.cols(), e.rows(), workers);
    return out;
  }
  Tensor out({x.rows(), static_cast<Index>(rows->size())});
  auto xm = x.mat();
  auto em = e.mat();
  for (Index i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < rows->size(); ++j) {
      int r = (*rows)[j];
      if (r < 0 || r >= e.rows()) throw IndexError("project_logits: bad row");
      out.mat()(i, static_cast<Index>(j)) = xm.row(i).dot(em.row(r));
    }
  return out;
}

Tensor F32Executor::embed_rows(const std::string& table,
                               const std::vector<int>& ids) const {
  return embedding_lookup(model_->param(table), ids);
}

const Tensor& F32Executor::f32_param(const std::string& name) const {
  return model_->param(name);
}

Tensor Int8Executor::linear(const Tensor& x, const std::string& name) const {
  auto it = model_->q_params.find(name);
  if (it == model_->q_params.end())
    throw StateError("no quantized parameter: " + name);
  return qmatmul(quantize_activations(x), it->second, workers);
}

Tensor Int8Executor::project_logits(const Tensor& x,
                                    const std::vector<int>* rows) const {
  const QuantizedTensor& e = model_->q_params.at("tgt_embed");
  return qmatmul_nt(quantize_activations(x), e, rows, workers);
}

Tensor Int8Executor::embed_rows(const std::string& table,
                                const std::vector<int>& ids) const {
  auto qit = model_->q_params.find(table);
  if (qit != model_->q_params.end()) {
    const QuantizedTensor& q = qit->second;
    Tensor out({static_cast<Index>(ids.size()), q.cols()});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= q.rows())
        throw IndexError("embed_rows: id out of range");
      for (Index j = 0; j < q.cols(); ++j)
        out.mat()(static_cast<Index>(i), j) =
            static_cast<float>(q.qdata[ids[i] * q.cols() + j]) / q.scale;
    }
    return out;
  }
  return embedding_lookup(model_->f32_params.at(table), ids);
}

const Tensor& Int8Executor::f32_param(const std::string& name) const {
  auto it = model_->f32_params.find(name);
  if (it == model_->f32_params.end())
    throw StateError("no f32 parameter: " + name);
  return it->second;
}

// ---- inference forward -------------------------------------------------

namespace {

Tensor norm_infer(const Executor& ex, const std::string& prefix,
                  const Tensor& x) {
  return layer_norm(x, ex.f32_param(prefix + ".gain"),
                    ex.f32_param(prefix + ".bias"), kLayerNormEps);
}

Tensor mha_infer(const Executor& ex, const std::string& prefix,
                 const Tensor& q_in, const Tensor& kv_in,
                 const RowMatrixXf* mask) {
  const ModelConfig& c = ex.config();
  Index dh = c.d_model / c.num_heads;
  Tensor q = ex.linear(q_in, prefix + ".wq");
  Tensor k = ex.linear(kv_in, prefix + ".wk");
  Tensor v = ex.linear(kv_in, prefix + ".wv");
  float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> heads;
  for (int h = 0; h < c.num_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
    if (mask) scores = add_const(scores, *mask);
    heads.push_back(matmul(softmax_rows(scores), vh));
  }
  return ex.linear(concat_cols(heads), prefix + ".wo");
}

Tensor ffn_infer(const Executor& ex, const std::string& prefix,
                 const Tensor& x) {
  Tensor h = relu(add_rowvec(ex.linear(x, prefix + ".w1"),
                             ex.f32_param(prefix + ".b1")));
  return add_rowvec(ex.linear(h, prefix + ".w2"), ex.f32_param(prefix + ".b2"));
}

}  // namespace

Tensor embed_source_infer(const Executor& ex, const std::vector<int>& word_ids,
                          const std::vector<std::vector<int>>& factor_ids) {
  const ModelConfig& c = ex.config();
  if (factor_ids.size() != c.factor_configs.size())
    throw ShapeError("embed_source: factor stream count vs config");
  for (const auto& f : factor_ids)
    if (f.size() != word_ids.size())
      throw ShapeError("embed_source: factor stream not aligned with words");
  Index t = static_cast<Index>(word_ids.size());
  if (t > c.max_seq_len) throw ValueError("embed_source: sequence too long");
  Tensor word = ex.embed_rows("src_embed", word_ids);
  std::vector<Tensor> factors;
  for (std::size_t i = 0; i < factor_ids.size(); ++i) {
    const std::string table = c.factor_configs[i].share_with_word_embedding
                                  ? "src_embed"
                                  : "factor" + std::to_string(i) + "_embed";
    factors.push_back(ex.embed_rows(table, factor_ids[i]));
  }
  Tensor combined;
  if (factors.empty()) {
    combined = word;
  } else {
    switch (c.factor_configs.front().combine) {
      case FactorCombine::kConcat: {
        std::vector<Tensor> parts{word};
        for (auto& f : factors) parts.push_back(f);
        combined = concat_cols(parts);
        break;
      }
      case FactorCombine::kSum:
        combined = word;
        for (auto& f : factors) combined = add(combined, f);
        break;
      case FactorCombine::kAverage:
        combined = word;
        for (auto& f : factors) combined = add(combined, f);
        combined = scale(combined, 1.0f / (1.0f + factors.size()));
        break;
    }
  }
  combined = scale(combined, std::sqrt(static_cast<float>(c.d_model)));
  return add_const(combined, ex.pos_enc().topRows(t));
}

Tensor encode_infer(const Executor& ex, const Tensor& src_embedded) {
  const ModelConfig& c = ex.config();
  if (src_embedded.rows() > c.max_seq_len)
    throw ValueError("encode: sequence longer than max_seq_len");
  if (c.num_encoder_layers == 0) return src_embedded;
  Tensor x = src_embedded;
  for (int l = 0; l < c.num_encoder_layers; ++l) {
    std::string p = "enc" + std::to_string(l);
    Tensor a = norm_infer(ex, p + ".norm1", x);
    x = add(x, mha_infer(ex, p + ".attn", a, a, nullptr));
    x = add(x, ffn_infer(ex, p + ".ffn", norm_infer(ex, p + ".norm2", x)));
  }
  return norm_infer(ex, "enc_final", x);
}

DecoderState init_decoder(const Executor& ex, const Tensor& enc_out) {
  const ModelConfig& c = ex.config();
  DecoderState st;
  st.exec = &ex;
  st.self_k.resize(c.num_decoder_layers);
  st.self_v.resize(c.num_decoder_layers);
  for (int l = 0; l < c.num_decoder_layers; ++l) {
    std::string p = "dec" + std::to_string(l) + ".cross";
    st.cross_k.push_back(ex.linear(enc_out, p + ".wk").mat());
    st.cross_v.push_back(ex.linear(enc_out, p + ".wv").mat());
    st.self_k[l].resize(0, c.d_model);
    st.self_v[l].resize(0, c.d_model);
  }
  return st;
}

Tensor decode_step(DecoderState& state, int prev_token,
                   const std::vector<int>* shortlist_rows) {
  const Executor& ex = *state.exec;
  const ModelConfig& c = ex.config();
  if (state.pos >= c.max_seq_len)
    throw ValueError("decode_step: past max_seq_len");
  Index d = c.d_model;
  Index dh = d / c.num_heads;
  float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

  Tensor y = ex.embed_rows("tgt_embed", {prev_token});
  y = scale(y, std::sqrt(static_cast<float>(d)));
  y = add_const(y, ex.pos_enc().middleRows(state.pos, 1));

  for (int l = 0; l < c.num_decoder_layers; ++l) {
    std::string p = "dec" + std::to_string(l);
    // self-attention over the cached prefix plus this position
    Tensor a = norm_infer(ex, p + ".norm1", y);
    Tensor q = ex.linear(a, p + ".self.wq");
    Tensor k = ex.linear(a, p + ".self.wk");
    Tensor v = ex.linear(a, p + ".self.wv");
    RowMatrixXf& ks = state.self_k[l];
    RowMatrixXf& vs = state.self_v[l];
    ks.conservativeResize(ks.rows() + 1, d);
    vs.conservativeResize(vs.rows() + 1, d);
    ks.row(ks.rows() - 1) = k.mat().row(0);
    vs.row(vs.rows() - 1) = v.mat().row(0);
    Tensor ctx({1, d});
    for (int h = 0; h < c.num_heads; ++h) {
      Eigen::RowVectorXf qh = q.mat().row(0).segment(h * dh, dh);
      auto kh = ks.middleCols(h * dh, dh);
      auto vh = vs.middleCols(h * dh, dh);
      Eigen::VectorXf scores = (kh * qh.transpose()) * inv_sqrt_dh;
      float mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp();
      scores /= scores.sum();
      ctx.mat().row(0).segment(h * dh, dh) = (scores.transpose() * vh);
    }
    y = add(y, ex.linear(ctx, p + ".self.wo"));
    // cross-attention against the fixed encoder keys/values
    Tensor cq = ex.linear(norm_infer(ex, p + ".norm2", y), p + ".cross.wq");
    Tensor cctx({1, d});
    for (int h = 0; h < c.num_heads; ++h) {
      Eigen::RowVectorXf qh = cq.mat().row(0).segment(h * dh, dh);
      auto kh = state.cross_k[l].middleCols(h * dh, dh);
      auto vh = state.cross_v[l].middleCols(h * dh, dh);
      Eigen::VectorXf scores = (kh * qh.transpose()) * inv_sqrt_dh;
      float mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp();
      scores /= scores.sum();
      cctx.mat().row(0).segment(h * dh, dh) = (scores.transpose() * vh);
    }
    y = add(y, ex.linear(cctx, p + ".cross.wo"));
    y = add(y, ffn_infer(ex, p + ".ffn", norm_infer(ex, p + ".norm3", y)));
  }
  state.pos += 1;
  Tensor h = norm_infer(ex, "dec_final", y);
  return ex.project_logits(h, shortlist_rows);
}

// ---- persistence -------------------------------------------------------

bool is_quantized_param(const std::string& name) {
  if (name == "tgt_embed") return true;
  for (const char* s : {".wq", ".wk", ".wv", ".wo", ".w1", ".w2"})
    if (name.ends_with(s)) return true;
  return false;
}

namespace {

std::vector<std::uint8_t> f32_bytes(const Tensor& t) {
  std::vector<std::uint8_t> b(t.numel() * 4);
  std::memcpy(b.data(), t.data.data(), b.size());
  return b;
}

std::vector<std::uint32_t> dims_of(const std::vector<Index>& shape) {
  std::vector<std::uint32_t> d;
  for (Index s : shape) d.push_back(static_cast<std::uint32_t>(s));
  return d;
}

}  // namespace

void save_params(const TransformerModel& m, const std::string& path) {
  ParamFile file;
  file.config_json = m.config().to_json();
  for (auto& [name, shape] : TransformerModel::param_shapes(m.config())) {
    const Tensor& t = m.param(name);
    ParamRecord rec;
    rec.name = name;
    rec.dtype = 0;
    rec.dims = dims_of(t.shape);
    rec.payload = f32_bytes(t);
    file.params.push_back(std::move(rec));
  }
  write_param_file(path, file);
}

TransformerModel load_params(const std::string& path,
                             const ModelConfig* expect) {
  ParamFile file = read_param_file(path);
  ModelConfig config = ModelConfig::from_json(file.config_json);
  if (expect && expect->to_json() != config.to_json())
    throw FormatError("model file config does not match the expected config");
  TransformerModel m(config);
  for (auto& [name, shape] : TransformerModel::param_shapes(config)) {
    const ParamRecord* rec = file.find(name);
    if (!rec) throw FormatError("missing parameter: " + name);
    if (rec->dtype != 0) throw FormatError("expected f32 parameter: " + name);
    Tensor& t = m.param(name);
    if (dims_of(t.shape) != rec->dims)
      throw FormatError("shape mismatch for parameter: " + name);
    std::memcpy(t.data.data(), rec->payload.data(), rec->payload.size());
  }
  return m;
}

QuantizedModel quantize_model(const TransformerModel& m) {
  QuantizedModel qm;
  qm.config = m.config();
  qm.pos_enc = m.pos_enc();
  for (const auto& [name, t] : m.params()) {
    check_finite(t, "quantize_model(" + name + ")");
    if (is_quantized_param(name)) {
      QuantizedTensor q = quantize(t);
      if (name != "tgt_embed") q.prepare();
      qm.q_params.emplace(name, std::move(q));
    } else {
      qm.f32_params.emplace(name, t);
    }
  }
  return qm;
}

void save_quantized(const QuantizedModel& m, const std::string& path) {
  ParamFile file;
  file.config_json = m.config.to_json();
  for (auto& [name, shape] : TransformerModel::param_shapes(m.config)) {
    ParamRecord rec;
    rec.name = name;
    auto qit = m.q_params.find(name);
    if (qit != m.q_params.end()) {
      const QuantizedTensor& q = qit->second;
      rec.dtype = 1;
      rec.dims = dims_of(q.shape);
      rec.scale = q.scale;
      rec.payload.resize(q.numel());
      std::memcpy(rec.payload.data(), q.qdata.data(), rec.payload.size());
    } else {
      const Tensor& t = m.f32_params.at(name);
      rec.dtype = 0;
      rec.dims = dims_of(t.shape);
      rec.payload = f32_bytes(t);
    }
    file.params.push_back(std::move(rec));
  }
  write_param_file(path, file);
}

QuantizedModel load_quantized(const std::string& path) {
  ParamFile file = read_param_file(path);
  QuantizedModel m;
  m.config = ModelConfig::from_json(file.config_json);
  m.config.validate();
  m.pos_enc = make_pos_enc(m.config.max_seq_len, m.config.d_model);
  for (auto& [name, shape] : TransformerModel::param_shapes(m.config)) {
    const ParamRecord* rec = file.find(name);
    if (!rec) throw FormatError("missing parameter: " + name);
    std::vector<Index> sh(rec->dims.begin(), rec->dims.end());
    if (rec->dtype == 1) {
      QuantizedTensor q;
      q.shape = sh;
      q.scale = rec->scale;
      if (!(q.scale > 0.0f) || !std::isfinite(q.scale))
        throw FormatError("bad scale for parameter: " + name);
      q.qdata.resize(static_cast<Index>(rec->payload.size()));
      std::memcpy(q.qdata.data(), rec->payload.data(), rec->payload.size());
      q.finish();
      if (name != "tgt_embed") q.prepare();
      m.q_params.emplace(name, std::move(q));
    } else {
      Tensor t(sh);
      std::memcpy(t.data.data(), rec->payload.data(), rec->payload.size());
      m.f32_params.emplace(name, std::move(t));
    }
  }
  return m;
}

QuantizedModel load_model_quantized_on_load(const std::string& f32_path) {
  return quantize_model(load_params(f32_path));
}

}  // namespace minimt
