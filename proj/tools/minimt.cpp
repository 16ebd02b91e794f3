// minimt command-line interface: gen-data, train, quantize, translate,
// evaluate, benchmark.
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "minimt/data.hpp"
#include "minimt/decode.hpp"
#include "minimt/eval.hpp"
#include "minimt/io.hpp"
#include "minimt/model.hpp"
#include "minimt/quant.hpp"
#include "minimt/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace minimt;

namespace {

// ---- gen-data --------------------------------------------------------------

struct GenDataArgs {
  std::string task = "copy";
  int vocab_size = 12;
  int train = 2000, dev = 200, test = 200;
  int len_lo = 1, len_hi = 8;
  bool casing = false;
  std::uint64_t seed = 1;
  std::string out;
  bool force = false;
};

void write_split(const std::string& dir, const std::string& name,
                 const ParallelCorpus& corpus, const std::vector<int>& idx,
                 bool force) {
  for (const char* side : {".src", ".tgt"}) {
    std::string path = dir + "/" + name + side;
    if (!force && fs::exists(path))
      throw UsageError(path + " exists; pass --force to overwrite");
  }
  std::vector<std::string> src, tgt;
  for (int i : idx) {
    src.push_back(detokenize(corpus.src[i]));
    tgt.push_back(detokenize(corpus.tgt[i]));
  }
  write_lines(dir + "/" + name + ".src", src);
  write_lines(dir + "/" + name + ".tgt", tgt);
}

int cmd_gen_data(const GenDataArgs& a) {
  int total = a.train + a.dev + a.test;
  if (total < 1) throw UsageError("gen-data: no sentences requested");
  ParallelCorpus corpus =
      generate_task(task_kind_from_string(a.task), a.vocab_size, total,
                    a.len_lo, a.len_hi, a.casing, a.seed);
  std::vector<int> idx(total);
  for (int i = 0; i < total; ++i) idx[i] = i;
  Rng rng(a.seed ^ 0x5eedULL);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  fs::create_directories(a.out);
  write_split(a.out, "train", corpus,
              {idx.begin(), idx.begin() + a.train}, a.force);
  write_split(a.out, "dev", corpus,
              {idx.begin() + a.train, idx.begin() + a.train + a.dev}, a.force);
  write_split(a.out, "test", corpus, {idx.begin() + a.train + a.dev, idx.end()},
              a.force);
  std::cout << "wrote " << a.train << "/" << a.dev << "/" << a.test
            << " sentences to " << a.out << "\n";
  return 0;
}

// ---- shared preprocessing --------------------------------------------------

// Splits raw lines into lowercased word sequences plus (for factor schemes)
// one token-aligned factor stream of case categories or original cased tokens.
void preprocess_source(const std::vector<std::string>& lines,
                       FactorScheme scheme, std::vector<TokenSeq>& words,
                       std::vector<std::vector<TokenSeq>>& factors) {
  for (const auto& line : lines) {
    FactoredInput in = apply_case_factors(line, scheme);
    words.push_back(std::move(in.words));
    factors.push_back(std::move(in.factors));
  }
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string train_src, train_tgt, dev_src, dev_tgt, out, config_path;
  int encoder_layers = 2, decoder_layers = 2;
  int d_model = 32, d_ff = 128, heads = 4;
  float dropout = 0.1f;
  int max_seq_len = 128;
  int vocab_size = 32000, min_count = 1;
  std::string factors_scheme = "none", factor_combine = "sum";
  int factor_embed_dim = 0;
  std::string scheduler = "plateau-reduce";
  float base_lr = 0.001f;
  int lr_scale_batches = 1;
  long warmup = 200;
  long effective_batch_tokens = 2048, micro_batch_tokens = 512;
  int checkpoint_interval = 50;
  float reduce_rate = 0.9f;
  int reduce_patience = 8, stop_patience = 60, average_best = 8;
  long max_steps = 1000;
  float label_smoothing = 0.1f;
  std::uint64_t seed = 1;
  double stop_at_dev_ppl = 0.0;
};

// flags > --config JSON > defaults: JSON values only fill flags the user did
// not pass explicitly.
void apply_config_file(CLI::App* cmd, TrainArgs& a) {
  if (a.config_path.empty()) return;
  std::ifstream f(a.config_path);
  if (!f) throw IoError("cannot read config: " + a.config_path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad config JSON: ") + e.what());
  }
  auto fill = [&](const char* flag, const char* key, auto& var) {
    if (cmd->count(flag) == 0 && j.contains(key))
      var = j.at(key).get<std::decay_t<decltype(var)>>();
  };
  fill("--encoder-layers", "encoder_layers", a.encoder_layers);
  fill("--decoder-layers", "decoder_layers", a.decoder_layers);
  fill("--d-model", "d_model", a.d_model);
  fill("--d-ff", "d_ff", a.d_ff);
  fill("--heads", "heads", a.heads);
  fill("--dropout", "dropout", a.dropout);
  fill("--max-seq-len", "max_seq_len", a.max_seq_len);
  fill("--vocab-size", "vocab_size", a.vocab_size);
  fill("--min-count", "min_count", a.min_count);
  fill("--factors-scheme", "factors_scheme", a.factors_scheme);
  fill("--factor-combine", "factor_combine", a.factor_combine);
  fill("--factor-embed-dim", "factor_embed_dim", a.factor_embed_dim);
  fill("--scheduler", "scheduler", a.scheduler);
  fill("--base-lr", "base_lr", a.base_lr);
  fill("--lr-scale-batches", "lr_scale_batches", a.lr_scale_batches);
  fill("--warmup", "warmup", a.warmup);
  fill("--effective-batch-tokens", "effective_batch_tokens",
       a.effective_batch_tokens);
  fill("--micro-batch-tokens", "micro_batch_tokens", a.micro_batch_tokens);
  fill("--checkpoint-interval", "checkpoint_interval", a.checkpoint_interval);
  fill("--reduce-rate", "reduce_rate", a.reduce_rate);
  fill("--reduce-patience", "reduce_patience", a.reduce_patience);
  fill("--stop-patience", "stop_patience", a.stop_patience);
  fill("--average-best", "average_best", a.average_best);
  fill("--max-steps", "max_steps", a.max_steps);
  fill("--label-smoothing", "label_smoothing", a.label_smoothing);
  fill("--seed", "seed", a.seed);
  fill("--stop-at-dev-ppl", "stop_at_dev_ppl", a.stop_at_dev_ppl);
}

int cmd_train(CLI::App* cmd, TrainArgs& a) {
  apply_config_file(cmd, a);
  if (a.encoder_layers < 1 || a.decoder_layers < 1)
    throw UsageError("train: encoder and decoder need at least one layer");
  FactorScheme scheme = factor_scheme_from_string(a.factors_scheme);

  std::vector<std::string> train_src_lines = read_lines(a.train_src);
  std::vector<std::string> train_tgt_lines = read_lines(a.train_tgt);
  std::vector<std::string> dev_src_lines = read_lines(a.dev_src);
  std::vector<std::string> dev_tgt_lines = read_lines(a.dev_tgt);
  if (train_src_lines.size() != train_tgt_lines.size() ||
      dev_src_lines.size() != dev_tgt_lines.size())
    throw UsageError("train: source/target line counts differ");

  ParallelCorpus train_corpus, dev_corpus;
  preprocess_source(train_src_lines, scheme, train_corpus.src,
                    train_corpus.factors);
  preprocess_source(dev_src_lines, scheme, dev_corpus.src, dev_corpus.factors);
  for (const auto& l : train_tgt_lines) train_corpus.tgt.push_back(tokenize(l));
  for (const auto& l : dev_tgt_lines) dev_corpus.tgt.push_back(tokenize(l));

  bool share = scheme == FactorScheme::kSfWordShare;
  std::vector<TokenSeq> src_vocab_side = train_corpus.src;
  if (share)  // the shared table must cover the cased factor tokens too
    for (const auto& streams : train_corpus.factors)
      src_vocab_side.push_back(streams.at(0));
  Vocabulary src_vocab = build_vocab(src_vocab_side, a.vocab_size, a.min_count);
  Vocabulary tgt_vocab = build_vocab(train_corpus.tgt, a.vocab_size,
                                     a.min_count);

  std::vector<Vocabulary> factor_vocabs;
  if (scheme == FactorScheme::kSfCase) {
    factor_vocabs.push_back(case_factor_vocabulary());
  } else if (scheme == FactorScheme::kSfWord) {
    std::vector<TokenSeq> side;
    for (const auto& streams : train_corpus.factors)
      side.push_back(streams.at(0));
    factor_vocabs.push_back(build_vocab(side, a.vocab_size, a.min_count));
  } else if (share) {
    factor_vocabs.push_back(src_vocab);
  }

  ModelConfig config;
  config.num_encoder_layers = a.encoder_layers;
  config.num_decoder_layers = a.decoder_layers;
  config.d_model = a.d_model;
  config.d_ff = a.d_ff;
  config.num_heads = a.heads;
  config.dropout = a.dropout;
  config.max_seq_len = a.max_seq_len;
  config.src_vocab_size = src_vocab.size();
  config.tgt_vocab_size = tgt_vocab.size();
  if (scheme != FactorScheme::kNone) {
    SourceFactorConfig f;
    f.factor_vocab_size = factor_vocabs[0].size();
    f.combine = factor_combine_from_string(a.factor_combine);
    f.share_with_word_embedding = share;
    f.embed_dim = f.combine == FactorCombine::kConcat
                      ? a.factor_embed_dim
                      : (a.factor_embed_dim > 0 ? a.factor_embed_dim
                                                : a.d_model);
    config.factor_configs.push_back(f);
    if (f.combine == FactorCombine::kConcat && a.factor_embed_dim <= 0)
      throw UsageError("train: concat factors need --factor-embed-dim");
  }
  config.validate();

  BatchSet train_set = make_batches(train_corpus, src_vocab, tgt_vocab,
                                    factor_vocabs, a.micro_batch_tokens,
                                    a.max_seq_len);
  BatchSet dev_set = make_batches(dev_corpus, src_vocab, tgt_vocab,
                                  factor_vocabs, a.micro_batch_tokens,
                                  a.max_seq_len);
  if (train_set.skipped > 0)
    std::cerr << "train: skipped " << train_set.skipped
              << " overlength sentences\n";

  TrainConfig tc;
  tc.scheduler = scheduler_from_string(a.scheduler);
  tc.effective_batch_tokens = a.effective_batch_tokens;
  tc.micro_batch_tokens = a.micro_batch_tokens;
  tc.base_lr = scaled_lr(a.base_lr, a.lr_scale_batches);
  tc.warmup = a.warmup;
  tc.checkpoint_interval = a.checkpoint_interval;
  tc.plateau = {a.reduce_patience, a.stop_patience, a.reduce_rate};
  tc.plateau.validate();
  tc.average_best = a.average_best;
  tc.max_steps = a.max_steps;
  tc.label_smoothing = a.label_smoothing;
  tc.dropout_active = a.dropout > 0.0f;
  tc.seed = a.seed;
  tc.stop_at_dev_ppl = a.stop_at_dev_ppl;
  tc.out_dir = a.out;

  TransformerModel model(config);
  Rng init_rng(a.seed);
  model.init_params(init_rng);
  TrainResult result = train_loop(model, train_set, dev_set, tc);

  src_vocab.save(a.out + "/src.vocab");
  tgt_vocab.save(a.out + "/tgt.vocab");
  if (!factor_vocabs.empty()) factor_vocabs[0].save(a.out + "/factor0.vocab");
  build_cooccurrence_table(train_corpus, src_vocab, tgt_vocab)
      .save(a.out + "/shortlist.txt");
  json meta;
  meta["factors_scheme"] = a.factors_scheme;
  std::ofstream mf(a.out + "/meta.json", std::ios::trunc);
  mf << meta.dump(2) << "\n";

  std::cout << "trained " << result.steps << " steps, best dev ppl "
            << result.best_ppl << ", model in " << a.out << "/model.bin\n";
  return 0;
}

// ---- quantize --------------------------------------------------------------

int cmd_quantize(const std::string& in, const std::string& out) {
  QuantizedModel qm = quantize_model(load_params(in));
  save_quantized(qm, out);
  std::cout << "quantized " << in << " (" << fs::file_size(in) << " bytes) -> "
            << out << " (" << fs::file_size(out) << " bytes)\n";
  return 0;
}

// ---- translate / benchmark -------------------------------------------------

struct TranslateArgs {
  std::string model, input, output = "-";
  std::string src_vocab, tgt_vocab, factor_vocab, shortlist_table, case_scheme;
  bool int8 = false;
  int beam = 4;
  int max_len = 0;
  float alpha = 1.0f;
  int shortlist_k = 0;
  int workers = 1;
  int parallel_sentences = 1;
  std::string latency_out;
  int repeat = 1;  // benchmark only
};

struct LoadedModel {
  std::unique_ptr<TransformerModel> f32;
  std::unique_ptr<QuantizedModel> q;
  std::unique_ptr<Executor> exec;
};

LoadedModel load_executor(const std::string& path, bool int8, int workers) {
  LoadedModel lm;
  ParamFile pf = read_param_file(path);
  bool quantized_file = false;
  for (const auto& p : pf.params)
    if (p.dtype == 1) quantized_file = true;
  if (quantized_file) {
    lm.q = std::make_unique<QuantizedModel>(load_quantized(path));
    lm.exec = std::make_unique<Int8Executor>(*lm.q);
  } else if (int8) {
    lm.q = std::make_unique<QuantizedModel>(load_model_quantized_on_load(path));
    lm.exec = std::make_unique<Int8Executor>(*lm.q);
  } else {
    lm.f32 = std::make_unique<TransformerModel>(load_params(path));
    lm.exec = std::make_unique<F32Executor>(*lm.f32);
  }
  lm.exec->workers = workers;
  return lm;
}

std::string sibling(const std::string& model_path, const std::string& name) {
  return (fs::path(model_path).parent_path() / name).string();
}

FactorScheme resolve_scheme(const TranslateArgs& a) {
  if (!a.case_scheme.empty()) return factor_scheme_from_string(a.case_scheme);
  std::string meta = sibling(a.model, "meta.json");
  if (fs::exists(meta)) {
    std::ifstream f(meta);
    json j = json::parse(f, nullptr, false);
    if (!j.is_discarded() && j.contains("factors_scheme"))
      return factor_scheme_from_string(j["factors_scheme"].get<std::string>());
  }
  return FactorScheme::kNone;
}

int run_translate(const TranslateArgs& a, bool benchmark) {
  LoadedModel lm = load_executor(a.model, a.int8, a.workers);
  const ModelConfig& config = lm.exec->config();

  auto vocab_path = [&](const std::string& override_path,
                        const std::string& name) {
    return override_path.empty() ? sibling(a.model, name) : override_path;
  };
  Vocabulary src_vocab = Vocabulary::load(vocab_path(a.src_vocab, "src.vocab"));
  Vocabulary tgt_vocab = Vocabulary::load(vocab_path(a.tgt_vocab, "tgt.vocab"));

  FactorScheme scheme = resolve_scheme(a);
  std::vector<Vocabulary> factor_vocabs;
  if (!config.factor_configs.empty()) {
    if (scheme == FactorScheme::kNone)
      throw UsageError("translate: model has factors; pass --case-scheme");
    if (scheme == FactorScheme::kSfCase)
      factor_vocabs.push_back(case_factor_vocabulary());
    else if (scheme == FactorScheme::kSfWordShare)
      factor_vocabs.push_back(src_vocab);
    else
      factor_vocabs.push_back(
          Vocabulary::load(vocab_path(a.factor_vocab, "factor0.vocab")));
  } else {
    scheme = FactorScheme::kNone;
  }

  TranslateOptions options;
  options.scheme = scheme;
  options.beam.beam_size = a.beam;
  options.beam.max_len = a.max_len;
  options.beam.length_penalty_alpha = a.alpha;
  options.shortlist_k = a.shortlist_k;
  options.parallel_sentences = a.parallel_sentences;
  ShortlistTable table;
  if (a.shortlist_k > 0) {
    std::string tpath = a.shortlist_table.empty()
                            ? sibling(a.model, "shortlist.txt")
                            : a.shortlist_table;
    table = ShortlistTable::load(tpath);
    options.shortlist_table = &table;
  }

  std::vector<std::string> lines = read_lines(a.input);
  int repeats = benchmark ? std::max(1, a.repeat) : 1;
  std::vector<std::string> out;
  LatencyReport aggregate;
  json per_repeat = json::array();
  for (int r = 0; r < repeats; ++r) {
    LatencyReport report;
    out = translate_corpus(*lm.exec, src_vocab, tgt_vocab, factor_vocabs,
                           lines, options, &report);
    per_repeat.push_back(json::parse(report.to_json()));
    aggregate.durations_s.insert(aggregate.durations_s.end(),
                                 report.durations_s.begin(),
                                 report.durations_s.end());
    aggregate.output_tokens += report.output_tokens;
    aggregate.total_time_s += report.total_time_s;
  }

  if (benchmark) {
    json j;
    j["repeats"] = per_repeat;
    j["aggregate"] = json::parse(aggregate.to_json());
    std::cout << j.dump(2) << "\n";
  } else {
    if (a.output == "-") {
      for (const auto& l : out) std::cout << l << "\n";
    } else {
      write_lines(a.output, out);
    }
  }
  if (!a.latency_out.empty()) {
    std::ofstream f(a.latency_out, std::ios::trunc);
    if (!f) throw IoError("cannot write latency report: " + a.latency_out);
    f << aggregate.to_json() << "\n";
  }
  return 0;
}

// ---- evaluate --------------------------------------------------------------

int cmd_evaluate(const std::string& hyp, const std::string& ref,
                 bool case_insensitive) {
  BleuScore s = bleu(read_lines(hyp), read_lines(ref), !case_insensitive);
  std::cout << s.to_json() << "\n";
  return 0;
}

void add_translate_flags(CLI::App* cmd, TranslateArgs& a) {
  cmd->add_option("--model", a.model, "Model file (f32 or quantized)")
      ->required();
  cmd->add_option("--input", a.input, "Input file, one sentence per line")
      ->required();
  cmd->add_flag("--int8", a.int8,
                "Quantize an f32 model at load time (quantized files always "
                "decode int8)");
  cmd->add_option("--beam", a.beam, "Beam size");
  cmd->add_option("--max-len", a.max_len,
                  "Decode length cap; 0 derives it from the source length");
  cmd->add_option("--alpha", a.alpha, "Length-normalization strength");
  cmd->add_option("--shortlist", a.shortlist_k,
                  "Vocabulary shortlist size; 0 disables");
  cmd->add_option("--shortlist-table", a.shortlist_table,
                  "Co-occurrence table (default: shortlist.txt next to the "
                  "model)");
  cmd->add_option("--case-scheme", a.case_scheme,
                  "none|sf-case|sf-word|sf-word-share (default: recorded at "
                  "training time)");
  cmd->add_option("--workers", a.workers, "Matmul worker threads");
  cmd->add_option("--src-vocab", a.src_vocab, "Override source vocabulary");
  cmd->add_option("--tgt-vocab", a.tgt_vocab, "Override target vocabulary");
  cmd->add_option("--factor-vocab", a.factor_vocab,
                  "Override factor vocabulary");
  cmd->add_option("--latency", a.latency_out, "Write a latency report JSON");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"minimt: a desk-scale neural machine translation toolkit"};
  app.require_subcommand(1);

  GenDataArgs gd;
  CLI::App* gen = app.add_subcommand("gen-data",
                                     "Generate a synthetic parallel corpus");
  gen->add_option("--task", gd.task, "copy|reverse|cipher");
  gen->add_option("--vocab-size", gd.vocab_size, "Synthetic vocabulary size");
  gen->add_option("--train", gd.train, "Training sentences");
  gen->add_option("--dev", gd.dev, "Validation sentences");
  gen->add_option("--test", gd.test, "Test sentences");
  gen->add_option("--len-lo", gd.len_lo, "Minimum sentence length");
  gen->add_option("--len-hi", gd.len_hi, "Maximum sentence length");
  gen->add_flag("--casing", gd.casing, "Randomly case the source tokens");
  gen->add_option("--seed", gd.seed, "Random seed");
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_flag("--force", gd.force, "Overwrite existing files");

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "Train a translation model");
  train->add_option("--train-src", ta.train_src, "Training source file")
      ->required();
  train->add_option("--train-tgt", ta.train_tgt, "Training target file")
      ->required();
  train->add_option("--dev-src", ta.dev_src, "Validation source file")
      ->required();
  train->add_option("--dev-tgt", ta.dev_tgt, "Validation target file")
      ->required();
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--config", ta.config_path,
                    "JSON config file (flags take precedence)");
  train->add_option("--encoder-layers", ta.encoder_layers, "Encoder depth");
  train->add_option("--decoder-layers", ta.decoder_layers, "Decoder depth");
  train->add_option("--d-model", ta.d_model, "Model width");
  train->add_option("--d-ff", ta.d_ff, "Feed-forward width");
  train->add_option("--heads", ta.heads, "Attention heads");
  train->add_option("--dropout", ta.dropout, "Dropout probability");
  train->add_option("--max-seq-len", ta.max_seq_len, "Length cap");
  train->add_option("--vocab-size", ta.vocab_size, "Vocabulary cap");
  train->add_option("--min-count", ta.min_count, "Minimum token count");
  train->add_option("--factors-scheme", ta.factors_scheme,
                    "none|sf-case|sf-word|sf-word-share");
  train->add_option("--factor-combine", ta.factor_combine,
                    "concat|sum|average");
  train->add_option("--factor-embed-dim", ta.factor_embed_dim,
                    "Factor embedding width (required for concat)");
  train->add_option("--scheduler", ta.scheduler, "inv-sqrt|plateau-reduce");
  train->add_option("--base-lr", ta.base_lr, "Base learning rate");
  train->add_option("--lr-scale-batches", ta.lr_scale_batches,
                    "Scale the learning rate by sqrt(N) for an N-fold batch");
  train->add_option("--warmup", ta.warmup, "Warmup steps");
  train->add_option("--effective-batch-tokens", ta.effective_batch_tokens,
                    "Tokens per parameter update");
  train->add_option("--micro-batch-tokens", ta.micro_batch_tokens,
                    "Tokens per micro-batch");
  train->add_option("--checkpoint-interval", ta.checkpoint_interval,
                    "Steps between checkpoints");
  train->add_option("--reduce-rate", ta.reduce_rate,
                    "Plateau learning-rate multiplier");
  train->add_option("--reduce-patience", ta.reduce_patience,
                    "Checkpoints before a reduction");
  train->add_option("--stop-patience", ta.stop_patience,
                    "Checkpoints before stopping");
  train->add_option("--average-best", ta.average_best,
                    "Checkpoints averaged into the final model");
  train->add_option("--max-steps", ta.max_steps, "Maximum update steps");
  train->add_option("--label-smoothing", ta.label_smoothing,
                    "Label smoothing mass");
  train->add_option("--seed", ta.seed, "Random seed");
  train->add_option("--stop-at-dev-ppl", ta.stop_at_dev_ppl,
                    "Stop early below this dev perplexity; 0 disables");

  std::string q_in, q_out;
  CLI::App* quant = app.add_subcommand("quantize",
                                       "Quantize a model file to int8");
  quant->add_option("--model", q_in, "Input f32 model")->required();
  quant->add_option("--out", q_out, "Output quantized model")->required();

  TranslateArgs tr;
  CLI::App* translate = app.add_subcommand("translate",
                                           "Translate a file, batch size 1");
  add_translate_flags(translate, tr);
  translate->add_option("--output", tr.output, "Output file, - for stdout");
  translate->add_option("--parallel-sentences", tr.parallel_sentences,
                        "Translate disjoint sentence subsets in parallel "
                        "(disables per-sentence latency)");

  std::string e_hyp, e_ref;
  bool e_ci = false;
  CLI::App* eval = app.add_subcommand("evaluate", "Corpus BLEU of a hypothesis "
                                                  "file against a reference");
  eval->add_option("--hyp", e_hyp, "Hypothesis file")->required();
  eval->add_option("--ref", e_ref, "Reference file")->required();
  eval->add_flag("--case-insensitive", e_ci, "Lowercase both sides");

  TranslateArgs ba;
  CLI::App* bench = app.add_subcommand("benchmark",
                                       "Repeat batch-1 translation and report "
                                       "latency statistics");
  add_translate_flags(bench, ba);
  bench->add_option("--repeat", ba.repeat, "Number of repetitions");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gd);
    if (train->parsed()) return cmd_train(train, ta);
    if (quant->parsed()) return cmd_quantize(q_in, q_out);
    if (translate->parsed()) return run_translate(tr, false);
    if (eval->parsed()) return cmd_evaluate(e_hyp, e_ref, e_ci);
    if (bench->parsed()) return run_translate(ba, true);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
