#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "minimt/data.hpp"
#include "minimt/model.hpp"

namespace minimt {

/// Beam-search partial translation. Tokens are generated target ids without
/// BOS/EOS; finished hypotheses are never extended.
struct Hypothesis {
  std::vector<int> tokens;
  float logprob = 0.0f;
  bool finished = false;
  bool truncated = false;  // no finished hypothesis within max_len
  DecoderState state;

  // GNMT length normalization: logprob / ((5+len)/6)^alpha with len counting
  // generated tokens plus EOS.
  float normalized_score(float alpha) const;
};

struct BeamConfig {
  int beam_size = 4;
  int max_len = 64;
  float length_penalty_alpha = 1.0f;
};

// Shortlist rows, when given, restrict the scored target vocabulary; ids in
// the returned hypothesis are full-vocabulary ids either way.
Hypothesis beam_search(const Executor& ex, const std::vector<int>& src_ids,
                       const std::vector<std::vector<int>>& factor_ids,
                       const BeamConfig& config,
                       const std::vector<int>* shortlist = nullptr);

/// source-token-id -> target candidates ranked by co-occurrence count
/// (ties by lower target id), built from the training parallel corpus.
struct ShortlistTable {
  std::unordered_map<int, std::vector<std::pair<int, long>>> candidates;

  void save(const std::string& path) const;
  static ShortlistTable load(const std::string& path);
};

ShortlistTable build_cooccurrence_table(const ParallelCorpus& corpus,
                                        const Vocabulary& src_vocab,
                                        const Vocabulary& tgt_vocab);

// Sorted id set of size <= k: the four special tokens plus the top
// co-occurrence candidates of the sentence's source tokens. k <= 0 or
// k >= tgt_vocab_size yields the full vocabulary.
std::vector<int> build_shortlist(const ShortlistTable& table,
                                 const std::vector<int>& src_ids, int k,
                                 int tgt_vocab_size);

enum class FactorScheme { kNone, kSfCase, kSfWord, kSfWordShare };
FactorScheme factor_scheme_from_string(const std::string& s);
std::string to_string(FactorScheme s);

extern const char* kCaseCategoryNames[4];  // lowercase capitalized all_uppercase mixed

// Case category of one token: no uppercase -> lowercase; leading uppercase
// with no other uppercase -> capitalized; no lowercase -> all_uppercase;
// anything else -> mixed. Tokens without letters are lowercase.
std::string case_category(const std::string& token);

struct FactoredInput {
  TokenSeq words;
  std::vector<TokenSeq> factors;  // one stream per factor, token-aligned
};

FactoredInput apply_case_factors(const std::string& line, FactorScheme scheme);

// Vocabulary for the case-category factor (4 reserved + 4 categories).
Vocabulary case_factor_vocabulary();

struct LatencyReport {
  std::vector<double> durations_s;  // per sentence, sequential mode only
  long output_tokens = 0;
  double total_time_s = 0.0;

  int count() const { return static_cast<int>(durations_s.size()); }
  double p50_ms() const;
  double p90_ms() const;
  double mean_ms() const;
  double tokens_per_sec() const;
  std::string to_json() const;
};

struct TranslateOptions {
  FactorScheme scheme = FactorScheme::kNone;
  BeamConfig beam;
  int shortlist_k = 0;  // 0 disables shortlisting
  const ShortlistTable* shortlist_table = nullptr;
  int parallel_sentences = 1;  // >1 disables per-sentence latency
};

// Monotonic seconds; injectable for deterministic latency tests.
using Clock = std::function<double()>;
Clock steady_clock_seconds();

// Translates one sentence per line, batch size 1. Per-sentence wall time
// wraps preprocessing, search, and detokenization. Failed sentences emit an
// empty line and the run continues.
std::vector<std::string> translate_corpus(
    const Executor& ex, const Vocabulary& src_vocab,
    const Vocabulary& tgt_vocab, const std::vector<Vocabulary>& factor_vocabs,
    const std::vector<std::string>& lines, const TranslateOptions& options,
    LatencyReport* report = nullptr, Clock clock = {});

}  // namespace minimt
