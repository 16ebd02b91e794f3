#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "minimt/model.hpp"

namespace minimt {

using TokenSeq = std::vector<std::string>;

std::vector<std::string> tokenize(const std::string& line);
std::string detokenize(const TokenSeq& tokens);

/// Token/id bijection with reserved ids 0..3 (PAD, UNK, BOS, EOS).
class Vocabulary {
 public:
  Vocabulary();

  int add(const std::string& token);  // idempotent
  int id(const std::string& token) const;  // UNK when missing
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }

  std::vector<int> encode(const TokenSeq& tokens) const;
  TokenSeq decode(const std::vector<int>& ids) const;

  // One non-reserved token per line; id = line number - 1 + 4.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

struct ParallelCorpus {
  std::vector<TokenSeq> src;
  std::vector<TokenSeq> tgt;
  // factors[sentence][stream][token]; streams token-aligned with src.
  std::vector<std::vector<TokenSeq>> factors;

  std::size_t size() const { return src.size(); }
};

// Most-frequent tokens kept, ties broken lexicographically.
Vocabulary build_vocab(const std::vector<TokenSeq>& side, int max_size,
                       int min_count = 1);

struct BatchSentence {
  std::vector<int> src_ids;                  // with trailing EOS
  std::vector<std::vector<int>> factor_ids;  // aligned with src_ids
  std::vector<int> tgt_ids;                  // with trailing EOS
};

/// Length-bucketed padded batch. Mask entries are 1 for real tokens.
struct Batch {
  std::vector<std::vector<int>> src_ids, tgt_ids;
  std::vector<std::vector<std::uint8_t>> src_mask, tgt_mask;
  std::vector<std::vector<std::vector<int>>> factor_ids;
  long src_tokens = 0;
  long tgt_tokens = 0;  // non-pad target tokens, the normalization count

  std::size_t size() const { return src_ids.size(); }
  BatchSentence sentence(std::size_t i) const;
};

struct BatchSet {
  std::vector<Batch> batches;
  int skipped = 0;  // sentences dropped for exceeding max_seq_len
};

// Factor streams are encoded with their own vocabularies and get an EOS id
// at the source EOS position so they stay token-aligned.
BatchSet make_batches(const ParallelCorpus& corpus, const Vocabulary& src_vocab,
                      const Vocabulary& tgt_vocab,
                      const std::vector<Vocabulary>& factor_vocabs,
                      long tokens_per_batch, int max_seq_len);

enum class CaseTransform { kOri, kLower, kCap, kUpp };
CaseTransform case_transform_from_string(const std::string& s);

std::vector<std::string> transform_test_set(const std::vector<std::string>& lines,
                                            CaseTransform mode);
std::string transform_line(const std::string& line, CaseTransform mode);

enum class TaskKind { kCopy, kReverse, kCipher };
TaskKind task_kind_from_string(const std::string& s);

// Synthetic desk-scale parallel data. With casing=true every source token is
// randomly rendered in one of the four case categories while the target
// stays lowercase.
ParallelCorpus generate_task(TaskKind kind, int vocab_size, int sentence_count,
                             int len_lo, int len_hi, bool casing,
                             std::uint64_t seed);

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);

}  // namespace minimt
