#include "minimt/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace minimt {

namespace {

const char* kReserved[4] = {"<pad>", "<unk>", "<s>", "</s>"};

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// Base-26 word of length >= 2 for token index i ("aa", "ab", ...).
std::string synth_word(int i) {
  std::string w;
  int n = i;
  do {
    w.push_back(static_cast<char>('a' + n % 26));
    n /= 26;
  } while (n > 0);
  if (w.size() < 2) w.push_back('a');
  std::reverse(w.begin(), w.end());
  return w;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

std::string detokenize(const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* r : kReserved) {
    token_to_id_.emplace(r, static_cast<int>(id_to_token_.size()));
    id_to_token_.push_back(r);
  }
}

int Vocabulary::add(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  int id = static_cast<int>(id_to_token_.size());
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(token);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) > 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("vocabulary id out of range");
  return id_to_token_[id];
}

std::vector<int> Vocabulary::encode(const TokenSeq& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

TokenSeq Vocabulary::decode(const std::vector<int>& ids) const {
  TokenSeq out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write vocabulary: " + path);
  for (int i = 4; i < size(); ++i) f << id_to_token_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read vocabulary: " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) v.add(line);
  return v;
}

Vocabulary build_vocab(const std::vector<TokenSeq>& side, int max_size,
                       int min_count) {
  if (side.empty()) throw UsageError("build_vocab: empty corpus");
  std::map<std::string, long> counts;
  for (const auto& sent : side)
    for (const auto& tok : sent) ++counts[tok];
  std::vector<std::pair<std::string, long>> items(counts.begin(), counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, cnt] : items) {
    if (v.size() >= max_size) break;
    if (cnt < min_count) break;
    v.add(tok);
  }
  return v;
}

BatchSentence Batch::sentence(std::size_t i) const {
  BatchSentence s;
  for (std::size_t t = 0; t < src_ids[i].size(); ++t)
    if (src_mask[i][t]) s.src_ids.push_back(src_ids[i][t]);
  for (std::size_t t = 0; t < tgt_ids[i].size(); ++t)
    if (tgt_mask[i][t]) s.tgt_ids.push_back(tgt_ids[i][t]);
  if (!factor_ids.empty()) {
    s.factor_ids.resize(factor_ids[i].size());
    for (std::size_t f = 0; f < factor_ids[i].size(); ++f)
      for (std::size_t t = 0; t < s.src_ids.size(); ++t)
        s.factor_ids[f].push_back(factor_ids[i][f][t]);
  }
  return s;
}

BatchSet make_batches(const ParallelCorpus& corpus, const Vocabulary& src_vocab,
                      const Vocabulary& tgt_vocab,
                      const std::vector<Vocabulary>& factor_vocabs,
                      long tokens_per_batch, int max_seq_len) {
  if (corpus.src.size() != corpus.tgt.size())
    throw UsageError("make_batches: unaligned corpus");
  BatchSet out;
  std::vector<BatchSentence> sentences;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    BatchSentence s;
    s.src_ids = src_vocab.encode(corpus.src[i]);
    s.src_ids.push_back(kEosId);
    s.tgt_ids = tgt_vocab.encode(corpus.tgt[i]);
    s.tgt_ids.push_back(kEosId);
    if (!factor_vocabs.empty()) {
      if (corpus.factors.size() <= i ||
          corpus.factors[i].size() != factor_vocabs.size())
        throw UsageError("make_batches: missing factor streams");
      for (std::size_t f = 0; f < factor_vocabs.size(); ++f) {
        if (corpus.factors[i][f].size() != corpus.src[i].size())
          throw UsageError("make_batches: factor stream misaligned");
        s.factor_ids.push_back(factor_vocabs[f].encode(corpus.factors[i][f]));
        s.factor_ids.back().push_back(kEosId);
      }
    }
    if (static_cast<int>(s.src_ids.size()) > max_seq_len ||
        static_cast<int>(s.tgt_ids.size()) > max_seq_len) {
      ++out.skipped;
      continue;
    }
    if (static_cast<long>(s.tgt_ids.size()) > tokens_per_batch)
      throw UsageError("make_batches: tokens_per_batch below sentence length");
    sentences.push_back(std::move(s));
  }
  // Bucket by length so padding stays small; stable within a length.
  std::stable_sort(sentences.begin(), sentences.end(),
                   [](const BatchSentence& a, const BatchSentence& b) {
                     return a.tgt_ids.size() < b.tgt_ids.size();
                   });
  std::size_t i = 0;
  while (i < sentences.size()) {
    Batch b;
    long tgt_count = 0;
    std::size_t src_max = 0, tgt_max = 0;
    std::vector<const BatchSentence*> members;
    while (i < sentences.size() &&
           tgt_count + static_cast<long>(sentences[i].tgt_ids.size()) <=
               tokens_per_batch) {
      members.push_back(&sentences[i]);
      tgt_count += static_cast<long>(sentences[i].tgt_ids.size());
      src_max = std::max(src_max, sentences[i].src_ids.size());
      tgt_max = std::max(tgt_max, sentences[i].tgt_ids.size());
      ++i;
    }
    for (const BatchSentence* s : members) {
      std::vector<int> src = s->src_ids;
      std::vector<std::uint8_t> smask(src.size(), 1);
      src.resize(src_max, kPadId);
      smask.resize(src_max, 0);
      std::vector<int> tgt = s->tgt_ids;
      std::vector<std::uint8_t> tmask(tgt.size(), 1);
      tgt.resize(tgt_max, kPadId);
      tmask.resize(tgt_max, 0);
      b.src_tokens += static_cast<long>(s->src_ids.size());
      b.tgt_tokens += static_cast<long>(s->tgt_ids.size());
      b.src_ids.push_back(std::move(src));
      b.src_mask.push_back(std::move(smask));
      b.tgt_ids.push_back(std::move(tgt));
      b.tgt_mask.push_back(std::move(tmask));
      std::vector<std::vector<int>> fpadded;
      for (const auto& fs : s->factor_ids) {
        std::vector<int> f = fs;
        f.resize(src_max, kPadId);
        fpadded.push_back(std::move(f));
      }
      b.factor_ids.push_back(std::move(fpadded));
    }
    out.batches.push_back(std::move(b));
  }
  return out;
}

CaseTransform case_transform_from_string(const std::string& s) {
  if (s == "Ori" || s == "ori" || s == "none") return CaseTransform::kOri;
  if (s == "lower") return CaseTransform::kLower;
  if (s == "Cap" || s == "cap") return CaseTransform::kCap;
  if (s == "UPP" || s == "upp") return CaseTransform::kUpp;
  throw UsageError("unknown case transform: " + s);
}

std::string transform_line(const std::string& line, CaseTransform mode) {
  switch (mode) {
    case CaseTransform::kOri:
      return line;
    case CaseTransform::kLower:
      return lower(line);
    case CaseTransform::kUpp:
      return upper(line);
    case CaseTransform::kCap: {
      TokenSeq toks = tokenize(line);
      for (auto& t : toks) {
        t = lower(t);
        if (!t.empty())
          t[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(t[0])));
      }
      return detokenize(toks);
    }
  }
  return line;
}

std::vector<std::string> transform_test_set(const std::vector<std::string>& lines,
                                            CaseTransform mode) {
  std::vector<std::string> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(transform_line(l, mode));
  return out;
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::kCopy;
  if (s == "reverse") return TaskKind::kReverse;
  if (s == "cipher") return TaskKind::kCipher;
  throw UsageError("unknown task kind: " + s);
}

ParallelCorpus generate_task(TaskKind kind, int vocab_size, int sentence_count,
                             int len_lo, int len_hi, bool casing,
                             std::uint64_t seed) {
  if (vocab_size < 2) throw UsageError("generate_task: vocab_size must be >= 2");
  if (len_lo < 1 || len_hi < len_lo)
    throw UsageError("generate_task: invalid length range");
  std::vector<std::string> words;
  for (int i = 0; i < vocab_size; ++i) words.push_back(synth_word(i));
  Rng rng(seed);
  std::vector<int> cipher(vocab_size);
  for (int i = 0; i < vocab_size; ++i) cipher[i] = i;
  if (kind == TaskKind::kCipher)
    std::shuffle(cipher.begin(), cipher.end(), rng.engine());
  ParallelCorpus corpus;
  for (int s = 0; s < sentence_count; ++s) {
    int len = len_lo + static_cast<int>(rng.next() % (len_hi - len_lo + 1));
    std::vector<int> ids(len);
    for (int& id : ids) id = static_cast<int>(rng.next() % vocab_size);
    TokenSeq src, tgt;
    for (int id : ids) src.push_back(words[id]);
    switch (kind) {
      case TaskKind::kCopy:
        tgt = src;
        break;
      case TaskKind::kReverse:
        tgt = src;
        std::reverse(tgt.begin(), tgt.end());
        break;
      case TaskKind::kCipher:
        for (int id : ids) tgt.push_back(words[cipher[id]]);
        break;
    }
    if (casing) {
      for (auto& w : src) {
        switch (rng.next() % 4) {
          case 0: break;  // lowercase
          case 1:
            w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
            break;  // capitalized
          case 2:
            w = upper(w);
            break;  // all uppercase
          case 3:  // mixed: second letter uppercased, first kept lower
            w[1] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[1])));
            break;
        }
      }
    }
    corpus.src.push_back(std::move(src));
    corpus.tgt.push_back(std::move(tgt));
  }
  return corpus;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write: " + path);
  for (const auto& l : lines) f << l << '\n';
}

}  // namespace minimt
