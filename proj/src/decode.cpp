#include "minimt/decode.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <thread>

#include "json.hpp"
#include "minimt/eval.hpp"

namespace minimt {

float Hypothesis::normalized_score(float alpha) const {
  float len = static_cast<float>(tokens.size()) + 1.0f;  // + EOS
  return logprob / std::pow((5.0f + len) / 6.0f, alpha);
}

namespace {

Eigen::VectorXf log_softmax_row(const Tensor& logits) {
  Eigen::VectorXf row = logits.mat().row(0).transpose();
  float mx = row.maxCoeff();
  float lse = std::log((row.array() - mx).exp().sum()) + mx;
  return row.array() - lse;
}

}  // namespace

Hypothesis beam_search(const Executor& ex, const std::vector<int>& src_ids,
                       const std::vector<std::vector<int>>& factor_ids,
                       const BeamConfig& config,
                       const std::vector<int>* shortlist) {
  if (config.beam_size < 1) throw UsageError("beam_search: beam size >= 1");
  if (src_ids.empty()) throw UsageError("beam_search: empty source");
  Tensor enc = encode_infer(ex, embed_source_infer(ex, src_ids, factor_ids));

  Hypothesis root;
  root.state = init_decoder(ex, enc);
  std::vector<Hypothesis> live{root};
  std::vector<Hypothesis> finished;
  float alpha = config.length_penalty_alpha;

  for (int step = 0; step < config.max_len && !live.empty(); ++step) {
    struct Candidate {
      std::size_t parent;
      int token;  // full-vocab id
      float logprob;
    };
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < live.size(); ++h) {
      int prev = live[h].tokens.empty() ? kBosId : live[h].tokens.back();
      Tensor logits = decode_step(live[h].state, prev, shortlist);
      Eigen::VectorXf logp = log_softmax_row(logits);
      for (Index j = 0; j < logp.size(); ++j) {
        int tok = shortlist ? (*shortlist)[j] : static_cast<int>(j);
        candidates.push_back({h, tok, live[h].logprob + logp[j]});
      }
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const Candidate& a, const Candidate& b) {
                if (a.logprob != b.logprob) return a.logprob > b.logprob;
                if (a.parent != b.parent) return a.parent < b.parent;
                return a.token < b.token;
              });
    std::vector<Hypothesis> next;
    int selected = 0;
    for (const Candidate& c : candidates) {
      if (selected >= config.beam_size) break;
      ++selected;
      Hypothesis h = live[c.parent];
      h.logprob = c.logprob;
      if (c.token == kEosId) {
        h.finished = true;
        h.state = DecoderState{};
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }

  if (!finished.empty()) {
    auto best = std::max_element(
        finished.begin(), finished.end(),
        [alpha](const Hypothesis& a, const Hypothesis& b) {
          return a.normalized_score(alpha) < b.normalized_score(alpha);
        });
    Hypothesis out = *best;
    out.state = DecoderState{};
    return out;
  }
  // no hypothesis finished within max_len: return the best unfinished one
  auto best = std::max_element(live.begin(), live.end(),
                               [alpha](const Hypothesis& a, const Hypothesis& b) {
                                 return a.normalized_score(alpha) <
                                        b.normalized_score(alpha);
                               });
  Hypothesis out = *best;
  out.truncated = true;
  out.state = DecoderState{};
  return out;
}

// ---- shortlist -------------------------------------------------------------

ShortlistTable build_cooccurrence_table(const ParallelCorpus& corpus,
                                        const Vocabulary& src_vocab,
                                        const Vocabulary& tgt_vocab) {
  std::map<int, std::map<int, long>> counts;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<int> src = src_vocab.encode(corpus.src[i]);
    std::vector<int> tgt = tgt_vocab.encode(corpus.tgt[i]);
    for (int s : src)
      for (int t : tgt) ++counts[s][t];
  }
  ShortlistTable table;
  for (const auto& [s, tmap] : counts) {
    std::vector<std::pair<int, long>> ranked(tmap.begin(), tmap.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    table.candidates[s] = std::move(ranked);
  }
  return table;
}

std::vector<int> build_shortlist(const ShortlistTable& table,
                                 const std::vector<int>& src_ids, int k,
                                 int tgt_vocab_size) {
  std::vector<int> full;
  if (k <= 0 || k >= tgt_vocab_size) {
    full.resize(tgt_vocab_size);
    for (int i = 0; i < tgt_vocab_size; ++i) full[i] = i;
    return full;
  }
  // merge candidates of all source tokens, keeping each target's best count
  std::map<int, long> merged;
  for (int s : src_ids) {
    auto it = table.candidates.find(s);
    if (it == table.candidates.end()) continue;  // unknown source token
    for (const auto& [t, c] : it->second) {
      auto& cur = merged[t];
      cur = std::max(cur, c);
    }
  }
  std::vector<std::pair<int, long>> ranked(merged.begin(), merged.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::set<int> result{kPadId, kUnkId, kBosId, kEosId};
  for (const auto& [t, c] : ranked) {
    if (static_cast<int>(result.size()) >= k) break;
    if (t < tgt_vocab_size) result.insert(t);
  }
  return std::vector<int>(result.begin(), result.end());
}

void ShortlistTable::save(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write shortlist table: " + path);
  for (const auto& [s, ranked] : std::map<int, std::vector<std::pair<int, long>>>(
           candidates.begin(), candidates.end())) {
    f << s;
    for (const auto& [t, c] : ranked) f << ' ' << t << ':' << c;
    f << '\n';
  }
}

ShortlistTable ShortlistTable::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read shortlist table: " + path);
  ShortlistTable table;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    int s;
    ss >> s;
    std::string entry;
    auto& ranked = table.candidates[s];
    while (ss >> entry) {
      auto colon = entry.find(':');
      if (colon == std::string::npos)
        throw FormatError("bad shortlist entry: " + entry);
      ranked.emplace_back(std::stoi(entry.substr(0, colon)),
                          std::stol(entry.substr(colon + 1)));
    }
  }
  return table;
}

// ---- case factors ------------------------------------------------------

const char* kCaseCategoryNames[4] = {"lowercase", "capitalized",
                                     "all_uppercase", "mixed"};

FactorScheme factor_scheme_from_string(const std::string& s) {
  if (s == "none") return FactorScheme::kNone;
  if (s == "sf-case" || s == "sf_case") return FactorScheme::kSfCase;
  if (s == "sf-word" || s == "sf_word") return FactorScheme::kSfWord;
  if (s == "sf-word-share" || s == "sf_word_share")
    return FactorScheme::kSfWordShare;
  throw UsageError("unknown factor scheme: " + s);
}

std::string to_string(FactorScheme s) {
  switch (s) {
    case FactorScheme::kNone: return "none";
    case FactorScheme::kSfCase: return "sf-case";
    case FactorScheme::kSfWord: return "sf-word";
    case FactorScheme::kSfWordShare: return "sf-word-share";
  }
  return "none";
}

std::string case_category(const std::string& token) {
  bool has_upper = false, has_lower = false, first_is_upper = false,
       upper_after_first = false;
  for (std::size_t i = 0; i < token.size(); ++i) {
    unsigned char c = static_cast<unsigned char>(token[i]);
    if (std::isupper(c)) {
      has_upper = true;
      if (i == 0)
        first_is_upper = true;
      else
        upper_after_first = true;
    } else if (std::islower(c)) {
      has_lower = true;
    }
  }
  if (!has_upper) return kCaseCategoryNames[0];
  if (first_is_upper && !upper_after_first) return kCaseCategoryNames[1];
  if (!has_lower) return kCaseCategoryNames[2];
  return kCaseCategoryNames[3];
}

Vocabulary case_factor_vocabulary() {
  Vocabulary v;
  for (const char* name : kCaseCategoryNames) v.add(name);
  return v;
}

namespace {

std::string lower_ascii(std::string s) {
  for (char& c : s)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

FactoredInput apply_case_factors(const std::string& line, FactorScheme scheme) {
  FactoredInput out;
  out.words = tokenize(line);
  if (scheme == FactorScheme::kNone) return out;
  TokenSeq factor;
  factor.reserve(out.words.size());
  for (auto& w : out.words) {
    if (scheme == FactorScheme::kSfCase)
      factor.push_back(case_category(w));
    else
      factor.push_back(w);  // the original cased token itself
    w = lower_ascii(w);
  }
  out.factors.push_back(std::move(factor));
  return out;
}

// ---- corpus translation ------------------------------------------------

double LatencyReport::p50_ms() const {
  return durations_s.empty() ? 0.0 : percentile(durations_s, 50.0) * 1000.0;
}

double LatencyReport::p90_ms() const {
  return durations_s.empty() ? 0.0 : percentile(durations_s, 90.0) * 1000.0;
}

double LatencyReport::mean_ms() const {
  if (durations_s.empty()) return 0.0;
  double sum = 0.0;
  for (double d : durations_s) sum += d;
  return sum / durations_s.size() * 1000.0;
}

double LatencyReport::tokens_per_sec() const {
  return total_time_s > 0.0 ? output_tokens / total_time_s : 0.0;
}

std::string LatencyReport::to_json() const {
  nlohmann::json j;
  j["count"] = count();
  j["p50_ms"] = p50_ms();
  j["p90_ms"] = p90_ms();
  j["mean_ms"] = mean_ms();
  j["tokens_per_sec"] = tokens_per_sec();
  return j.dump();
}

Clock steady_clock_seconds() {
  return [] {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
  };
}

namespace {

std::string translate_one(const Executor& ex, const Vocabulary& src_vocab,
                          const Vocabulary& tgt_vocab,
                          const std::vector<Vocabulary>& factor_vocabs,
                          const std::string& line,
                          const TranslateOptions& options, long* out_tokens) {
  FactoredInput input = apply_case_factors(line, options.scheme);
  std::vector<int> src_ids = src_vocab.encode(input.words);
  src_ids.push_back(kEosId);
  // overlength inference inputs are truncated, not dropped
  int limit = ex.config().max_seq_len;
  if (static_cast<int>(src_ids.size()) > limit) {
    src_ids.resize(limit - 1);
    src_ids.push_back(kEosId);
  }
  std::vector<std::vector<int>> factor_ids;
  for (std::size_t f = 0; f < input.factors.size(); ++f) {
    if (f >= factor_vocabs.size())
      throw UsageError("translate: factor vocabulary missing");
    std::vector<int> ids = factor_vocabs[f].encode(input.factors[f]);
    ids.push_back(kEosId);
    ids.resize(src_ids.size(), kEosId);
    factor_ids.push_back(std::move(ids));
  }
  std::vector<int> shortlist;
  const std::vector<int>* shortlist_ptr = nullptr;
  if (options.shortlist_k > 0 && options.shortlist_table) {
    shortlist = build_shortlist(*options.shortlist_table, src_ids,
                                options.shortlist_k,
                                ex.config().tgt_vocab_size);
    if (static_cast<int>(shortlist.size()) < ex.config().tgt_vocab_size)
      shortlist_ptr = &shortlist;
  }
  BeamConfig beam = options.beam;
  if (beam.max_len <= 0)
    beam.max_len = std::min<int>(ex.config().max_seq_len,
                                 static_cast<int>(src_ids.size()) * 2 + 5);
  Hypothesis best = beam_search(ex, src_ids, factor_ids, beam, shortlist_ptr);
  *out_tokens = static_cast<long>(best.tokens.size());
  return detokenize(tgt_vocab.decode(best.tokens));
}

}  // namespace

std::vector<std::string> translate_corpus(
    const Executor& ex, const Vocabulary& src_vocab,
    const Vocabulary& tgt_vocab, const std::vector<Vocabulary>& factor_vocabs,
    const std::vector<std::string>& lines, const TranslateOptions& options,
    LatencyReport* report, Clock clock) {
  if (!clock) clock = steady_clock_seconds();
  std::vector<std::string> out(lines.size());
  if (options.parallel_sentences > 1) {
    // parallel mode: disjoint sentence subsets, no per-sentence latency
    int nw = options.parallel_sentences;
    std::vector<std::thread> pool;
    std::size_t chunk = (lines.size() + nw - 1) / nw;
    double start = clock();
    std::vector<long> tokens(nw, 0);
    for (int w = 0; w < nw; ++w) {
      std::size_t lo = w * chunk, hi = std::min(lines.size(), lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&, w, lo, hi] {
        for (std::size_t i = lo; i < hi; ++i) {
          long n = 0;
          try {
            out[i] = translate_one(ex, src_vocab, tgt_vocab, factor_vocabs,
                                   lines[i], options, &n);
          } catch (const std::exception&) {
            out[i].clear();
          }
          tokens[w] += n;
        }
      });
    }
    for (auto& t : pool) t.join();
    if (report) {
      report->total_time_s = clock() - start;
      for (long n : tokens) report->output_tokens += n;
    }
    return out;
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    long n = 0;
    double t0 = clock();
    try {
      out[i] = translate_one(ex, src_vocab, tgt_vocab, factor_vocabs, lines[i],
                             options, &n);
    } catch (const std::exception& e) {
      std::cerr << "translate: sentence " << i + 1 << " failed: " << e.what()
                << "\n";
      out[i].clear();
    }
    double dt = clock() - t0;
    if (report) {
      report->durations_s.push_back(dt);
      report->total_time_s += dt;
      report->output_tokens += n;
    }
  }
  return out;
}

}  // namespace minimt
