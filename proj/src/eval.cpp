#include "minimt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "json.hpp"

namespace minimt {

namespace {

std::string lower_ascii(std::string s) {
  for (char& c : s)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::map<std::string, long> ngram_counts(const TokenSeq& toks, int n) {
  std::map<std::string, long> counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      key += toks[i + j];
      key += '\x1f';
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace

std::string BleuScore::to_json() const {
  nlohmann::json j;
  j["bleu"] = score;
  j["precisions"] = {precisions[0], precisions[1], precisions[2], precisions[3]};
  j["brevity_penalty"] = brevity_penalty;
  j["hyp_len"] = hyp_len;
  j["ref_len"] = ref_len;
  return j.dump();
}

BleuScore bleu(const std::vector<std::string>& hypotheses,
               const std::vector<std::string>& references,
               bool case_sensitive) {
  if (hypotheses.size() != references.size())
    throw UsageError("bleu: hypothesis/reference line counts differ");
  BleuScore out;
  long matched[4] = {0, 0, 0, 0};
  long total[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    std::string h = case_sensitive ? hypotheses[i] : lower_ascii(hypotheses[i]);
    std::string r = case_sensitive ? references[i] : lower_ascii(references[i]);
    TokenSeq ht = tokenize(h), rt = tokenize(r);
    out.hyp_len += static_cast<long>(ht.size());
    out.ref_len += static_cast<long>(rt.size());
    for (int n = 1; n <= 4; ++n) {
      auto hc = ngram_counts(ht, n);
      auto rc = ngram_counts(rt, n);
      for (const auto& [gram, cnt] : hc) {
        total[n - 1] += cnt;
        auto it = rc.find(gram);
        if (it != rc.end()) matched[n - 1] += std::min(cnt, it->second);
      }
    }
  }
  double log_prec_sum = 0.0;
  bool zero = false;
  for (int n = 0; n < 4; ++n) {
    out.precisions[n] =
        total[n] > 0 ? static_cast<double>(matched[n]) / total[n] : 0.0;
    if (out.precisions[n] <= 0.0)
      zero = true;
    else
      log_prec_sum += std::log(out.precisions[n]);
  }
  out.brevity_penalty =
      (out.hyp_len >= out.ref_len || out.hyp_len == 0)
          ? 1.0
          : std::exp(1.0 - static_cast<double>(out.ref_len) / out.hyp_len);
  out.score =
      zero ? 0.0 : out.brevity_penalty * std::exp(log_prec_sum / 4.0) * 100.0;
  return out;
}

double sequence_nll(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rows() != static_cast<Index>(targets.size()))
    throw ShapeError("sequence_nll: logits rows vs target length");
  double nll = 0.0;
  auto m = logits.mat();
  for (Index t = 0; t < m.rows(); ++t) {
    int tgt = targets[static_cast<std::size_t>(t)];
    if (tgt < 0 || tgt >= m.cols()) throw IndexError("sequence_nll: bad target");
    double mx = m.row(t).maxCoeff();
    double lse = 0.0;
    for (Index j = 0; j < m.cols(); ++j) lse += std::exp(m(t, j) - mx);
    nll += -(m(t, tgt) - mx - std::log(lse));
  }
  return nll;
}

double perplexity(const TransformerModel& m, const BatchSet& data) {
  double nll = 0.0;
  long tokens = 0;
  for (const auto& batch : data.batches) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      BatchSentence s = batch.sentence(i);
      Tensor logits = forward_teacher_forced(m, s.src_ids, s.factor_ids,
                                             s.tgt_ids);
      nll += sequence_nll(logits, s.tgt_ids);
      tokens += static_cast<long>(s.tgt_ids.size());
    }
  }
  if (tokens == 0) throw UsageError("perplexity: empty corpus");
  return std::exp(nll / tokens);
}

double percentile(std::vector<double> durations, double p) {
  if (durations.empty()) throw UsageError("percentile: empty list");
  if (p <= 0.0 || p > 100.0) throw UsageError("percentile: need 0 < p <= 100");
  std::sort(durations.begin(), durations.end());
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(p / 100.0 * static_cast<double>(durations.size())));
  if (rank == 0) rank = 1;
  return durations[rank - 1];
}

}  // namespace minimt
