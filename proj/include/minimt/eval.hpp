#pragma once

#include <string>
#include <vector>

#include "minimt/data.hpp"
#include "minimt/model.hpp"

namespace minimt {

struct BleuScore {
  double score = 0.0;  // [0, 100]
  double precisions[4] = {0, 0, 0, 0};
  double brevity_penalty = 1.0;
  long hyp_len = 0;
  long ref_len = 0;

  std::string to_json() const;
};

// Corpus-level BLEU-4: clipped n-gram counts, exponential brevity penalty,
// no smoothing (any zero precision gives 0). Whitespace tokenization.
BleuScore bleu(const std::vector<std::string>& hypotheses,
               const std::vector<std::string>& references,
               bool case_sensitive = true);

// Sum of token negative log-likelihoods under row-softmax logits.
double sequence_nll(const Tensor& logits, const std::vector<int>& targets);

// exp(total unsmoothed NLL / total non-pad target tokens).
double perplexity(const TransformerModel& m, const BatchSet& data);

// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
double percentile(std::vector<double> durations, double p);

}  // namespace minimt
