#pragma once

#include <string>
#include <vector>

#include "mtl/tensor.hpp"

namespace mtl::metrics {

using TokenSeq = std::vector<int>;

struct MetricsReport {
  double bleu4 = 0.0;
  double cider = 0.0;
  double acc = 0.0;
  double map = 0.0;
  double recall = 0.0;
  std::string split;  // "SD" | "TD"
  int n_samples = 0;
};

// Corpus BLEU-4: clipped modified n-gram precisions, geometric mean, brevity
// penalty. PAD/BOS/EOS are stripped first. Zero unigram overlap scores 0;
// zero counts at higher orders get add-epsilon smoothing.
double bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
            int max_n = 4);

// Exposed for the hand-computed clipped-count cases.
double modified_precision(const std::vector<TokenSeq>& candidates,
                          const std::vector<TokenSeq>& references, int n);

// TF-IDF n-gram cosine (n=1..4) averaged and scaled by 10; IDF over the
// reference corpus.
double cider(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references);

struct InteractionMetrics {
  double acc = 0.0;
  double map = 0.0;
  double recall = 0.0;
};

// acc: exact multi-hot match per edge at the threshold. map: mean over
// classes with >=1 positive of ranked average precision. recall: micro
// TP/(TP+FN) at the threshold.
InteractionMetrics interaction_metrics(const Tensor& edge_scores, const Tensor& edge_labels,
                                       double threshold = 0.5);

TokenSeq strip_special(const TokenSeq& toks);

}  // namespace mtl::metrics
