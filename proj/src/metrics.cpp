#include "mtl/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace mtl::metrics {

namespace {

constexpr int kPad = 0, kBos = 1, kEos = 2;
constexpr double kEps = 1e-12;

using Ngram = std::vector<int>;

std::map<Ngram, int> ngram_counts(const TokenSeq& s, int n) {
  std::map<Ngram, int> out;
  if (static_cast<int>(s.size()) < n) return out;
  for (size_t i = 0; i + n <= s.size(); ++i)
    ++out[Ngram(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i) + n)];
  return out;
}

}  // namespace

TokenSeq strip_special(const TokenSeq& toks) {
  TokenSeq out;
  for (int t : toks)
    if (t != kPad && t != kBos && t != kEos) out.push_back(t);
  return out;
}

double modified_precision(const std::vector<TokenSeq>& candidates,
                          const std::vector<TokenSeq>& references, int n) {
  long long clipped = 0, total = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    auto cc = ngram_counts(strip_special(candidates[i]), n);
    auto rc = ngram_counts(strip_special(references[i]), n);
    for (const auto& [ng, count] : cc) {
      total += count;
      auto it = rc.find(ng);
      if (it != rc.end()) clipped += std::min(count, it->second);
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(clipped) / static_cast<double>(total);
}

double bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
            int max_n) {
  if (candidates.empty()) throw std::invalid_argument("bleu: empty candidate set");
  if (candidates.size() != references.size())
    throw std::invalid_argument("bleu: candidate/reference count mismatch");
  long long cand_len = 0, ref_len = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    auto c = strip_special(candidates[i]);
    if (c.empty()) throw std::invalid_argument("bleu: candidate empty after stripping");
    cand_len += static_cast<long long>(c.size());
    ref_len += static_cast<long long>(strip_special(references[i]).size());
  }

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    long long clipped = 0, total = 0;
    for (size_t i = 0; i < candidates.size(); ++i) {
      auto cc = ngram_counts(strip_special(candidates[i]), n);
      auto rc = ngram_counts(strip_special(references[i]), n);
      for (const auto& [ng, count] : cc) {
        total += count;
        auto it = rc.find(ng);
        if (it != rc.end()) clipped += std::min(count, it->second);
      }
    }
    if (n == 1 && clipped == 0) return 0.0;  // no unigram overlap at all
    double p;
    if (total == 0) {
      p = kEps;  // candidates shorter than n
    } else {
      p = clipped > 0 ? static_cast<double>(clipped) / static_cast<double>(total)
                      : kEps / static_cast<double>(total);
    }
    log_sum += std::log(p);
  }
  double geo = std::exp(log_sum / max_n);
  double bp = cand_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return geo * bp;
}

double cider(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references) {
  if (candidates.empty()) throw std::invalid_argument("cider: empty candidate set");
  if (candidates.size() != references.size())
    throw std::invalid_argument("cider: candidate/reference count mismatch");
  constexpr int kMaxN = 4;
  size_t m = references.size();

  // document frequency per n-gram over the reference corpus
  std::array<std::map<Ngram, int>, kMaxN> df;
  for (const auto& r : references) {
    auto rs = strip_special(r);
    for (int n = 1; n <= kMaxN; ++n)
      for (const auto& [ng, count] : ngram_counts(rs, n)) df[static_cast<size_t>(n - 1)][ng] += 1;
  }
  auto idf = [&](const Ngram& ng, int n) {
    auto it = df[static_cast<size_t>(n - 1)].find(ng);
    double d = it == df[static_cast<size_t>(n - 1)].end() ? 0.0 : it->second;
    return std::log(static_cast<double>(m) / std::max(1.0, d));
  };
  auto tfidf_vec = [&](const TokenSeq& s, int n) {
    std::map<Ngram, double> vec;
    auto counts = ngram_counts(s, n);
    double total = 0.0;
    for (const auto& [ng, c] : counts) total += c;
    if (total == 0.0) return vec;
    for (const auto& [ng, c] : counts) vec[ng] = (c / total) * idf(ng, n);
    return vec;
  };

  double corpus = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    auto cs = strip_special(candidates[i]);
    auto rs = strip_special(references[i]);
    double score = 0.0;
    for (int n = 1; n <= kMaxN; ++n) {
      auto gc = tfidf_vec(cs, n);
      auto gr = tfidf_vec(rs, n);
      double dot = 0.0, nc = 0.0, nr = 0.0;
      for (const auto& [ng, v] : gc) {
        nc += v * v;
        auto it = gr.find(ng);
        if (it != gr.end()) dot += v * it->second;
      }
      for (const auto& [ng, v] : gr) nr += v * v;
      if (nc > 0.0 && nr > 0.0) score += dot / (std::sqrt(nc) * std::sqrt(nr));
    }
    corpus += score / kMaxN * 10.0;
  }
  return corpus / static_cast<double>(candidates.size());
}

InteractionMetrics interaction_metrics(const Tensor& edge_scores, const Tensor& edge_labels,
                                       double threshold) {
  if (!edge_scores.same_shape(edge_labels))
    throw std::invalid_argument("interaction_metrics: score/label shape mismatch");
  if (edge_scores.ndim() != 2) throw std::invalid_argument("interaction_metrics: expects [E,K]");
  int64_t e = edge_scores.size(0), k = edge_scores.size(1);

  InteractionMetrics out;
  int64_t exact = 0, tp = 0, fn = 0;
  for (int64_t i = 0; i < e; ++i) {
    bool all_match = true;
    for (int64_t c = 0; c < k; ++c) {
      bool pred = edge_scores[i * k + c] >= threshold;
      bool truth = edge_labels[i * k + c] > 0.5;
      if (pred != truth) all_match = false;
      if (truth && pred) ++tp;
      if (truth && !pred) ++fn;
    }
    if (all_match) ++exact;
  }
  out.acc = static_cast<double>(exact) / static_cast<double>(e);
  out.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;

  double ap_sum = 0.0;
  int classes_with_pos = 0;
  for (int64_t c = 0; c < k; ++c) {
    int64_t npos = 0;
    for (int64_t i = 0; i < e; ++i)
      if (edge_labels[i * k + c] > 0.5) ++npos;
    if (npos == 0) continue;
    ++classes_with_pos;
    std::vector<int64_t> order(static_cast<size_t>(e));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return edge_scores[a * k + c] > edge_scores[b * k + c];
    });
    double ap = 0.0;
    int64_t hits = 0;
    for (int64_t rank = 0; rank < e; ++rank) {
      if (edge_labels[order[static_cast<size_t>(rank)] * k + c] > 0.5) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
      }
    }
    ap_sum += ap / static_cast<double>(npos);
  }
  if (classes_with_pos == 0)
    throw std::invalid_argument("interaction_metrics: no class has a positive; mAP undefined");
  out.map = ap_sum / static_cast<double>(classes_with_pos);
  return out;
}

}  // namespace mtl::metrics
