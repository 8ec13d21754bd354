#pragma once

// Function embeddings from static code, cosine search and the evaluation
// metrics built on them.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "semtrace/encoding.hpp"
#include "semtrace/neural/model.hpp"
#include "semtrace/neural/optim.hpp"
#include "semtrace/tracer.hpp"

namespace semtrace {

using Vector = std::vector<double>;

struct FunctionEmbedding {
  std::string fn_id;
  std::string dialect;
  std::string pipeline;  // pass names joined by '+', empty for a source
  Vector vector;
};

// ---------------------------------------------------------------------------
// Cosine similarity and the pair loss

inline double cosine_similarity(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) throw std::domain_error("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// 1 - cos for similar pairs, max(0, cos - margin) for dissimilar ones.
inline double finetune_loss(const Vector& a, const Vector& b, int y, double margin) {
  if (y != 1 && y != -1) throw std::invalid_argument("finetune_loss: label must be +1 or -1");
  const double c = cosine_similarity(a, b);
  return y == 1 ? 1.0 - c : std::max(0.0, c - margin);
}

// ---------------------------------------------------------------------------
// Embedding from static code

/// Dummy-valued encoding of the static code, split to the model's length.
inline std::vector<EncodedInput> static_parts(const Function& fn, const Vocab& vocab, std::size_t max_len) {
  return split_subsequences(tokenize_trace(dummy_trace(fn), vocab), max_len);
}

template <class T>
Vector to_vector(const nn::Mat<T>& row) {
  Vector v(static_cast<std::size_t>(row.size()));
  for (Eigen::Index i = 0; i < row.size(); ++i) v[static_cast<std::size_t>(i)] = static_cast<double>(row.data()[i]);
  return v;
}

template <class T>
Vector embed_parts(nn::Model<T>& m, const std::vector<EncodedInput>& parts) {
  nn::Tape<T> tape;
  return to_vector(tape.value(nn::embed_function(tape, m, parts)));
}

template <class T>
Vector function_embedding(nn::Model<T>& m, const Vocab& vocab, const Function& fn) {
  return embed_parts(m, static_parts(fn, vocab, m.cfg.max_len));
}

// ---------------------------------------------------------------------------
// Finetuning

struct PairExample {
  const std::vector<EncodedInput>* a = nullptr;
  const std::vector<EncodedInput>* b = nullptr;
  int y = 1;
};

/// Records the mean cosine-embedding loss of a batch and back-propagates it
/// into every parameter it reaches. Returns the loss value.
template <class T>
double accumulate_pair_loss(nn::Model<T>& m, const std::vector<PairExample>& batch, double margin, double weight = 1.0) {
  if (batch.empty()) throw std::invalid_argument("finetune: empty batch");
  nn::Tape<T> tape;
  std::vector<nn::Var> losses;
  for (const auto& p : batch) {
    nn::Var ea = nn::embed_function(tape, m, *p.a);
    nn::Var eb = nn::embed_function(tape, m, *p.b);
    losses.push_back(tape.cosine_embedding_loss(ea, eb, p.y, static_cast<T>(margin)));
  }
  nn::Var loss = tape.scale(tape.sum(losses), static_cast<T>(weight / static_cast<double>(batch.size())));
  tape.backward(loss);
  return static_cast<double>(tape.value(loss)(0, 0)) / weight;
}

/// One optimizer update on a batch of labelled pairs. Finetuning runs
/// without dropout.
template <class T>
double finetune_step(nn::Model<T>& m, nn::AdamW<T>& opt, const std::vector<PairExample>& batch, double margin) {
  m.zero_grad();
  const double loss = accumulate_pair_loss(m, batch, margin);
  opt.step(m);
  return loss;
}

// ---------------------------------------------------------------------------
// Brute-force search

struct Match {
  std::string fn_id;
  double score = 0;
};

class EmbeddingIndex {
 public:
  void add(FunctionEmbedding e) {
    if (!ids_.insert(e.fn_id).second) throw std::invalid_argument("EmbeddingIndex: duplicate id '" + e.fn_id + "'");
    if (!entries_.empty() && e.vector.size() != entries_.front().vector.size())
      throw std::invalid_argument("EmbeddingIndex: dimension mismatch for '" + e.fn_id + "'");
    entries_.push_back(std::move(e));
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<FunctionEmbedding>& entries() const { return entries_; }
  bool contains(const std::string& id) const { return ids_.count(id) != 0; }

  /// The k most similar entries by cosine, ties broken by ascending id.
  std::vector<Match> search(const Vector& query, std::size_t k) const {
    if (entries_.empty()) throw std::invalid_argument("topk_search: empty index");
    if (k == 0 || k > entries_.size())
      throw std::invalid_argument("topk_search: k must be in [1, " + std::to_string(entries_.size()) + "]");
    std::vector<Match> all;
    all.reserve(entries_.size());
    for (const auto& e : entries_) all.push_back({e.fn_id, cosine_similarity(query, e.vector)});
    auto better = [](const Match& a, const Match& b) { return a.score != b.score ? a.score > b.score : a.fn_id < b.fn_id; };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), better);
    all.resize(k);
    return all;
  }

 private:
  std::vector<FunctionEmbedding> entries_;
  std::set<std::string> ids_;
};

inline std::vector<Match> topk_search(const EmbeddingIndex& index, const Vector& query, std::size_t k) {
  return index.search(query, k);
}

// ---------------------------------------------------------------------------
// Metrics

struct ScoredPair {
  double score = 0;
  int label = 1;  // +1 positive, -1 negative
};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from mid-ranks of the pooled scores.
inline double roc_auc(const std::vector<ScoredPair>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a].score < scores[b].score; });
  double pos_rank_sum = 0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]].score == scores[order[i]].score) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (scores[order[t]].label == 1) {
        pos_rank_sum += mid;
        ++npos;
      }
    i = j;
  }
  const std::size_t nneg = scores.size() - npos;
  if (npos == 0 || nneg == 0) throw std::invalid_argument("roc_auc: both classes must be present");
  const double np = static_cast<double>(npos), nn_ = static_cast<double>(nneg);
  return (pos_rank_sum - np * (np + 1) / 2) / (np * nn_);
}

struct RocPoint {
  double threshold = 0;
  double fpr = 0;
  double tpr = 0;
};

/// ROC vertices from the highest threshold down, one per distinct score.
inline std::vector<RocPoint> roc_curve(const std::vector<ScoredPair>& scores) {
  std::vector<ScoredPair> s = scores;
  std::sort(s.begin(), s.end(), [](const ScoredPair& a, const ScoredPair& b) { return a.score > b.score; });
  const auto np = static_cast<double>(std::count_if(s.begin(), s.end(), [](const ScoredPair& p) { return p.label == 1; }));
  const auto nn_ = static_cast<double>(s.size()) - np;
  if (np == 0 || nn_ == 0) throw std::invalid_argument("roc_curve: both classes must be present");
  std::vector<RocPoint> pts{{std::numeric_limits<double>::infinity(), 0, 0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    for (; j < s.size() && s[j].score == s[i].score; ++j) (s[j].label == 1 ? tp : fp) += 1;
    pts.push_back({s[i].score, fp / nn_, tp / np});
    i = j;
  }
  return pts;
}

/// Fraction of queries whose ground-truth target is missing from the top k.
/// `ground_truth` maps each query id to its target id.
inline double topk_error(const std::vector<FunctionEmbedding>& queries, const EmbeddingIndex& targets,
                         const std::map<std::string, std::string>& ground_truth, std::size_t k) {
  if (queries.empty()) throw std::invalid_argument("topk_error: no queries");
  std::size_t misses = 0;
  for (const auto& q : queries) {
    auto it = ground_truth.find(q.fn_id);
    if (it == ground_truth.end()) throw std::invalid_argument("topk_error: no ground truth for query '" + q.fn_id + "'");
    const auto top = targets.search(q.vector, std::min(k, targets.size()));
    if (std::none_of(top.begin(), top.end(), [&](const Match& m) { return m.fn_id == it->second; })) ++misses;
  }
  return static_cast<double>(misses) / static_cast<double>(queries.size());
}

inline double precision_at_1(const std::vector<FunctionEmbedding>& queries, const EmbeddingIndex& targets,
                             const std::map<std::string, std::string>& ground_truth) {
  return 1.0 - topk_error(queries, targets, ground_truth, 1);
}

// ---------------------------------------------------------------------------
// Byte-distribution divergence

/// KL(p || q) for distributions over the same bins, with 0 ln 0 = 0.
inline double kl_divergence(const Vector& p, const Vector& q) {
  if (p.size() != q.size() || p.empty()) throw std::invalid_argument("kl_divergence: bin counts differ");
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0) continue;
    if (q[i] == 0) throw std::domain_error("kl_divergence: q has an empty bin where p has mass");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(0.0, kl);
}

/// 256-bin byte histogram of the concatenated texts; empty bins receive
/// `epsilon` before normalisation.
inline Vector byte_distribution(const std::vector<std::string>& corpus, double epsilon = 1e-6) {
  Vector h(256, 0.0);
  double total = 0;
  for (const auto& s : corpus)
    for (unsigned char c : s) {
      h[c] += 1;
      total += 1;
    }
  if (total == 0) throw std::invalid_argument("byte_distribution: empty corpus");
  for (auto& x : h) {
    if (x == 0) x = epsilon * total;
  }
  const double z = std::accumulate(h.begin(), h.end(), 0.0);
  for (auto& x : h) x /= z;
  return h;
}

inline double byte_kl_divergence(const std::vector<std::string>& corpus_a, const std::vector<std::string>& corpus_b,
                                 double epsilon = 1e-6) {
  return kl_divergence(byte_distribution(corpus_a, epsilon), byte_distribution(corpus_b, epsilon));
}

}  // namespace semtrace
