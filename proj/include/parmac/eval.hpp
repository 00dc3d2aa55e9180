// Copyright 2026 The parmac Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Retrieval metrics: Euclidean ground truth, linear Hamming scan,
// precision@k and recall@R.

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "parmac/common.hpp"
#include "parmac/data.hpp"
#include "parmac/model.hpp"

namespace parmac {

// Per-query neighbour indices, nearest first.
using GroundTruth = std::vector<std::vector<std::size_t>>;

struct MetricConfig {
  std::size_t K_true = 50;
  std::size_t k_retrieved = 50;
  std::vector<std::size_t> R_list = {1, 10, 100};

  void validate() const {
    require(K_true >= 1 && k_retrieved >= 1, "metric config needs K, k >= 1");
    for (auto r : R_list) require(r >= 1, "recall R must be >= 1");
  }
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

// Exact Euclidean K-NN, distance ties by ascending base index. With
// `exclude_self`, query q is base point q and never its own neighbour.
inline GroundTruth ground_truth_knn(const Dataset& base, const Dataset& queries, std::size_t K,
                                    bool exclude_self = false) {
  require(base.dim() == queries.dim() || base.empty() || queries.empty(), "ground_truth_knn: dimension mismatch");
  require(!exclude_self || queries.size() <= base.size(), "exclude_self needs queries drawn from base");
  const std::size_t available = base.size() - (exclude_self ? 1 : 0);
  if (K > available)
    throw Error(ErrorCode::kKExceedsBase,
                "K=" + std::to_string(K) + " exceeds " + std::to_string(available) + " base points");

  std::vector<double> qbuf(queries.dim()), bbuf(base.dim());
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(base.size());
  GroundTruth gt(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    queries.widen_row(q, qbuf);
    dist.clear();
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (exclude_self && i == q) continue;
      base.widen_row(i, bbuf);
      dist.emplace_back(squared_distance(qbuf, bbuf), i);
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(K), dist.end());
    gt[q].reserve(K);
    for (std::size_t r = 0; r < K; ++r) gt[q].push_back(dist[r].second);
  }
  return gt;
}

// k smallest Hamming distances via a counting sort over distances 0..64;
// ties stay in ascending index order. `skip` drops one base index (self).
inline std::vector<std::size_t> hamming_search(std::span<const Code> base, Code query, std::size_t k,
                                               std::optional<std::size_t> skip = std::nullopt) {
  std::array<std::vector<std::size_t>, kMaxCodeBits + 1> buckets;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (skip && *skip == i) continue;
    buckets[static_cast<std::size_t>(hamming(base[i], query))].push_back(i);
  }
  std::vector<std::size_t> out;
  out.reserve(k);
  for (const auto& b : buckets) {
    for (auto i : b) {
      if (out.size() == k) return out;
      out.push_back(i);
    }
  }
  return out;
}

// Macro average over queries of |retrieved ∩ true| / k, as a percentage.
inline double precision(const GroundTruth& truth, const std::vector<std::vector<std::size_t>>& retrieved,
                        std::size_t k) {
  require(truth.size() == retrieved.size(), "precision: query count mismatch");
  require(k >= 1, "precision: k must be >= 1");
  if (truth.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < truth.size(); ++q) {
    require(retrieved[q].size() == k, "precision: retrieved list length must equal k");
    std::unordered_set<std::size_t> t(truth[q].begin(), truth[q].end());
    std::size_t hits = 0;
    for (auto i : retrieved[q]) hits += t.count(i);
    total += static_cast<double>(hits) / static_cast<double>(k);
  }
  return 100.0 * total / static_cast<double>(truth.size());
}

// Rank of the true nearest neighbour in a Hamming ranking. Everything at the
// same distance counts as behind it, so a tie at the best distance is rank 1.
inline std::size_t hamming_rank(std::span<const Code> base, Code query, std::size_t nn,
                                std::optional<std::size_t> skip = std::nullopt) {
  const int d_nn = hamming(base[nn], query);
  std::size_t closer = 0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (skip && *skip == i) continue;
    if (hamming(base[i], query) < d_nn) ++closer;
  }
  return closer + 1;
}

inline double recall_at_r(std::span<const std::size_t> ranks, std::size_t R) {
  require(R >= 1, "recall_at_r: R must be >= 1");
  if (ranks.empty()) return 0.0;
  std::size_t hit = 0;
  for (auto r : ranks) hit += r <= R ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(ranks.size());
}

struct RetrievalMetrics {
  double precision = 0.0;
  std::map<std::size_t, double> recall;
};

// Scores the codes of `queries` against those of `base`. K and k are clamped
// to the number of usable base points.
inline RetrievalMetrics evaluate_retrieval(const Dataset& base, const CodeMatrix& base_codes, const Dataset& queries,
                                           const CodeMatrix& query_codes, const MetricConfig& cfg,
                                           bool exclude_self = false) {
  cfg.validate();
  require(base_codes.size() == base.size() && query_codes.size() == queries.size(), "evaluate: code count mismatch");
  const std::size_t available = base.size() - (exclude_self ? 1 : 0);
  const std::size_t K = std::min(cfg.K_true, available);
  const std::size_t k = std::min(cfg.k_retrieved, available);
  auto truth = ground_truth_knn(base, queries, K, exclude_self);

  std::vector<std::vector<std::size_t>> retrieved;
  std::vector<std::size_t> ranks;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::optional<std::size_t> skip;
    if (exclude_self) skip = q;
    retrieved.push_back(hamming_search(base_codes.codes(), query_codes[q], k, skip));
    ranks.push_back(hamming_rank(base_codes.codes(), query_codes[q], truth[q].front(), skip));
  }
  RetrievalMetrics m;
  m.precision = precision(truth, retrieved, k);
  for (auto R : cfg.R_list) m.recall[R] = recall_at_r(ranks, R);
  return m;
}

// Validation precision of a hash function: validation points query the
// training points. Ground truth is computed once.
class ValidationEvaluator {
 public:
  ValidationEvaluator(const Dataset& base, const Dataset& queries, MetricConfig cfg = {})
      : base_(&base), queries_(&queries), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (queries.empty() || base.empty()) return;
    K_ = std::min(cfg_.K_true, base.size());
    k_ = std::min(cfg_.k_retrieved, base.size());
    truth_ = ground_truth_knn(base, queries, K_);
  }

  bool enabled() const { return !truth_.empty(); }

  double precision_of(const Encoder& enc) const {
    if (!enabled()) return 0.0;
    auto base_codes = encode_all(enc, *base_);
    auto query_codes = encode_all(enc, *queries_);
    std::vector<std::vector<std::size_t>> retrieved;
    retrieved.reserve(queries_->size());
    for (std::size_t q = 0; q < queries_->size(); ++q)
      retrieved.push_back(hamming_search(base_codes.codes(), query_codes[q], k_));
    return precision(truth_, retrieved, k_);
  }

 private:
  const Dataset* base_;
  const Dataset* queries_;
  MetricConfig cfg_;
  std::size_t K_ = 0;
  std::size_t k_ = 0;
  GroundTruth truth_;
};

}  // namespace parmac
