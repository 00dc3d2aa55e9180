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


#include <algorithm>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "parmac/eval.hpp"
#include "test_util.hpp"

namespace {

using parmac::Code;
using parmac::ErrorCode;
using testing_util::code_of;

oracle::Mat random_points(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  // Integer coordinates make distance ties common, which exercises the index rule.
  std::uniform_int_distribution<int> u(0, 3);
  oracle::Mat m(n, oracle::Vec(d));
  for (auto& r : m)
    for (auto& v : r) v = u(rng);
  return m;
}

TEST(Precision, AllRetrievedAreTrueGivesHundred) {
  parmac::GroundTruth truth = {{1, 2, 3}, {4, 5, 6}};
  EXPECT_DOUBLE_EQ(parmac::precision(truth, {{3, 1, 2}, {6, 4, 5}}, 3), 100.0);
}

TEST(Precision, DisjointGivesZero) {
  parmac::GroundTruth truth = {{1, 2}, {3, 4}};
  EXPECT_DOUBLE_EQ(parmac::precision(truth, {{5, 6}, {7, 8}}, 2), 0.0);
}

TEST(Precision, ThreeQueryToyAveragesPerQuery) {
  parmac::GroundTruth truth = {{0, 1, 2, 3}, {0, 1, 2, 3}, {0, 1, 2, 3}};
  std::vector<std::vector<std::size_t>> got = {{0, 1, 8, 9}, {3, 7, 8, 9}, {3, 2, 1, 0}};
  // (2/4 + 1/4 + 4/4) / 3
  EXPECT_NEAR(parmac::precision(truth, got, 4), 100.0 * 1.75 / 3.0, 1e-12);
  EXPECT_NEAR(parmac::precision(truth, got, 4), 58.33, 5e-3);
}

TEST(Precision, WrongListLengthRejected) {
  parmac::GroundTruth truth = {{0, 1}};
  EXPECT_EQ(code_of([&] { parmac::precision(truth, {{0}}, 2); }), ErrorCode::kInvalidArgument);
}

TEST(Recall, ConstructedRanks) {
  std::vector<std::size_t> ranks = {1, 3, 7, 2};
  EXPECT_DOUBLE_EQ(parmac::recall_at_r(ranks, 3), 0.75);
  EXPECT_DOUBLE_EQ(parmac::recall_at_r(ranks, 1), 0.25);
  EXPECT_DOUBLE_EQ(parmac::recall_at_r(ranks, 7), 1.0);
}

TEST(Recall, NondecreasingInR) {
  std::mt19937_64 rng(3);
  std::vector<std::size_t> ranks(200);
  for (auto& r : ranks) r = 1 + rng() % 50;
  double prev = 0.0;
  for (std::size_t R = 1; R <= 60; ++R) {
    double v = parmac::recall_at_r(ranks, R);
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
}

TEST(Recall, TieAtBestDistanceIsRankOne) {
  // Nearest neighbour is index 2, but indices 0 and 1 share its distance.
  std::vector<Code> base = {0b0001, 0b0010, 0b0100, 0b1111};
  EXPECT_EQ(parmac::hamming_rank(base, 0b0000, 2), 1U);
  std::vector<std::size_t> ranks = {parmac::hamming_rank(base, 0b0000, 2)};
  EXPECT_DOUBLE_EQ(parmac::recall_at_r(ranks, 1), 1.0);
  // Strictly closer points do push it back.
  EXPECT_EQ(parmac::hamming_rank(base, 0b0000, 3), 4U);
}

TEST(Recall, WholeBaseGivesOne) {
  std::mt19937_64 rng(9);
  auto base = testing_util::random_codes(30, 8, rng);
  std::vector<std::size_t> ranks;
  for (std::size_t q = 0; q < 30; ++q) ranks.push_back(parmac::hamming_rank(base.codes(), rng() & 0xFF, q));
  EXPECT_DOUBLE_EQ(parmac::recall_at_r(ranks, 30), 1.0);
}

TEST(Hamming, MatchesBitLoop) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 1000; ++t) {
    Code a = rng(), b = rng();
    EXPECT_EQ(parmac::hamming(a, b), oracle::hamming(a, b));
  }
}

TEST(HammingSearch, MatchesStableSort) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    auto codes = testing_util::random_codes(120, 6, rng);
    std::vector<std::uint64_t> v(codes.codes().begin(), codes.codes().end());
    Code q = rng() & 0x3F;
    std::size_t k = 1 + rng() % 120;
    EXPECT_EQ(parmac::hamming_search(codes.codes(), q, k), oracle::hamming_topk(v, q, k));
  }
}

TEST(HammingSearch, SkipDropsSelf) {
  std::vector<Code> base = {0b11, 0b11, 0b00};
  auto got = parmac::hamming_search(base, 0b11, 2, std::size_t{0});
  EXPECT_EQ(got, (std::vector<std::size_t>{1, 2}));
}

TEST(GroundTruth, MatchesFullSortWithIndexTies) {
  std::mt19937_64 rng(11);
  auto base = random_points(80, 3, rng);
  auto queries = random_points(15, 3, rng);
  auto gt = parmac::ground_truth_knn(testing_util::to_dataset(base), testing_util::to_dataset(queries), 10);
  for (std::size_t q = 0; q < queries.size(); ++q) EXPECT_EQ(gt[q], oracle::knn(base, queries[q], 10));
}

TEST(GroundTruth, ExcludeSelf) {
  std::mt19937_64 rng(12);
  auto base = random_points(40, 2, rng);
  auto ds = testing_util::to_dataset(base);
  auto gt = parmac::ground_truth_knn(ds, ds, 5, true);
  for (std::size_t q = 0; q < base.size(); ++q) {
    EXPECT_EQ(gt[q], oracle::knn(base, base[q], 5, static_cast<long>(q)));
    EXPECT_EQ(std::count(gt[q].begin(), gt[q].end(), q), 0);
  }
}

TEST(GroundTruth, KExceedsBase) {
  auto ds = parmac::Dataset::real(3, 1, {0.0, 1.0, 2.0});
  EXPECT_EQ(code_of([&] { parmac::ground_truth_knn(ds, ds, 4); }), ErrorCode::kKExceedsBase);
  EXPECT_EQ(code_of([&] { parmac::ground_truth_knn(ds, ds, 3, true); }), ErrorCode::kKExceedsBase);
  EXPECT_NO_THROW(parmac::ground_truth_knn(ds, ds, 3));
}

TEST(Evaluate, MatchesOracleAndIsPermutationInvariant) {
  std::mt19937_64 rng(21);
  const std::size_t nb = 60, nq = 12;
  auto base = oracle::random_matrix(nb, 4, rng);
  auto queries = oracle::random_matrix(nq, 4, rng);
  auto bc = testing_util::random_codes(nb, 5, rng);
  auto qc = testing_util::random_codes(nq, 5, rng);
  parmac::MetricConfig cfg{.K_true = 8, .k_retrieved = 6, .R_list = {1, 5, 20}};

  auto m = parmac::evaluate_retrieval(testing_util::to_dataset(base), bc, testing_util::to_dataset(queries), qc, cfg);

  std::vector<std::uint64_t> bv(bc.codes().begin(), bc.codes().end());
  double prec = 0;
  std::map<std::size_t, double> rec;
  for (std::size_t q = 0; q < nq; ++q) {
    auto truth = oracle::knn(base, queries[q], 8);
    auto got = oracle::hamming_topk(bv, qc[q], 6);
    int hits = 0;
    for (auto i : got) hits += std::count(truth.begin(), truth.end(), i) > 0;
    prec += hits / 6.0;
    int closer = 0;
    for (auto c : bv) closer += oracle::hamming(c, qc[q]) < oracle::hamming(bv[truth[0]], qc[q]);
    for (auto R : cfg.R_list) rec[R] += (closer + 1 <= static_cast<int>(R)) / static_cast<double>(nq);
  }
  EXPECT_NEAR(m.precision, 100.0 * prec / nq, 1e-9);
  for (auto R : cfg.R_list) EXPECT_NEAR(m.recall.at(R), rec[R], 1e-12) << "R=" << R;

  std::vector<std::size_t> perm(nq);
  for (std::size_t i = 0; i < nq; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  oracle::Mat pq;
  std::vector<Code> pc;
  for (auto i : perm) {
    pq.push_back(queries[i]);
    pc.push_back(qc[i]);
  }
  auto mp = parmac::evaluate_retrieval(testing_util::to_dataset(base), bc, testing_util::to_dataset(pq),
                                       parmac::CodeMatrix(5, pc), cfg);
  EXPECT_NEAR(mp.precision, m.precision, 1e-9);
  for (auto R : cfg.R_list) EXPECT_NEAR(mp.recall.at(R), m.recall.at(R), 1e-12);
}

TEST(Evaluate, PerfectCodesOnSeparatedClusters) {
  // Four tight clusters, one code each: every retrieved point is a true neighbour.
  std::vector<double> v;
  std::vector<Code> codes;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 5; ++i) {
      v.push_back(100.0 * c + 0.01 * i);
      codes.push_back(static_cast<Code>(c == 0 ? 0b00 : c == 1 ? 0b01 : c == 2 ? 0b11 : 0b10));
    }
  auto ds = parmac::Dataset::real(20, 1, v);
  parmac::CodeMatrix cm(2, codes);
  parmac::MetricConfig cfg{.K_true = 4, .k_retrieved = 4, .R_list = {1}};
  auto m = parmac::evaluate_retrieval(ds, cm, ds, cm, cfg, true);
  EXPECT_DOUBLE_EQ(m.precision, 100.0);
  EXPECT_DOUBLE_EQ(m.recall.at(1), 1.0);
}

}  // namespace
