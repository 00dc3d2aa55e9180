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

#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "parmac/model.hpp"
#include "test_util.hpp"

namespace parmac {
namespace {

using testing_util::code_of;
using testing_util::random_codes;
using testing_util::random_model;
using testing_util::to_dataset;
using testing_util::to_mat;

std::vector<oracle::Bits> to_bits(const CodeMatrix& c) {
  std::vector<oracle::Bits> out;
  for (std::size_t i = 0; i < c.size(); ++i) out.push_back(oracle::unpack(c[i], c.bits()));
  return out;
}

TEST(Encode, ZeroWeightsGiveAllOnes) {
  BAModel m = BAModel::zeros(5, 3);
  std::vector<double> x{0.3, -7, 2};
  EXPECT_EQ(encode(m.encoder, x), 0b11111u);
}

TEST(Encode, OneBitByHand) {
  Encoder e;
  e.A = Eigen::MatrixXd(1, 2);
  e.A << 1, -2;
  std::vector<double> x{3};
  EXPECT_EQ(encode(e, x), 1u);
  x[0] = 1.9;
  EXPECT_EQ(encode(e, x), 0u);
  x[0] = 2.0;  // step(0) = 1
  EXPECT_EQ(encode(e, x), 1u);
}

TEST(Encode, MatchesOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    auto m = random_model(7, 4, rng);
    auto X = oracle::random_matrix(20, 4, rng);
    auto codes = encode_all(m.encoder, to_dataset(X));
    for (std::size_t i = 0; i < X.size(); ++i) EXPECT_EQ(codes[i], oracle::pack(oracle::encode(to_mat(m.encoder.A), X[i])));
  }
}

TEST(Decode, ZeroMatrixGivesBias) {
  Decoder d;
  d.F = Eigen::MatrixXd::Zero(3, 3);
  d.F.col(2) << 1, 2, 3;
  EXPECT_EQ(decode(d, 0b11), (std::vector<double>{1, 2, 3}));
}

TEST(Decode, OneDimensional) {
  Decoder d;
  d.F = Eigen::MatrixXd(1, 2);
  d.F << 4, -1;
  EXPECT_EQ(decode(d, 1)[0], 3.0);
  EXPECT_EQ(decode(d, 0)[0], -1.0);
}

TEST(Decode, MatchesOracle) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    auto m = random_model(6, 5, rng);
    Code z = rng() & low_bits_mask(6);
    auto got = decode(m.decoder, z);
    auto want = oracle::decode(to_mat(m.decoder.F), oracle::unpack(z, 6));
    for (std::size_t d = 0; d < 5; ++d) EXPECT_NEAR(got[d], want[d], 1e-12);
    std::vector<double> zr(6);
    for (std::size_t l = 0; l < 6; ++l) zr[l] = (z >> l) & 1U;
    auto relaxed = decode_relaxed(m.decoder, zr);
    for (std::size_t d = 0; d < 5; ++d) EXPECT_NEAR(relaxed[d], want[d], 1e-12);
  }
}

TEST(Objectives, ReconstructionByHand) {
  Decoder d;
  d.F = Eigen::MatrixXd::Zero(2, 2);
  std::vector<double> x{1, 0};
  EXPECT_EQ(reconstruction_error(d, x, 0), 1.0);
}

TEST(Objectives, PerfectAutoencoderHasZeroError) {
  // x in {0,1}^2 is reproduced by identity encoder/decoder
  BAModel m = BAModel::zeros(2, 2);
  m.encoder.A << 1, 0, -0.5, 0, 1, -0.5;
  m.decoder.F << 1, 0, 0, 0, 1, 0;
  Dataset X = Dataset::real(4, 2, {0, 0, 0, 1, 1, 0, 1, 1});
  EXPECT_EQ(e_ba(m.encoder, m.decoder, X), 0.0);
}

TEST(Objectives, EqEqualsEbaWhenCodesAreTheHash) {
  std::mt19937_64 rng(3);
  auto m = random_model(5, 4, rng);
  auto X = to_dataset(oracle::random_matrix(30, 4, rng));
  auto Z = encode_all(m.encoder, X);
  EXPECT_EQ(e_q(m.encoder, m.decoder, Z, 3.7, X), e_ba(m.encoder, m.decoder, X));
}

TEST(Objectives, EqWithoutPenaltyIsReconstruction) {
  std::mt19937_64 rng(4);
  auto m = random_model(5, 4, rng);
  auto Xm = oracle::random_matrix(30, 4, rng);
  auto X = to_dataset(Xm);
  auto Z = random_codes(30, 5, rng);
  double want = 0;
  for (std::size_t i = 0; i < 30; ++i) want += oracle::sq_dist(Xm[i], oracle::decode(to_mat(m.decoder.F), oracle::unpack(Z[i], 5)));
  EXPECT_NEAR(e_q(m.encoder, m.decoder, Z, 0.0, X), want, 1e-9 * want);
}

TEST(Objectives, EqIsAffineInMu) {
  std::mt19937_64 rng(5);
  auto m = random_model(6, 3, rng);
  auto X = to_dataset(oracle::random_matrix(40, 3, rng));
  auto Z = random_codes(40, 6, rng);
  double c0 = e_q(m.encoder, m.decoder, Z, 0.0, X);
  auto H = encode_all(m.encoder, X);
  double c1 = 0;
  for (std::size_t i = 0; i < 40; ++i) c1 += oracle::hamming(Z[i], H[i]);
  for (double mu : {0.5, 2.0, 11.0}) EXPECT_NEAR(e_q(m.encoder, m.decoder, Z, mu, X), c0 + mu * c1, 1e-9 * (c0 + mu * c1));
}

TEST(Objectives, MatchOracle) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    auto m = random_model(4, 3, rng);
    auto Xm = oracle::random_matrix(15, 3, rng);
    auto Z = random_codes(15, 4, rng);
    auto A = to_mat(m.encoder.A), F = to_mat(m.decoder.F);
    double eba = oracle::e_ba(A, F, Xm), eq = oracle::e_q(A, F, to_bits(Z), 0.3, Xm);
    EXPECT_NEAR(e_ba(m.encoder, m.decoder, to_dataset(Xm)), eba, 1e-10 * eba);
    EXPECT_NEAR(e_q(m.encoder, m.decoder, Z, 0.3, to_dataset(Xm)), eq, 1e-10 * eq);
  }
}

TEST(Submodels, NumberingAndPayloads) {
  const std::size_t L = 3, D = 5;
  EXPECT_EQ(submodel_count(L, D), 8u);
  EXPECT_EQ(submodel_at(2, L).kind, SubmodelKind::kEncoderBit);
  EXPECT_EQ(submodel_at(3, L).kind, SubmodelKind::kDecoderRow);
  EXPECT_EQ(submodel_at(3, L).index, 0u);
  EXPECT_EQ(payload_size(submodel_at(0, L), L, D), D + 1);
  EXPECT_EQ(payload_size(submodel_at(7, L), L, D), L + 1);

  std::mt19937_64 rng(7);
  auto m = random_model(L, D, rng);
  BAModel copy = BAModel::zeros(L, D);
  for (std::size_t i = 0; i < submodel_count(L, D); ++i) set_payload(copy, submodel_at(i, L), get_payload(m, submodel_at(i, L)));
  EXPECT_TRUE(copy == m);
  EXPECT_THROW(set_payload(copy, submodel_at(0, L), std::vector<double>(2)), Error);
}

// Four points in 2-D, separable by x0 + x1 > 0.
struct Toy {
  Dataset X = Dataset::real(6, 2, {2, 1, 1, 2, 3, 0.5, -2, -1, -1, -2, -0.5, -3});
  CodeMatrix Z = CodeMatrix(1, std::vector<Code>{1, 1, 1, 0, 0, 0});
};

TEST(Svm, IdenticalLabelsArePredicted) {
  Dataset X = Dataset::real(4, 1, {-1, 0.5, 2, 3});
  for (Code label : {Code{0}, Code{1}}) {
    CodeMatrix Z(1, std::vector<Code>(4, label));
    SgdConfig cfg;
    cfg.epochs = 20;
    auto w = fit_svm_sgd(X, Z, 0, {0.0, 0.0}, cfg);
    Encoder e;
    e.A = Eigen::MatrixXd(1, 2);
    e.A << w[0], w[1];
    EXPECT_EQ(bit_mismatches(e, 0, X, Z), 0u) << label;
  }
}

TEST(Svm, SeparableToyIsLearned) {
  Toy toy;
  SgdConfig cfg;
  cfg.epochs = 30;
  auto w = fit_svm_sgd(toy.X, toy.Z, 0, {0, 0, 0}, cfg);
  Encoder e;
  e.A = Eigen::MatrixXd(1, 3);
  e.A << w[0], w[1], w[2];
  EXPECT_EQ(bit_mismatches(e, 0, toy.X, toy.Z), 0u);
}

TEST(Svm, OnePassLowersTheObjective) {
  Toy toy;
  EncoderBitTask task(toy.X, toy.Z, 0);
  std::vector<double> w{-0.5, 0.2, 0.3};
  double before = linear_objective(task, LossKind::kHinge, 1e-4, w, task.size());
  SgdConfig cfg;
  train_visit(task, LossKind::kHinge, submodel_at(0, 1), cfg, {}, 0, 1, w);
  EXPECT_LT(linear_objective(task, LossKind::kHinge, 1e-4, w, task.size()), before);
}

TEST(Sgd, DeterministicPerSeedAndVisit) {
  std::mt19937_64 rng(8);
  auto X = to_dataset(oracle::random_matrix(50, 3, rng));
  auto Z = random_codes(50, 2, rng);
  SgdConfig cfg;
  cfg.epochs = 3;
  auto a = fit_svm_sgd(X, Z, 1, {0, 0, 0, 0}, cfg, {2, 1});
  auto b = fit_svm_sgd(X, Z, 1, {0, 0, 0, 0}, cfg, {2, 1});
  auto c = fit_svm_sgd(X, Z, 1, {0, 0, 0, 0}, cfg, {2, 3});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Probe, SingleCandidateIsReturned) {
  Toy toy;
  EncoderBitTask task(toy.X, toy.Z, 0);
  std::vector<double> w(3, 0.0), c{0.37};
  auto r = probe_step_size(task, LossKind::kHinge, 1e-4, 1, w, c);
  EXPECT_EQ(r.eta, 0.37);
  EXPECT_EQ(r.points_used, 6u);
}

TEST(Probe, TiesGoToTheSmallerStep) {
  // Every point already has margin >= 1 and lambda = 0: no step changes w.
  Toy toy;
  EncoderBitTask task(toy.X, toy.Z, 0);
  std::vector<double> w{10, 10, 0}, c{0.4, 0.1, 0.2};
  EXPECT_EQ(probe_step_size(task, LossKind::kHinge, 0.0, 1, w, c).eta, 0.1);
}

TEST(Probe, DivergentStepsNeverWin) {
  Dataset X = Dataset::real(3, 1, {100, -50, 80});
  CodeMatrix Z(1, std::vector<Code>{1, 0, 1});
  DecoderRowTask task(X, Z, 0);
  std::vector<double> w{0, 0}, c{1e-3, 1e300};
  EXPECT_EQ(probe_step_size(task, LossKind::kSquared, 0.0, 1, w, c).eta, 1e-3);
}

TEST(Probe, UsesAtMostTheConfiguredHead) {
  std::mt19937_64 rng(9);
  auto X = to_dataset(oracle::random_matrix(40, 2, rng));
  auto Z = random_codes(40, 1, rng);
  EncoderBitTask task(X, Z, 0);
  std::vector<double> w(3, 0.0);
  auto c = step_candidates(0.1);
  EXPECT_EQ(c.size(), 9u);
  EXPECT_DOUBLE_EQ(c.front(), 0.1 / 16);
  EXPECT_DOUBLE_EQ(c.back(), 0.1 * 16);
  EXPECT_EQ(probe_step_size(task, LossKind::kHinge, 1e-4, 1, w, c, 25).points_used, 25u);
  EXPECT_EQ(probe_step_size(task, LossKind::kHinge, 1e-4, 1, w, c, 1000).points_used, 40u);
}

TEST(DecoderLsq, ExactLinearRelationHasZeroResidual) {
  std::mt19937_64 rng(10);
  auto Z = random_codes(64, 3, rng);
  Eigen::MatrixXd F(2, 4);
  F << 1, -2, 0.5, 3, 0, 4, -1, -2;
  std::vector<double> v;
  for (std::size_t i = 0; i < 64; ++i) {
    Decoder d{F};
    auto y = decode(d, Z[i]);
    v.insert(v.end(), y.begin(), y.end());
  }
  Dataset X = Dataset::real(64, 2, v);
  auto fit = fit_decoder_lsq(Z, X);
  EXPECT_FALSE(fit.ridge_used);
  EXPECT_LT((fit.decoder.F - F).norm(), 1e-10);
  EXPECT_LT(reconstruction_error(fit.decoder, X.real_row(5), Z[5]), 1e-20);
}

TEST(DecoderLsq, TwoPointsMatchNormalEquations) {
  // L = 1: x = w z + b with z in {0, 1}; normal equations on [z; 1].
  CodeMatrix Z(1, std::vector<Code>{0, 1, 1});
  Dataset X = Dataset::real(3, 1, {1.0, 4.0, 5.0});
  double szz = 2, sz = 2, n = 3, szx = 9, sx = 10;
  auto [w, b] = oracle::solve2x2(szz, sz, sz, n, szx, sx);
  auto fit = fit_decoder_lsq(Z, X);
  EXPECT_NEAR(fit.decoder.F(0, 0), w, 1e-12);
  EXPECT_NEAR(fit.decoder.F(0, 1), b, 1e-12);
}

TEST(DecoderLsq, IsAGlobalMinimum) {
  std::mt19937_64 rng(11);
  auto Xm = oracle::random_matrix(80, 4, rng);
  auto X = to_dataset(Xm);
  auto Z = random_codes(80, 3, rng);
  auto F = fit_decoder_lsq(Z, X).decoder;
  auto sse = [&](const Decoder& d) {
    double s = 0;
    for (std::size_t i = 0; i < 80; ++i) s += reconstruction_error(d, X.real_row(i), Z[i]);
    return s;
  };
  const double best = sse(F);
  std::normal_distribution<double> g(0, 1e-3);
  for (int t = 0; t < 100; ++t) {
    Decoder p = F;
    for (Eigen::Index i = 0; i < p.F.size(); ++i) p.F.data()[i] += g(rng);
    EXPECT_GT(sse(p), best);
  }
}

TEST(DecoderLsq, SingularSystemUsesRidge) {
  CodeMatrix Z(2, std::vector<Code>{1, 1, 1});  // bit 1 never set
  Dataset X = Dataset::real(3, 1, {1, 2, 3});
  auto fit = fit_decoder_lsq(Z, X);
  EXPECT_TRUE(fit.ridge_used);
  EXPECT_TRUE(fit.decoder.F.allFinite());
}

TEST(DecoderSgd, ConstantTargetLearnsTheBias) {
  std::mt19937_64 rng(12);
  auto Z = random_codes(100, 2, rng);
  Dataset X = Dataset::real(100, 1, std::vector<double>(100, 2.5));
  SgdConfig cfg;
  cfg.epochs = 40;
  auto w = fit_decoder_row_sgd(X, Z, 0, {0, 0, 0}, cfg);
  Decoder d;
  d.F = Eigen::MatrixXd(1, 3);
  d.F << w[0], w[1], w[2];
  for (std::size_t i = 0; i < 100; ++i) EXPECT_NEAR(decode(d, Z[i])[0], 2.5, 1e-2);
}

TEST(DecoderSgd, ApproachesTheClosedForm) {
  std::mt19937_64 rng(13);
  auto Z = random_codes(200, 2, rng);
  Eigen::MatrixXd F(2, 3);
  F << 1.0, -0.5, 0.25, 0.3, 0.8, -1.0;
  std::normal_distribution<double> noise(0, 0.05);
  std::vector<double> v;
  for (std::size_t i = 0; i < 200; ++i)
    for (double y : decode(Decoder{F}, Z[i])) v.push_back(y + noise(rng));
  Dataset X = Dataset::real(200, 2, v);
  auto exact = fit_decoder_lsq(Z, X).decoder;
  SgdConfig cfg;
  cfg.epochs = 200;
  cfg.minibatch = 10;
  Decoder start;
  start.F = Eigen::MatrixXd::Zero(2, 3);
  auto sgd = fit_decoder_sgd(X, Z, start, cfg);
  EXPECT_LT((sgd.F - exact.F).norm() / exact.F.norm(), 1e-2);
}

TEST(Checkpoint, RoundTripAndLayout) {
  std::mt19937_64 rng(14);
  auto m = random_model(3, 2, rng);
  std::stringstream io;
  write_checkpoint(io, m);
  auto bytes = io.str();
  EXPECT_EQ(bytes.size(), 16 + 8 * (3 * 3 + 2 * 4));
  EXPECT_EQ(bytes.substr(0, 4), "PMAC");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 3);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_TRUE(read_checkpoint(io) == m);
}

TEST(Checkpoint, RejectsForeignFiles) {
  std::istringstream bad("NOPE0000");
  EXPECT_EQ(code_of([&] { read_checkpoint(bad); }), ErrorCode::kMalformedRecord);
  std::stringstream io;
  write_checkpoint(io, BAModel::zeros(1, 1));
  auto s = io.str();
  s[4] = 9;
  std::istringstream wrong_version(s);
  EXPECT_EQ(code_of([&] { read_checkpoint(wrong_version); }), ErrorCode::kMalformedRecord);
}

}  // namespace
}  // namespace parmac
