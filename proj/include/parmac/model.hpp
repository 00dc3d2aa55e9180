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

// Binary autoencoder: L linear hash functions, a linear decoder, the two
// objectives and the per-submodel SGD trainers shared by the serial and the
// distributed W step.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "parmac/common.hpp"
#include "parmac/data.hpp"

namespace parmac {

// Row l of A is hash function h_l over [x;1].
struct Encoder {
  Eigen::MatrixXd A;  // L x (D+1)

  std::size_t bits() const { return static_cast<std::size_t>(A.rows()); }
  std::size_t dim() const { return A.cols() == 0 ? 0 : static_cast<std::size_t>(A.cols() - 1); }
};

// Row d of F regresses x_d on [z;1].
struct Decoder {
  Eigen::MatrixXd F;  // D x (L+1)

  std::size_t bits() const { return F.cols() == 0 ? 0 : static_cast<std::size_t>(F.cols() - 1); }
  std::size_t dim() const { return static_cast<std::size_t>(F.rows()); }
};

struct BAModel {
  Encoder encoder;
  Decoder decoder;

  std::size_t bits() const { return encoder.bits(); }
  std::size_t dim() const { return encoder.dim(); }

  static BAModel zeros(std::size_t L, std::size_t D) {
    BAModel m;
    m.encoder.A = Eigen::MatrixXd::Zero(L, D + 1);
    m.decoder.F = Eigen::MatrixXd::Zero(D, L + 1);
    return m;
  }

  friend bool operator==(const BAModel& a, const BAModel& b) {
    return a.encoder.A.rows() == b.encoder.A.rows() && a.encoder.A.cols() == b.encoder.A.cols() &&
           a.decoder.F.rows() == b.decoder.F.rows() && a.decoder.F.cols() == b.decoder.F.cols() &&
           a.encoder.A == b.encoder.A && a.decoder.F == b.decoder.F;
  }
};

// ---------------------------------------------------------------------------
// Evaluation. Plain loops with a fixed summation order keep every path that
// shares these functions bitwise reproducible.

inline double encoder_activation(const Encoder& enc, std::size_t l, std::span<const double> x) {
  const std::size_t D = enc.dim();
  double t = 0.0;
  for (std::size_t j = 0; j < D; ++j) t += enc.A(l, j) * x[j];
  return t + enc.A(l, D);
}

inline Code encode(const Encoder& enc, std::span<const double> x) {
  require(x.size() == enc.dim(), "encode: dimension mismatch");
  Code z = 0;
  for (std::size_t l = 0; l < enc.bits(); ++l)
    if (encoder_activation(enc, l, x) >= 0.0) z |= Code{1} << l;
  return z;
}

inline CodeMatrix encode_all(const Encoder& enc, const Dataset& data) {
  require(data.dim() == enc.dim() || data.empty(), "encode_all: dimension mismatch");
  CodeMatrix out(data.size(), enc.bits());
  RowReader rows(data);
  for (std::size_t i = 0; i < data.size(); ++i) out[i] = encode(enc, rows(i));
  return out;
}

inline double decode_component(const Decoder& dec, std::size_t d, Code z) {
  const std::size_t L = dec.bits();
  double v = 0.0;
  for (std::size_t l = 0; l < L; ++l)
    if ((z >> l) & 1U) v += dec.F(d, l);
  return v + dec.F(d, L);
}

inline std::vector<double> decode(const Decoder& dec, Code z) {
  std::vector<double> out(dec.dim());
  for (std::size_t d = 0; d < dec.dim(); ++d) out[d] = decode_component(dec, d, z);
  return out;
}

// Relaxed codes in [0,1]^L for the continuous Z solver.
inline std::vector<double> decode_relaxed(const Decoder& dec, std::span<const double> z) {
  const std::size_t L = dec.bits();
  require(z.size() == L, "decode: code length mismatch");
  std::vector<double> out(dec.dim());
  for (std::size_t d = 0; d < dec.dim(); ++d) {
    double v = 0.0;
    for (std::size_t l = 0; l < L; ++l) v += dec.F(d, l) * z[l];
    out[d] = v + dec.F(d, L);
  }
  return out;
}

inline double reconstruction_error(const Decoder& dec, std::span<const double> x, Code z) {
  double e = 0.0;
  for (std::size_t d = 0; d < dec.dim(); ++d) {
    double r = x[d] - decode_component(dec, d, z);
    e += r * r;
  }
  return e;
}

inline double e_ba(const Encoder& enc, const Decoder& dec, const Dataset& data) {
  require(enc.dim() == data.dim() && dec.dim() == data.dim() && enc.bits() == dec.bits(),
          "e_ba: inconsistent dimensions");
  RowReader rows(data);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto x = rows(i);
    total += reconstruction_error(dec, x, encode(enc, x));
  }
  return total;
}

inline double e_q(const Encoder& enc, const Decoder& dec, const CodeMatrix& codes, double mu,
                  const Dataset& data) {
  require(mu >= 0.0, "e_q: mu must be nonnegative");
  require(codes.size() == data.size() && codes.bits() == enc.bits(), "e_q: code matrix mismatch");
  require(enc.dim() == data.dim() && dec.dim() == data.dim() && enc.bits() == dec.bits(),
          "e_q: inconsistent dimensions");
  RowReader rows(data);
  double recon = 0.0;
  std::uint64_t mismatches = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto x = rows(i);
    recon += reconstruction_error(dec, x, codes[i]);
    mismatches += static_cast<std::uint64_t>(hamming(codes[i], encode(enc, x)));
  }
  return recon + mu * static_cast<double>(mismatches);
}

// ---------------------------------------------------------------------------
// Submodels.

enum class SubmodelKind : std::uint8_t { kEncoderBit = 0, kDecoderRow = 1 };

struct SubmodelId {
  SubmodelKind kind = SubmodelKind::kEncoderBit;
  std::uint32_t index = 0;

  friend bool operator==(const SubmodelId&, const SubmodelId&) = default;
};

// Global submodel numbering: encoder bits first, then decoder rows.
inline std::size_t submodel_count(std::size_t L, std::size_t D) { return L + D; }

inline SubmodelId submodel_at(std::size_t m, std::size_t L) {
  return m < L ? SubmodelId{SubmodelKind::kEncoderBit, static_cast<std::uint32_t>(m)}
               : SubmodelId{SubmodelKind::kDecoderRow, static_cast<std::uint32_t>(m - L)};
}

inline std::size_t payload_size(SubmodelId id, std::size_t L, std::size_t D) {
  return id.kind == SubmodelKind::kEncoderBit ? D + 1 : L + 1;
}

inline std::vector<double> get_payload(const BAModel& m, SubmodelId id) {
  if (id.kind == SubmodelKind::kEncoderBit) {
    const auto& A = m.encoder.A;
    std::vector<double> w(static_cast<std::size_t>(A.cols()));
    for (Eigen::Index j = 0; j < A.cols(); ++j) w[j] = A(id.index, j);
    return w;
  }
  const auto& F = m.decoder.F;
  std::vector<double> w(static_cast<std::size_t>(F.cols()));
  for (Eigen::Index j = 0; j < F.cols(); ++j) w[j] = F(id.index, j);
  return w;
}

inline void set_payload(BAModel& m, SubmodelId id, std::span<const double> w) {
  auto& M = id.kind == SubmodelKind::kEncoderBit ? m.encoder.A : m.decoder.F;
  require(static_cast<Eigen::Index>(w.size()) == M.cols(), "set_payload: length mismatch");
  for (Eigen::Index j = 0; j < M.cols(); ++j) M(id.index, j) = w[j];
}

// ---------------------------------------------------------------------------
// Linear SGD.

enum class LossKind { kHinge, kSquared };

struct SgdConfig {
  std::size_t epochs = 1;
  std::size_t minibatch = 1;
  double lambda = 1e-4;  // L2 on the non-bias weights, hinge only
  double eta_base = 0.1;
  std::uint64_t seed = 1;
  bool shuffle = true;
  std::size_t probe_points = 1000;

  void validate() const {
    require(epochs >= 1, "sgd: epochs must be >= 1");
    require(minibatch >= 1, "sgd: minibatch must be >= 1");
    require(lambda >= 0.0, "sgd: lambda must be nonnegative");
    require(eta_base > 0.0, "sgd: eta_base must be positive");
    require(probe_points >= 1, "sgd: probe_points must be >= 1");
  }
};

// A linear problem on one shard: point i has features phi_i (last entry 1)
// and target t_i (label +-1 for hinge, real for squared loss).
class LinearTask {
 public:
  virtual ~LinearTask() = default;
  virtual std::size_t size() const = 0;
  virtual std::size_t width() const = 0;
  virtual void features(std::size_t i, std::span<double> phi) const = 0;
  virtual double target(std::size_t i) const = 0;
};

// Bit l of the codes as +-1 labels on [x;1].
class EncoderBitTask final : public LinearTask {
 public:
  EncoderBitTask(const Dataset& data, const CodeMatrix& codes, std::size_t bit)
      : data_(data), codes_(codes), bit_(bit) {}
  std::size_t size() const override { return data_.size(); }
  std::size_t width() const override { return data_.dim() + 1; }
  void features(std::size_t i, std::span<double> phi) const override {
    data_.widen_row(i, phi.first(data_.dim()));
    phi[data_.dim()] = 1.0;
  }
  double target(std::size_t i) const override { return codes_.bit(i, bit_) ? 1.0 : -1.0; }

 private:
  const Dataset& data_;
  const CodeMatrix& codes_;
  std::size_t bit_;
};

// Feature d of x regressed on [z;1].
class DecoderRowTask final : public LinearTask {
 public:
  DecoderRowTask(const Dataset& data, const CodeMatrix& codes, std::size_t row)
      : data_(data), codes_(codes), row_(row) {}
  std::size_t size() const override { return data_.size(); }
  std::size_t width() const override { return codes_.bits() + 1; }
  void features(std::size_t i, std::span<double> phi) const override {
    const std::size_t L = codes_.bits();
    for (std::size_t l = 0; l < L; ++l) phi[l] = codes_.bit(i, l) ? 1.0 : 0.0;
    phi[L] = 1.0;
  }
  double target(std::size_t i) const override { return data_.at(i, row_); }

 private:
  const Dataset& data_;
  const CodeMatrix& codes_;
  std::size_t row_;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

}  // namespace detail

// Mean loss over points [0, n) plus the hinge regulariser.
inline double linear_objective(const LinearTask& task, LossKind loss, double lambda,
                               std::span<const double> w, std::size_t n) {
  std::vector<double> phi(task.width());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    task.features(i, phi);
    double s = detail::dot(w, phi);
    double t = task.target(i);
    if (loss == LossKind::kHinge) total += std::max(0.0, 1.0 - t * s);
    else total += 0.5 * (s - t) * (s - t);
  }
  double obj = n == 0 ? 0.0 : total / static_cast<double>(n);
  if (loss == LossKind::kHinge) {
    double r = 0.0;
    for (std::size_t j = 0; j + 1 < w.size(); ++j) r += w[j] * w[j];
    obj += 0.5 * lambda * r;
  }
  return obj;
}

// One pass of minibatch (sub)gradient steps in the given order.
inline void sgd_pass(const LinearTask& task, LossKind loss, double lambda, double eta,
                     std::size_t minibatch, std::span<const std::size_t> order, std::span<double> w) {
  const std::size_t width = task.width();
  std::vector<double> phi(width), grad(width);
  for (std::size_t start = 0; start < order.size(); start += minibatch) {
    const std::size_t stop = std::min(order.size(), start + minibatch);
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t k = start; k < stop; ++k) {
      task.features(order[k], phi);
      double s = detail::dot(w, phi);
      double t = task.target(order[k]);
      double coef = 0.0;
      if (loss == LossKind::kHinge) coef = t * s < 1.0 ? -t : 0.0;
      else coef = s - t;
      if (coef != 0.0)
        for (std::size_t j = 0; j < width; ++j) grad[j] += coef * phi[j];
    }
    const double scale = 1.0 / static_cast<double>(stop - start);
    for (std::size_t j = 0; j < width; ++j) {
      double g = grad[j] * scale;
      if (loss == LossKind::kHinge && j + 1 < width) g += lambda * w[j];
      w[j] -= eta * g;
    }
  }
}

inline std::vector<double> step_candidates(double eta_base) {
  std::vector<double> c;
  for (int k = -4; k <= 4; ++k) c.push_back(std::ldexp(eta_base, k));
  return c;
}

struct ProbeResult {
  double eta = 0.0;
  std::size_t points_used = 0;
};

// Tries every candidate for one constant-step pass over the first
// min(probe_points, n) points and keeps the one with the lowest objective
// afterwards. Ties go to the smaller step; non-finite results never win.
inline ProbeResult probe_step_size(const LinearTask& task, LossKind loss, double lambda,
                                   std::size_t minibatch, std::span<const double> w,
                                   std::span<const double> candidates, std::size_t probe_points = 1000) {
  require(!candidates.empty(), "probe_step_size: no candidates");
  require(task.size() >= 1, "probe_step_size: empty shard");
  std::vector<double> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  ProbeResult best{sorted.front(), std::min(probe_points, task.size())};
  if (sorted.size() == 1) return best;

  std::vector<std::size_t> head(best.points_used);
  std::iota(head.begin(), head.end(), 0);
  double best_obj = std::numeric_limits<double>::infinity();
  std::vector<double> trial(w.size());
  for (double eta : sorted) {
    std::copy(w.begin(), w.end(), trial.begin());
    sgd_pass(task, loss, lambda, eta, minibatch, head, trial);
    double obj = linear_objective(task, loss, lambda, trial, head.size());
    if (!std::isfinite(obj)) obj = std::numeric_limits<double>::infinity();
    if (obj < best_obj) {
      best_obj = obj;
      best.eta = eta;
    }
  }
  return best;
}

// Where a visit happens; part of the seed of its minibatch order.
struct VisitContext {
  std::size_t iteration = 0;
  std::size_t machine = 0;
};

inline std::uint64_t visit_seed(const SgdConfig& cfg, const VisitContext& ctx, SubmodelId id,
                                std::size_t epoch) {
  return mix_seed({cfg.seed, ctx.iteration, static_cast<std::uint64_t>(id.kind), id.index, ctx.machine,
                   epoch});
}

// `passes` consecutive epochs over one shard, numbered from `first_epoch`.
// Each epoch probes its base step and then decays it as eta0 / (1 + epoch).
// The serial and the ring W steps both train through here.
inline void train_visit(const LinearTask& task, LossKind loss, SubmodelId id, const SgdConfig& cfg,
                        const VisitContext& ctx, std::size_t first_epoch, std::size_t passes,
                        std::span<double> w) {
  if (task.size() == 0) return;
  auto candidates = step_candidates(cfg.eta_base);
  std::vector<std::size_t> order(task.size());
  for (std::size_t p = 0; p < passes; ++p) {
    const std::size_t epoch = first_epoch + p;
    auto probe = probe_step_size(task, loss, cfg.lambda, cfg.minibatch, w, candidates, cfg.probe_points);
    const double eta = probe.eta / (1.0 + static_cast<double>(epoch));
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle) {
      Rng rng(visit_seed(cfg, ctx, id, epoch));
      portable_shuffle(order.data(), order.size(), rng);
    }
    sgd_pass(task, loss, cfg.lambda, eta, cfg.minibatch, order, w);
  }
}

// Trains one submodel payload on a shard (data + its codes).
inline void train_submodel(SubmodelId id, const Dataset& shard, const CodeMatrix& codes, const SgdConfig& cfg,
                           const VisitContext& ctx, std::size_t first_epoch, std::size_t passes,
                           std::span<double> w) {
  if (id.kind == SubmodelKind::kEncoderBit) {
    EncoderBitTask task(shard, codes, id.index);
    train_visit(task, LossKind::kHinge, id, cfg, ctx, first_epoch, passes, w);
  } else {
    DecoderRowTask task(shard, codes, id.index);
    train_visit(task, LossKind::kSquared, id, cfg, ctx, first_epoch, passes, w);
  }
}

inline std::vector<double> fit_svm_sgd(const Dataset& shard, const CodeMatrix& codes, std::size_t bit,
                                       std::vector<double> w, const SgdConfig& cfg, const VisitContext& ctx = {}) {
  cfg.validate();
  train_submodel({SubmodelKind::kEncoderBit, static_cast<std::uint32_t>(bit)}, shard, codes, cfg, ctx, 0,
                 cfg.epochs, w);
  return w;
}

inline std::vector<double> fit_decoder_row_sgd(const Dataset& shard, const CodeMatrix& codes, std::size_t row,
                                               std::vector<double> w, const SgdConfig& cfg,
                                               const VisitContext& ctx = {}) {
  cfg.validate();
  train_submodel({SubmodelKind::kDecoderRow, static_cast<std::uint32_t>(row)}, shard, codes, cfg, ctx, 0,
                 cfg.epochs, w);
  return w;
}

inline Decoder fit_decoder_sgd(const Dataset& shard, const CodeMatrix& codes, const Decoder& start,
                               const SgdConfig& cfg, const VisitContext& ctx = {}) {
  Decoder out = start;
  for (std::size_t d = 0; d < shard.dim(); ++d) {
    std::vector<double> w(out.F.cols());
    for (Eigen::Index j = 0; j < out.F.cols(); ++j) w[j] = out.F(d, j);
    w = fit_decoder_row_sgd(shard, codes, d, std::move(w), cfg, ctx);
    for (Eigen::Index j = 0; j < out.F.cols(); ++j) out.F(d, j) = w[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form decoder.

inline constexpr double kLsqRidge = 1e-8;

struct LsqFit {
  Decoder decoder;
  bool ridge_used = false;
};

// Normal equations on [Z;1]; a singular system gets kLsqRidge on the diagonal.
inline LsqFit fit_decoder_lsq(const CodeMatrix& codes, const Dataset& data) {
  require(codes.size() == data.size(), "fit_decoder_lsq: size mismatch");
  const std::size_t L = codes.bits();
  const std::size_t D = data.dim();
  const Eigen::Index W = static_cast<Eigen::Index>(L + 1);
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(W, W);
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(W, static_cast<Eigen::Index>(D));
  Eigen::VectorXd zt(W);
  RowReader rows(data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t l = 0; l < L; ++l) zt(l) = codes.bit(i, l) ? 1.0 : 0.0;
    zt(L) = 1.0;
    G.noalias() += zt * zt.transpose();
    auto x = rows(i);
    for (std::size_t d = 0; d < D; ++d) B.col(d) += x[d] * zt;
  }

  LsqFit out;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(G);
  Eigen::MatrixXd sol;
  if (lu.isInvertible()) {
    sol = lu.solve(B);
  } else {
    out.ridge_used = true;
    Eigen::MatrixXd Gr = G + kLsqRidge * Eigen::MatrixXd::Identity(W, W);
    sol = Gr.ldlt().solve(B);
  }
  out.decoder.F = sol.transpose();
  return out;
}

// Hamming mismatches between bit l of the codes and h_l over the data.
inline std::size_t bit_mismatches(const Encoder& enc, std::size_t l, const Dataset& data, const CodeMatrix& codes) {
  RowReader rows(data);
  std::size_t n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    bool h = encoder_activation(enc, l, rows(i)) >= 0.0;
    if (h != codes.bit(i, l)) ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Checkpoint: "PMAC", u32 version, u32 L, u32 D, A then F, row-major f64 LE.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const BAModel& m) {
  const auto L = static_cast<std::uint32_t>(m.bits());
  const auto D = static_cast<std::uint32_t>(m.dim());
  os.write("PMAC", 4);
  le::put_u32(os, kCheckpointVersion);
  le::put_u32(os, L);
  le::put_u32(os, D);
  for (Eigen::Index r = 0; r < m.encoder.A.rows(); ++r)
    for (Eigen::Index c = 0; c < m.encoder.A.cols(); ++c) le::put_f64(os, m.encoder.A(r, c));
  for (Eigen::Index r = 0; r < m.decoder.F.rows(); ++r)
    for (Eigen::Index c = 0; c < m.decoder.F.cols(); ++c) le::put_f64(os, m.decoder.F(r, c));
}

inline BAModel read_checkpoint(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string(magic, 4) != "PMAC")
    throw Error(ErrorCode::kMalformedRecord, "not a model checkpoint");
  auto version = le::get_u32(is);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::kMalformedRecord, "unsupported checkpoint version " + std::to_string(version));
  const std::size_t L = le::get_u32(is);
  const std::size_t D = le::get_u32(is);
  BAModel m = BAModel::zeros(L, D);
  for (std::size_t r = 0; r < L; ++r)
    for (std::size_t c = 0; c <= D; ++c) m.encoder.A(r, c) = le::get_f64(is);
  for (std::size_t r = 0; r < D; ++r)
    for (std::size_t c = 0; c <= L; ++c) m.decoder.F(r, c) = le::get_f64(is);
  return m;
}

inline void save_checkpoint(const std::string& path, const BAModel& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  write_checkpoint(out, m);
}

inline BAModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace parmac
