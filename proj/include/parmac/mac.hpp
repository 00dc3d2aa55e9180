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

// Serial MAC for the binary autoencoder: per-point Z solvers, the serial W
// step and the penalty-continuation loop.

#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "parmac/common.hpp"
#include "parmac/data.hpp"
#include "parmac/eval.hpp"
#include "parmac/model.hpp"

namespace parmac {

struct MuSchedule {
  double mu0 = 0.005;
  double factor = 1.2;
  std::size_t max_iters = 26;

  void validate() const {
    require(mu0 > 0.0 && std::isfinite(mu0), "mu0 must be positive");
    require(factor > 1.0 && std::isfinite(factor), "mu factor must be > 1");
    require(max_iters >= 1, "schedule needs at least one iteration");
  }

  double value(std::size_t i) const {
    require(i < max_iters, "mu schedule index out of range");
    return mu0 * std::pow(factor, static_cast<double>(i));
  }
};

inline double mu_schedule_value(const MuSchedule& s, std::size_t i) { return s.value(i); }

enum class ZMode { kEnumerate, kAlternate };
enum class WMode { kSgd, kExact };

inline constexpr std::size_t kMaxEnumerateBits = 20;
inline constexpr double kRelaxedRidge = 1e-8;

inline double z_objective(std::span<const double> x, Code hx, const Decoder& dec, double mu, Code z) {
  return reconstruction_error(dec, x, z) + mu * static_cast<double>(hamming(z, hx));
}

// Among codes of equal objective: fewer disagreements with hx first, then the
// lexicographically smaller bit vector (z_0 compared first).
inline bool tie_break_less(Code a, Code b, Code hx) {
  int da = hamming(a, hx), db = hamming(b, hx);
  if (da != db) return da < db;
  Code diff = a ^ b;
  if (diff == 0) return false;
  Code low = diff & (~diff + 1);
  return (a & low) == 0;
}

// Exhaustive Z solver. ||f(z)||^2 is tabulated once per decoder; each point
// then walks the 2^L codes in Gray order with O(1) work per code. Codes whose
// fast value lands within a small tolerance of the best are re-scored with
// the direct objective so the result (including ties) is exact.
class ZEnumerator {
 public:
  explicit ZEnumerator(const Decoder& dec) : dec_(&dec), L_(dec.bits()), D_(dec.dim()) {
    if (L_ > kMaxEnumerateBits)
      throw Error(ErrorCode::kLTooLarge, "enumeration needs L <= 20, got L=" + std::to_string(L_));
    const std::size_t n = std::size_t{1} << L_;
    norm2_.resize(n);
    std::vector<double> v(D_);
    for (std::size_t d = 0; d < D_; ++d) v[d] = dec.F(d, L_);
    Code g = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0) {
        auto bit = static_cast<std::size_t>(std::countr_zero(i));
        g ^= Code{1} << bit;
        double s = (g >> bit) & 1U ? 1.0 : -1.0;
        for (std::size_t d = 0; d < D_; ++d) v[d] += s * dec.F(d, bit);
      }
      double nn = 0.0;
      for (std::size_t d = 0; d < D_; ++d) nn += v[d] * v[d];
      norm2_[g] = nn;
    }
  }

  Code solve(std::span<const double> x, Code hx, double mu) const {
    const std::size_t n = std::size_t{1} << L_;
    std::vector<double> p(L_);
    double xb = 0.0, xx = 0.0;
    for (std::size_t d = 0; d < D_; ++d) {
      xb += x[d] * dec_->F(d, L_);
      xx += x[d] * x[d];
    }
    for (std::size_t l = 0; l < L_; ++l) {
      double s = 0.0;
      for (std::size_t d = 0; d < D_; ++d) s += x[d] * dec_->F(d, l);
      p[l] = s;
    }

    approx_.resize(n);
    double best = std::numeric_limits<double>::infinity();
    double cross = xb;
    Code g = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0) {
        auto bit = static_cast<std::size_t>(std::countr_zero(i));
        g ^= Code{1} << bit;
        cross += (g >> bit) & 1U ? p[bit] : -p[bit];
      }
      double v = xx - 2.0 * cross + norm2_[g] + mu * static_cast<double>(hamming(g, hx));
      approx_[g] = v;
      best = std::min(best, v);
    }

    double scale = 1.0 + xx + std::abs(best);
    for (std::size_t d = 0; d < D_; ++d) scale += std::abs(dec_->F(d, L_));
    const double tol = 1e-9 * scale;
    Code arg = 0;
    double arg_obj = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (approx_[c] > best + tol) continue;
      double obj = z_objective(x, hx, *dec_, mu, c);
      if (obj < arg_obj || (obj == arg_obj && tie_break_less(c, arg, hx))) {
        arg_obj = obj;
        arg = c;
      }
    }
    return arg;
  }

 private:
  const Decoder* dec_;
  std::size_t L_;
  std::size_t D_;
  std::vector<double> norm2_;
  mutable std::vector<double> approx_;
};

inline Code z_step_enumerate(std::span<const double> x, Code hx, const Decoder& dec, double mu) {
  return ZEnumerator(dec).solve(x, hx, mu);
}

// Continuous relaxation min_z ||x - f(z)||^2 + mu ||z - hx||^2, factored
// once per (decoder, mu) and shared by every point.
class RelaxedSolver {
 public:
  RelaxedSolver(const Decoder& dec, double mu) : dec_(&dec), mu_(mu), L_(dec.bits()), D_(dec.dim()) {
    W_ = dec.F.leftCols(static_cast<Eigen::Index>(L_));
    b_ = dec.F.col(static_cast<Eigen::Index>(L_));
    Eigen::MatrixXd H = W_.transpose() * W_;
    H.diagonal().array() += mu;
    llt_.compute(H);
    if (llt_.info() != Eigen::Success || !usable(H)) {
      ridge_ = true;
      H.diagonal().array() += kRelaxedRidge;
      llt_.compute(H);
      ok_ = llt_.info() == Eigen::Success;
    }
  }

  bool degenerate() const { return !ok_; }
  bool ridge_used() const { return ridge_; }

  // Clipped to [0,1] and thresholded at 0.5. Falls back to hx when the
  // system cannot be solved.
  Code solve(std::span<const double> x, Code hx) const {
    if (!ok_) return hx;
    Eigen::VectorXd r(static_cast<Eigen::Index>(D_));
    for (std::size_t d = 0; d < D_; ++d) r(d) = x[d] - b_(d);
    Eigen::VectorXd rhs = W_.transpose() * r;
    for (std::size_t l = 0; l < L_; ++l) rhs(l) += mu_ * ((hx >> l) & 1U ? 1.0 : 0.0);
    Eigen::VectorXd z = llt_.solve(rhs);
    Code out = 0;
    for (std::size_t l = 0; l < L_; ++l) {
      if (!std::isfinite(z(l))) return hx;
      if (std::clamp(z(l), 0.0, 1.0) >= 0.5) out |= Code{1} << l;
    }
    return out;
  }

 private:
  // Rejects factorizations of numerically singular matrices.
  bool usable(const Eigen::MatrixXd& H) const {
    if (H.rows() == 0) return true;
    auto d = llt_.matrixLLT().diagonal().cwiseAbs();
    double scale = std::max(H.diagonal().cwiseAbs().maxCoeff(), 1.0);
    return d.minCoeff() * d.minCoeff() > 1e-14 * scale;
  }

  const Decoder* dec_;
  double mu_;
  std::size_t L_;
  std::size_t D_;
  Eigen::MatrixXd W_;
  Eigen::VectorXd b_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  bool ridge_ = false;
  bool ok_ = true;
};

inline Code z_step_relaxed_init(std::span<const double> x, Code hx, const Decoder& dec, double mu) {
  return RelaxedSolver(dec, mu).solve(x, hx);
}

// Cyclic single-bit descent; a flip is kept only when the direct objective
// strictly drops. Stops after a sweep without flips.
inline Code z_step_alternate(std::span<const double> x, Code hx, const Decoder& dec, double mu, Code z_init) {
  const std::size_t L = dec.bits();
  const std::size_t D = dec.dim();
  Code z = z_init;
  double obj = z_objective(x, hx, dec, mu, z);
  std::vector<double> r(D);
  auto residual = [&] {
    for (std::size_t d = 0; d < D; ++d) r[d] = x[d] - decode_component(dec, d, z);
  };
  residual();
  bool flipped = true;
  while (flipped) {
    flipped = false;
    for (std::size_t l = 0; l < L; ++l) {
      const Code cand = z ^ (Code{1} << l);
      const double s = (cand >> l) & 1U ? 1.0 : -1.0;
      double e = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        double rd = r[d] - s * dec.F(d, l);
        e += rd * rd;
      }
      double trial = e + mu * static_cast<double>(hamming(cand, hx));
      if (!(trial < obj)) continue;
      double exact = z_objective(x, hx, dec, mu, cand);
      if (exact < obj) {
        z = cand;
        obj = exact;
        residual();
        flipped = true;
      }
    }
  }
  return z;
}

// Per-point Z step over one shard; returns how many codes changed.
// Alternate mode starts from the relaxed solution and keeps the previous code
// unless the new one is strictly better.
inline std::size_t z_step(const Dataset& data, const Encoder& enc, const Decoder& dec, double mu, ZMode mode,
                          CodeMatrix& codes) {
  require(codes.size() == data.size() && codes.bits() == enc.bits(), "z_step: code matrix mismatch");
  RowReader rows(data);
  std::size_t changed = 0;
  if (mode == ZMode::kEnumerate) {
    ZEnumerator solver(dec);
    for (std::size_t i = 0; i < data.size(); ++i) {
      auto x = rows(i);
      Code z = solver.solve(x, encode(enc, x), mu);
      if (z != codes[i]) ++changed;
      codes[i] = z;
    }
    return changed;
  }
  RelaxedSolver relaxed(dec, mu);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto x = rows(i);
    Code hx = encode(enc, x);
    Code z = z_step_alternate(x, hx, dec, mu, relaxed.solve(x, hx));
    if (z != codes[i] && z_objective(x, hx, dec, mu, codes[i]) > z_objective(x, hx, dec, mu, z)) {
      codes[i] = z;
      ++changed;
    }
  }
  return changed;
}

// ---------------------------------------------------------------------------
// Initialisation and validation split.

struct MacState {
  BAModel model;
  CodeMatrix codes;
  std::size_t degenerate_bits = 0;
};

// Truncated-PCA codes and hash functions; the decoder is the least-squares
// fit on the PCA subset.
inline MacState initialize_from_pca(const Dataset& train, std::size_t L, std::size_t pca_subset, std::uint64_t seed) {
  std::size_t subset = std::min(pca_subset, train.size());
  auto pca = pca_init(train, L, subset, seed);
  MacState s;
  s.model.encoder.A = pca.weights;
  s.codes = pca.codes;
  s.degenerate_bits = pca.degenerate_bits;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed({seed, 0x9ca1ULL}));
  portable_shuffle(order.data(), order.size(), rng);
  order.resize(subset);
  std::sort(order.begin(), order.end());
  s.model.decoder = fit_decoder_lsq(pca.codes.subset(order), train.subset(order)).decoder;
  return s;
}

struct Split {
  Dataset train;
  Dataset validation;
};

// Seeded hold-out; both parts keep the original point order.
inline Split split_validation(const Dataset& data, double fraction, std::uint64_t seed) {
  require(fraction >= 0.0 && fraction < 1.0, "validation fraction must be in [0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed({seed, 0x7a11ULL}));
  portable_shuffle(order.data(), order.size(), rng);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> tr(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(tr.begin(), tr.end());
  return {data.subset(tr), data.subset(val)};
}

// ---------------------------------------------------------------------------
// Training loop.

struct MacConfig {
  std::size_t L = 8;
  MuSchedule schedule;
  SgdConfig sgd;
  ZMode z_mode = ZMode::kEnumerate;
  WMode w_mode = WMode::kSgd;
  std::size_t exact_svm_epochs = 30;
  bool early_stop = true;
  bool timing = false;
  MetricConfig metric;

  void validate() const {
    require(L >= 1 && L <= kMaxCodeBits, "L must be in [1, 64]");
    schedule.validate();
    sgd.validate();
    require(exact_svm_epochs >= 1, "exact_svm_epochs must be >= 1");
    metric.validate();
    if (z_mode == ZMode::kEnumerate && L > kMaxEnumerateBits)
      throw Error(ErrorCode::kLTooLarge, "enumeration needs L <= 20");
  }
};

struct IterationRecord {
  std::size_t iter = 0;
  double mu = 0.0;
  double eq_before_w = 0.0;
  double eq_after_w = 0.0;
  double eq = 0.0;
  double eba = 0.0;
  double val_precision = 0.0;
  double seconds = 0.0;
  std::size_t codes_changed = 0;

  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct RunRecord {
  std::vector<IterationRecord> iterations;
  double initial_precision = 0.0;
  double best_precision = 0.0;
  // -1 when the initial model was never beaten.
  long best_iter = -1;
  std::string stop_reason;
  std::size_t degenerate_bits = 0;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_run_csv(std::ostream& os, const RunRecord& r) {
  os << "iter,mu,EQ,EBA,val_precision,seconds,codes_changed\n";
  for (const auto& it : r.iterations)
    os << it.iter << ',' << format_double(it.mu) << ',' << format_double(it.eq) << ',' << format_double(it.eba)
       << ',' << format_double(it.val_precision) << ',' << format_double(it.seconds) << ',' << it.codes_changed
       << '\n';
}

// What one MAC iteration needs from an executor. The serial trainer and the
// distributed runtime both drive mac_loop through this, so they share every
// bookkeeping and stopping decision.
struct MacHooks {
  std::function<void(BAModel&, std::size_t iter, double mu)> w_step;
  std::function<std::size_t(const BAModel&, double mu)> z_step;
  std::function<double(const BAModel&, double mu)> e_q;
  std::function<double(const BAModel&)> e_ba;
  std::function<bool(const BAModel&)> codes_match_hash;
};

struct MacResult {
  BAModel model;
  RunRecord record;
};

inline MacResult mac_loop(const MacConfig& cfg, BAModel model, const ValidationEvaluator& validation,
                          const MacHooks& hooks) {
  cfg.validate();
  using Clock = std::chrono::steady_clock;
  MacResult out;
  auto& rec = out.record;
  rec.initial_precision = validation.precision_of(model.encoder);
  rec.best_precision = rec.initial_precision;
  out.model = model;
  double prev = rec.initial_precision;
  rec.stop_reason = "max_iters";

  for (std::size_t i = 0; i < cfg.schedule.max_iters; ++i) {
    auto t0 = Clock::now();
    IterationRecord it;
    it.iter = i;
    it.mu = cfg.schedule.value(i);
    it.eq_before_w = hooks.e_q(model, it.mu);
    hooks.w_step(model, i, it.mu);
    it.eq_after_w = hooks.e_q(model, it.mu);
    it.codes_changed = hooks.z_step(model, it.mu);
    it.eq = hooks.e_q(model, it.mu);
    it.eba = hooks.e_ba(model);
    it.val_precision = validation.precision_of(model.encoder);
    if (cfg.timing) it.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    rec.iterations.push_back(it);

    if (!validation.enabled() || it.val_precision > rec.best_precision) {
      rec.best_precision = it.val_precision;
      rec.best_iter = static_cast<long>(i);
      out.model = model;
    }
    if (it.codes_changed == 0 && hooks.codes_match_hash(model)) {
      rec.stop_reason = "z_stable";
      break;
    }
    if (cfg.early_stop && validation.enabled() && it.val_precision < prev) {
      rec.stop_reason = "validation_decrease";
      break;
    }
    prev = it.val_precision;
  }
  return out;
}

// Serial W step over one dataset. SGD mode trains each submodel for e epochs
// through the same visit routine the ring uses. Exact mode solves the decoder
// in closed form and keeps a retrained hash function only if it does not
// disagree with the codes more often than before.
inline void serial_w_step(BAModel& model, const Dataset& data, const CodeMatrix& codes, const MacConfig& cfg,
                          std::size_t iter) {
  const std::size_t L = model.bits();
  const std::size_t D = model.dim();
  const VisitContext ctx{iter, 0};
  if (cfg.w_mode == WMode::kSgd) {
    for (std::size_t m = 0; m < submodel_count(L, D); ++m) {
      SubmodelId id = submodel_at(m, L);
      auto w = get_payload(model, id);
      for (std::size_t e = 0; e < cfg.sgd.epochs; ++e) train_submodel(id, data, codes, cfg.sgd, ctx, e, 1, w);
      set_payload(model, id, w);
    }
    return;
  }
  SgdConfig svm = cfg.sgd;
  svm.epochs = cfg.exact_svm_epochs;
  for (std::size_t l = 0; l < L; ++l) {
    SubmodelId id{SubmodelKind::kEncoderBit, static_cast<std::uint32_t>(l)};
    auto before = bit_mismatches(model.encoder, l, data, codes);
    auto old = get_payload(model, id);
    auto w = old;
    train_submodel(id, data, codes, svm, ctx, 0, svm.epochs, w);
    set_payload(model, id, w);
    if (bit_mismatches(model.encoder, l, data, codes) > before) set_payload(model, id, old);
  }
  model.decoder = fit_decoder_lsq(codes, data).decoder;
}

inline MacResult mac_train(const Dataset& train, const Dataset& validation, const MacConfig& cfg, MacState init) {
  cfg.validate();
  require(init.codes.size() == train.size() && init.codes.bits() == cfg.L, "mac_train: initial codes mismatch");
  require(init.model.bits() == cfg.L && init.model.dim() == train.dim(), "mac_train: initial model mismatch");
  CodeMatrix codes = std::move(init.codes);
  ValidationEvaluator evaluator(train, validation, cfg.metric);

  MacHooks hooks;
  hooks.w_step = [&](BAModel& m, std::size_t iter, double) { serial_w_step(m, train, codes, cfg, iter); };
  hooks.z_step = [&](const BAModel& m, double mu) {
    return z_step(train, m.encoder, m.decoder, mu, cfg.z_mode, codes);
  };
  hooks.e_q = [&](const BAModel& m, double mu) { return e_q(m.encoder, m.decoder, codes, mu, train); };
  hooks.e_ba = [&](const BAModel& m) { return e_ba(m.encoder, m.decoder, train); };
  hooks.codes_match_hash = [&](const BAModel& m) { return encode_all(m.encoder, train) == codes; };

  auto result = mac_loop(cfg, std::move(init.model), evaluator, hooks);
  result.record.degenerate_bits = init.degenerate_bits;
  return result;
}

}  // namespace parmac
