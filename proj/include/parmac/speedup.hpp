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

// Closed-form runtime and speedup of the ring W step plus local Z step, with
// the interval analysis around the discontinuities at P = M/k.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "parmac/common.hpp"

namespace parmac {

// P is a real for the analysis and an integer for runtime predictions.
// Times share one arbitrary unit.
struct SpeedupParams {
  double P = 1;
  double N = 1;
  double M = 1;
  double e = 1;
  double t_w_r = 1;
  double t_w_c = 1;
  double t_z_r = 1;

  void validate() const {
    require(P >= 1 && N >= 1 && M >= 1 && e >= 1, "P, N, M, e must be >= 1");
    require(t_w_r > 0 && t_z_r > 0 && t_w_c >= 0, "times must be positive (t_w_c may be 0)");
  }

  SpeedupParams with_p(double p) const {
    SpeedupParams q = *this;
    q.P = p;
    return q;
  }
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct Ratios {
  double rho1 = 0, rho2 = 0, rho = 0;
  double rho1_n = 0, rho2_n = 0, rho_n = 0;  // primed: times N
};

// Without communication every ratio is infinite.
inline Ratios ratios(const SpeedupParams& p) {
  Ratios r;
  if (p.t_w_c == 0) {
    r.rho1 = r.rho2 = r.rho = r.rho1_n = r.rho2_n = r.rho_n = kInf;
    return r;
  }
  const double c = (p.e + 1) * p.t_w_c;
  r.rho1 = p.t_z_r / c;
  r.rho2 = p.e * p.t_w_r / c;
  r.rho = r.rho1 + r.rho2;
  r.rho1_n = r.rho1 * p.N;
  r.rho2_n = r.rho2 * p.N;
  r.rho_n = r.rho * p.N;
  return r;
}

// Submodels per machine per tick. A relative slack keeps P = M/k (computed in
// floating point) inside its own interval instead of rounding up to k + 1.
inline double ceil_ratio(double M, double P) { return std::max(1.0, std::ceil(M / P * (1 - 1e-12))); }

inline double runtime_z(const SpeedupParams& p) { return p.M * (p.N / p.P) * p.t_z_r; }

inline double runtime_w(const SpeedupParams& p) {
  const double k = ceil_ratio(p.M, p.P);
  return k * (p.t_w_r * p.N / p.P + p.t_w_c) * p.P * p.e + k * p.t_w_c * p.P;
}

inline double runtime_total(const SpeedupParams& p) { return runtime_w(p) + runtime_z(p); }

// Serial baseline: no communication at all.
inline double runtime_serial(const SpeedupParams& p) { return p.M * p.N * p.t_z_r + p.M * p.N * p.e * p.t_w_r; }

// T(1)/T(P) with no special cases.
inline double speedup_ratio_of_runtimes(const SpeedupParams& p) { return runtime_serial(p) / runtime_total(p); }

// Speedup in terms of the ratios; P may be real.
inline double speedup_rho(const SpeedupParams& p) {
  const double k = ceil_ratio(p.M, p.P);
  if (p.t_w_c == 0) {
    // T(P) = kNe t_w_r + MN t_z_r / P
    return runtime_serial(p) / (k * p.N * p.e * p.t_w_r + p.M * p.N * p.t_z_r / p.P);
  }
  const auto r = ratios(p);
  const double m = p.M / k;
  return r.rho * m * p.P / (p.P * p.P / p.N + r.rho2 * p.P + r.rho1 * m);
}

// S(1) is 1 by definition.
inline double speedup(const SpeedupParams& p) {
  p.validate();
  if (p.P == 1) return 1.0;
  return speedup_ratio_of_runtimes(p);
}

inline bool divides(double M, double P) {
  return P >= 1 && std::floor(P) == P && std::fmod(M, P) == 0.0;
}

inline double speedup_divisible(const SpeedupParams& p) {
  p.validate();
  if (!divides(p.M, p.P))
    throw Error(ErrorCode::kNotDivisible, "M=" + std::to_string(p.M) + " is not divisible by P=" + std::to_string(p.P));
  if (p.P == 1 || p.t_w_c == 0) return p.P;
  return p.P / (1 + p.P / ratios(p).rho_n);
}

struct Interval {
  double lo = 1;
  double hi = kInf;  // exclusive
  std::size_t k = 1;
};

// Half-open intervals on which ceil(M/P) = k, from k = M (starting at P = 1)
// up to k = 1 ([M, inf)).
inline std::vector<Interval> interval_bounds(std::size_t M) {
  require(M >= 1, "interval_bounds needs M >= 1");
  std::vector<Interval> out;
  for (std::size_t k = M; k >= 1; --k) {
    Interval iv;
    iv.k = k;
    iv.lo = static_cast<double>(M) / static_cast<double>(k);
    iv.hi = k == 1 ? kInf : static_cast<double>(M) / static_cast<double>(k - 1);
    out.push_back(iv);
  }
  return out;
}

enum class IntervalShape { kDecreasing, kIncreasing, kInteriorMax };

inline const char* shape_name(IntervalShape s) {
  switch (s) {
    case IntervalShape::kDecreasing: return "decreasing";
    case IntervalShape::kIncreasing: return "increasing";
    case IntervalShape::kInteriorMax: return "interior_max";
  }
  return "?";
}

struct IntervalMax {
  double P_star = 0;
  double S_star = 0;
  Interval interval;
  IntervalShape shape = IntervalShape::kInteriorMax;
};

// Unconstrained maximiser of the k-th branch and how it sits in the interval.
inline IntervalMax interval_max(const SpeedupParams& p, std::size_t k) {
  require(k >= 1 && static_cast<double>(k) <= p.M, "interval_max needs 1 <= k <= M");
  const auto r = ratios(p);
  const double m = p.M / static_cast<double>(k);
  IntervalMax out;
  out.interval.k = k;
  out.interval.lo = m;
  out.interval.hi = k == 1 ? kInf : p.M / static_cast<double>(k - 1);
  if (p.t_w_c == 0) {
    out.P_star = kInf;
    out.S_star = kInf;
    out.shape = IntervalShape::kIncreasing;
    return out;
  }
  out.P_star = std::sqrt(r.rho1 * p.M * p.N / static_cast<double>(k));
  out.S_star = r.rho * m / (r.rho2 + 2 * std::sqrt(r.rho1 * m / p.N));
  if (out.P_star <= out.interval.lo) out.shape = IntervalShape::kDecreasing;
  else if (out.P_star >= out.interval.hi) out.shape = IntervalShape::kIncreasing;
  else out.shape = IntervalShape::kInteriorMax;
  return out;
}

struct GlobalMax {
  double P_star = 0;
  double S_star = 0;
};

inline GlobalMax global_max(const SpeedupParams& p) {
  const auto r = ratios(p);
  if (p.t_w_c == 0) return {kInf, kInf};
  if (p.M >= r.rho1_n) return {p.M, p.M / (1 + p.M / r.rho_n)};
  auto im = interval_max(p, 1);
  return {im.P_star, im.S_star};
}

// Large-N form, dropping P^2/N: rho / (rho1/P + k rho2/M). Equals P when P
// divides M.
inline double large_n_approx(const SpeedupParams& p) {
  if (p.t_w_c == 0) return speedup_rho(p);
  const auto r = ratios(p);
  const double k = ceil_ratio(p.M, p.P);
  return r.rho / (r.rho1 / p.P + k * r.rho2 / p.M);
}

inline bool rel_equal(double a, double b, double tol) {
  if (a == b) return true;
  return std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b));
}

struct InvarianceReport {
  bool scale_n_and_compute = false;   // (aN, t_w_r/a, t_z_r/a)
  bool scale_n_and_comm = false;      // (aN, a t_w_c)
  bool scale_all_times = false;       // (a t_w_r, a t_z_r, a t_w_c)
  bool comm_only_changes = false;     // negative control: a t_w_c alone

  bool invariant() const { return scale_n_and_compute && scale_n_and_comm && scale_all_times; }
};

inline InvarianceReport invariance_check(const SpeedupParams& p, double alpha, double tol = 1e-12) {
  require(alpha > 0, "invariance_check needs alpha > 0");
  const double s = speedup_rho(p);
  InvarianceReport rep;
  SpeedupParams a = p;
  a.N *= alpha;
  a.t_w_r /= alpha;
  a.t_z_r /= alpha;
  rep.scale_n_and_compute = rel_equal(s, speedup_rho(a), tol);
  SpeedupParams b = p;
  b.N *= alpha;
  b.t_w_c *= alpha;
  rep.scale_n_and_comm = rel_equal(s, speedup_rho(b), tol);
  SpeedupParams c = p;
  c.t_w_r *= alpha;
  c.t_z_r *= alpha;
  c.t_w_c *= alpha;
  rep.scale_all_times = rel_equal(s, speedup_rho(c), tol);
  SpeedupParams d = p;
  d.t_w_c *= alpha;
  rep.comm_only_changes = !rel_equal(s, speedup_rho(d), tol);
  return rep;
}

// ---------------------------------------------------------------------------
// Numeric verification of the interval theorems.

struct VerifierConfig {
  std::vector<std::size_t> M_values = {2, 3, 4, 8, 12, 32};
  std::size_t draws = 100;
  std::size_t grid = 1000;  // points per interval
  std::uint64_t seed = 1;
  double slope_tol = 1e-12;
};

// Log-uniform draws over a wide range of communication/computation balances.
inline SpeedupParams sample_params(Rng& rng, double M) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto logu = [&](double lo, double hi) { return std::pow(10.0, lo + (hi - lo) * u(rng)); };
  SpeedupParams p;
  p.M = M;
  p.N = std::round(logu(1, 7));
  p.e = static_cast<double>(1 + rng() % 5);
  p.t_w_r = logu(-2, 2);
  p.t_w_c = logu(-2, 5);
  p.t_z_r = logu(-2, 3);
  return p;
}

inline nlohmann::json params_json(const SpeedupParams& p) {
  return {{"N", p.N}, {"M", p.M}, {"e", p.e}, {"t_w_r", p.t_w_r}, {"t_w_c", p.t_w_c}, {"t_z_r", p.t_z_r}};
}

// For every draw and every M: S(M/k) beats every smaller P on a dense grid,
// S*_k decreases in k, and each interval's discrete slope changes sign at most
// once (rising then falling) in agreement with the interval_max shape.
inline nlohmann::json theorem_verifier(const VerifierConfig& cfg) {
  Rng rng(mix_seed({cfg.seed, 0x7e02ULL}));
  nlohmann::json violations = nlohmann::json::array();
  std::size_t checks = 0;
  auto violate = [&](const char* kind, const SpeedupParams& p, std::size_t k, double P, double detail) {
    violations.push_back({{"kind", kind}, {"k", k}, {"P", P}, {"detail", detail}, {"params", params_json(p)}});
  };

  for (std::size_t draw = 0; draw < cfg.draws; ++draw) {
    for (std::size_t Mi : cfg.M_values) {
      const double M = static_cast<double>(Mi);
      SpeedupParams p = sample_params(rng, M);
      auto intervals = interval_bounds(Mi);
      const double p_end = std::max(2 * M, 4 * interval_max(p, 1).P_star);

      double best_below = -kInf;  // max of S over the grid at P < current divisor
      double prev_s_star = -kInf;  // intervals run k = M down to 1, so S*_k rises
      for (const auto& iv : intervals) {
        const double lo = iv.lo;
        const double hi = std::isinf(iv.hi) ? p_end : iv.hi;
        const double s_div = speedup_rho(p.with_p(lo));

        if (lo > 1) {
          ++checks;
          if (!(s_div > best_below)) violate("dominance", p, iv.k, lo, best_below - s_div);
        }

        auto im = interval_max(p, iv.k);
        ++checks;
        if (!(im.S_star > prev_s_star)) violate("s_star_monotone", p, iv.k, im.P_star, prev_s_star - im.S_star);
        prev_s_star = im.S_star;

        // dense scan of [lo, hi)
        int switches = 0;
        int last_sign = 0;
        double prev = s_div;
        best_below = std::max(best_below, s_div);
        for (std::size_t g = 1; g < cfg.grid; ++g) {
          double P = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(cfg.grid);
          double s = speedup_rho(p.with_p(P));
          best_below = std::max(best_below, s);
          double d = s - prev;
          prev = s;
          if (std::abs(d) <= cfg.slope_tol * std::abs(s)) continue;
          int sign = d > 0 ? 1 : -1;
          if (last_sign != 0 && sign != last_sign) {
            ++switches;
            if (sign > 0) violate("unimodal_valley", p, iv.k, P, d);
          }
          last_sign = sign;
        }
        ++checks;
        if (switches > 1) violate("unimodal", p, iv.k, lo, switches);
        if (im.shape == IntervalShape::kDecreasing && switches == 0 && last_sign > 0)
          violate("shape_decreasing", p, iv.k, lo, 0);
        if (im.shape == IntervalShape::kIncreasing && switches == 0 && last_sign < 0 && !std::isinf(iv.hi))
          violate("shape_increasing", p, iv.k, lo, 0);
      }
    }
  }
  return {{"draws", cfg.draws}, {"checks", checks}, {"violations", violations}};
}

// ---------------------------------------------------------------------------

// Decoder rows are grouped into L blocks so there are 2L equal submodels.
inline std::size_t effective_m(std::size_t L, std::size_t D) {
  if (D < L)
    throw Error(ErrorCode::kDecoderSmallerThanEncoder,
                "D=" + std::to_string(D) + " < L=" + std::to_string(L) + "; ungrouped count is L + D");
  return 2 * L;
}

struct EffectiveM {
  std::size_t M = 0;
  bool grouped = true;
};

inline EffectiveM effective_m_or_ungrouped(std::size_t L, std::size_t D) {
  if (D < L) return {L + D, false};
  return {2 * L, true};
}

struct Measurement {
  double P = 1;
  double S = 1;
};

struct TimeFit {
  double t_w_c = 0;
  double t_z_r = 0;
  double sse = kInf;
};

inline std::vector<double> log_grid(double lo_exp, double hi_exp, std::size_t per_decade) {
  std::vector<double> g;
  const auto steps = static_cast<std::size_t>(std::llround((hi_exp - lo_exp) * static_cast<double>(per_decade)));
  for (std::size_t i = 0; i <= steps; ++i)
    g.push_back(std::pow(10.0, lo_exp + static_cast<double>(i) / static_cast<double>(per_decade)));
  return g;
}

// Grid search with t_w_r = 1 minimising the squared speedup error; the first
// grid point wins ties.
inline TimeFit fit_time_params(const std::vector<Measurement>& measured, double N, double M, double e,
                               const std::vector<double>& t_w_c_grid, const std::vector<double>& t_z_r_grid) {
  require(measured.size() >= 2, "fit_time_params needs at least two measurements");
  require(!t_w_c_grid.empty() && !t_z_r_grid.empty(), "fit_time_params needs nonempty grids");
  TimeFit best;
  for (double twc : t_w_c_grid) {
    for (double tzr : t_z_r_grid) {
      SpeedupParams p{1, N, M, e, 1.0, twc, tzr};
      double sse = 0;
      for (const auto& m : measured) {
        double d = speedup(p.with_p(m.P)) - m.S;
        sse += d * d;
      }
      if (sse < best.sse) best = {twc, tzr, sse};
    }
  }
  return best;
}

inline TimeFit fit_time_params(const std::vector<Measurement>& measured, double N, double M, double e) {
  return fit_time_params(measured, N, M, e, log_grid(-3, 6, 10), log_grid(-3, 6, 10));
}

// CSV: P,S_exact,S_divisible,interval_k; S_divisible is empty unless P | M.
inline void emit_curve(std::ostream& os, const SpeedupParams& base, std::size_t p_max, std::size_t stride) {
  require(p_max >= 1 && stride >= 1, "emit_curve needs p_max, stride >= 1");
  os << "P,S_exact,S_divisible,interval_k\n";
  char buf[64];
  for (std::size_t P = 1; P <= p_max; P += stride) {
    auto p = base.with_p(static_cast<double>(P));
    os << P << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", speedup(p));
    os << buf << ',';
    if (divides(p.M, p.P)) {
      std::snprintf(buf, sizeof(buf), "%.17g", speedup_divisible(p));
      os << buf;
    }
    os << ',' << static_cast<std::size_t>(ceil_ratio(p.M, p.P)) << '\n';
  }
}

}  // namespace parmac
