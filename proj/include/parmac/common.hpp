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

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>

namespace parmac {

enum class ErrorCode {
  kInvalidArgument,
  kIo,
  kMalformedRecord,
  kInconsistentDim,
  kEmptyShard,
  kLTooLarge,
  kDeadWorker,
  kLastMachine,
  kUnrecoverableLoss,
  kNotDivisible,
  kKExceedsBase,
  kDecoderSmallerThanEncoder,
  kProtocol,
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kIo: return "Io";
    case ErrorCode::kMalformedRecord: return "MalformedRecord";
    case ErrorCode::kInconsistentDim: return "InconsistentDim";
    case ErrorCode::kEmptyShard: return "EmptyShard";
    case ErrorCode::kLTooLarge: return "LTooLarge";
    case ErrorCode::kDeadWorker: return "DeadWorker";
    case ErrorCode::kLastMachine: return "LastMachine";
    case ErrorCode::kUnrecoverableLoss: return "UnrecoverableLoss";
    case ErrorCode::kNotDivisible: return "NotDivisible";
    case ErrorCode::kKExceedsBase: return "KExceedsBase";
    case ErrorCode::kDecoderSmallerThanEncoder: return "DecoderSmallerThanEncoder";
    case ErrorCode::kProtocol: return "Protocol";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, const std::string& what) {
  if (!condition) throw Error(ErrorCode::kInvalidArgument, what);
}

// One binary code of up to 64 bits; bit l holds z_l.
using Code = std::uint64_t;
inline constexpr std::size_t kMaxCodeBits = 64;

inline constexpr Code low_bits_mask(std::size_t bits) {
  return bits >= 64 ? ~Code{0} : ((Code{1} << bits) - 1);
}

inline int hamming(Code a, Code b) { return std::popcount(a ^ b); }

// splitmix64 finalizer; used to derive independent stream seeds from tuples.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

using Rng = std::mt19937_64;

// Fisher-Yates with an explicit uniform draw so results do not depend on the
// standard library's shuffle implementation.
template <class T, class Gen>
void portable_shuffle(T* first, std::size_t n, Gen& gen) {
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(gen() % i);
    std::swap(first[i - 1], first[j]);
  }
}

// Little-endian scalar IO.
namespace le {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, static_cast<std::uint32_t>(v)); }

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

// Returns false on a clean end-of-stream before any byte was read; throws on a
// partial read.
inline bool try_get_u32(std::istream& is, std::uint32_t& out) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  auto got = is.gcount();
  if (got == 0) return false;
  if (got != 4) throw Error(ErrorCode::kMalformedRecord, "truncated 32-bit field");
  out = std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
        (std::uint32_t{b[3]} << 24);
  return true;
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!try_get_u32(is, v)) throw Error(ErrorCode::kMalformedRecord, "unexpected end of stream");
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t lo = get_u32(is);
  std::uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace le
}  // namespace parmac
