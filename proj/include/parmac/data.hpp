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

// Datasets, binary code matrices, shard partitioning, PCA code initialisation
// and byte-quantised RBF features.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "parmac/common.hpp"

namespace parmac {

enum class StorageKind { kReal64, kByte };

// Row-major N x D feature matrix. Byte storage keeps the raw uint8 values and
// widens them (times `byte_scale`) only when a row is read.
class Dataset {
 public:
  Dataset() = default;

  static Dataset real(std::size_t n, std::size_t dim, std::vector<double> values) {
    require(values.size() == n * dim, "dataset value count does not match n * dim");
    Dataset d;
    d.n_ = n;
    d.dim_ = dim;
    d.kind_ = StorageKind::kReal64;
    d.real_ = std::move(values);
    return d;
  }

  static Dataset bytes(std::size_t n, std::size_t dim, std::vector<std::uint8_t> values,
                       double byte_scale = 1.0) {
    require(values.size() == n * dim, "dataset value count does not match n * dim");
    Dataset d;
    d.n_ = n;
    d.dim_ = dim;
    d.kind_ = StorageKind::kByte;
    d.bytes_ = std::move(values);
    d.byte_scale_ = byte_scale;
    return d;
  }

  std::size_t size() const { return n_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return n_ == 0; }
  StorageKind storage() const { return kind_; }
  double byte_scale() const { return byte_scale_; }

  double at(std::size_t i, std::size_t j) const {
    return kind_ == StorageKind::kReal64 ? real_[i * dim_ + j]
                                         : byte_scale_ * static_cast<double>(bytes_[i * dim_ + j]);
  }

  std::span<const double> real_row(std::size_t i) const {
    require(kind_ == StorageKind::kReal64, "real_row on byte dataset");
    return {real_.data() + i * dim_, dim_};
  }

  std::span<const std::uint8_t> byte_row(std::size_t i) const {
    require(kind_ == StorageKind::kByte, "byte_row on real dataset");
    return {bytes_.data() + i * dim_, dim_};
  }

  void widen_row(std::size_t i, std::span<double> out) const {
    if (kind_ == StorageKind::kReal64) {
      std::copy_n(real_.data() + i * dim_, dim_, out.begin());
    } else {
      const std::uint8_t* row = bytes_.data() + i * dim_;
      for (std::size_t j = 0; j < dim_; ++j) out[j] = byte_scale_ * static_cast<double>(row[j]);
    }
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset d;
    d.n_ = indices.size();
    d.dim_ = dim_;
    d.kind_ = kind_;
    d.byte_scale_ = byte_scale_;
    if (kind_ == StorageKind::kReal64) {
      d.real_.reserve(indices.size() * dim_);
      for (auto i : indices) {
        require(i < n_, "subset index out of range");
        d.real_.insert(d.real_.end(), real_.begin() + i * dim_, real_.begin() + (i + 1) * dim_);
      }
    } else {
      d.bytes_.reserve(indices.size() * dim_);
      for (auto i : indices) {
        require(i < n_, "subset index out of range");
        d.bytes_.insert(d.bytes_.end(), bytes_.begin() + i * dim_, bytes_.begin() + (i + 1) * dim_);
      }
    }
    return d;
  }

  Dataset range(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return subset(idx);
  }

  // Appends rows of another dataset with identical layout.
  void append(const Dataset& other) {
    if (other.empty()) return;
    if (empty() && dim_ == 0) {
      *this = other;
      return;
    }
    require(other.dim_ == dim_ && other.kind_ == kind_, "append: layout mismatch");
    real_.insert(real_.end(), other.real_.begin(), other.real_.end());
    bytes_.insert(bytes_.end(), other.bytes_.begin(), other.bytes_.end());
    n_ += other.n_;
  }

  Eigen::MatrixXd to_matrix() const {
    Eigen::MatrixXd m(n_, dim_);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < dim_; ++j) m(i, j) = at(i, j);
    return m;
  }

  const std::vector<double>& real_values() const { return real_; }
  const std::vector<std::uint8_t>& byte_values() const { return bytes_; }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.n_ == b.n_ && a.dim_ == b.dim_ && a.kind_ == b.kind_ && a.real_ == b.real_ &&
           a.bytes_ == b.bytes_ && a.byte_scale_ == b.byte_scale_;
  }

 private:
  std::size_t n_ = 0;
  std::size_t dim_ = 0;
  StorageKind kind_ = StorageKind::kReal64;
  std::vector<double> real_;
  std::vector<std::uint8_t> bytes_;
  double byte_scale_ = 1.0;
};

// Reads rows as doubles, reusing one buffer for byte datasets.
class RowReader {
 public:
  explicit RowReader(const Dataset& data) : data_(&data), buffer_(data.dim()) {}

  std::span<const double> operator()(std::size_t i) {
    if (data_->storage() == StorageKind::kReal64) return data_->real_row(i);
    data_->widen_row(i, buffer_);
    return buffer_;
  }

 private:
  const Dataset* data_;
  std::vector<double> buffer_;
};

// One L-bit code per point, packed into a 64-bit word.
class CodeMatrix {
 public:
  CodeMatrix() = default;
  CodeMatrix(std::size_t n, std::size_t bits) : bits_(bits), codes_(n, 0) {
    require(bits <= kMaxCodeBits, "at most 64 bits per code are supported");
  }
  CodeMatrix(std::size_t bits, std::vector<Code> codes) : bits_(bits), codes_(std::move(codes)) {
    require(bits <= kMaxCodeBits, "at most 64 bits per code are supported");
    for (auto c : codes_) require((c & ~low_bits_mask(bits_)) == 0, "code has bits beyond L");
  }

  std::size_t size() const { return codes_.size(); }
  std::size_t bits() const { return bits_; }
  Code operator[](std::size_t i) const { return codes_[i]; }
  Code& operator[](std::size_t i) { return codes_[i]; }
  bool bit(std::size_t i, std::size_t l) const { return (codes_[i] >> l) & 1U; }
  void set_bit(std::size_t i, std::size_t l, bool v) {
    if (v) codes_[i] |= Code{1} << l;
    else codes_[i] &= ~(Code{1} << l);
  }
  std::span<const Code> codes() const { return codes_; }

  CodeMatrix subset(std::span<const std::size_t> indices) const {
    std::vector<Code> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(codes_.at(i));
    return CodeMatrix(bits_, std::move(out));
  }

  void append(const CodeMatrix& other) {
    require(other.bits_ == bits_ || size() == 0, "append: code width mismatch");
    bits_ = other.bits_;
    codes_.insert(codes_.end(), other.codes_.begin(), other.codes_.end());
  }

  friend bool operator==(const CodeMatrix&, const CodeMatrix&) = default;

 private:
  std::size_t bits_ = 0;
  std::vector<Code> codes_;
};

// ---------------------------------------------------------------------------
// fvecs / bvecs

namespace detail {

template <class ReadValue>
Dataset read_vecs(std::istream& is, StorageKind kind, std::size_t value_bytes, ReadValue read_value) {
  std::vector<double> real;
  std::vector<std::uint8_t> bytes;
  std::size_t n = 0;
  std::size_t dim = 0;
  std::uint32_t raw_dim = 0;
  while (le::try_get_u32(is, raw_dim)) {
    auto d = static_cast<std::int32_t>(raw_dim);
    if (d < 0) throw Error(ErrorCode::kMalformedRecord, "negative dimension field");
    if (n > 0 && static_cast<std::size_t>(d) != dim)
      throw Error(ErrorCode::kInconsistentDim,
                  "record " + std::to_string(n) + " has dim " + std::to_string(d) + ", expected " +
                      std::to_string(dim));
    dim = static_cast<std::size_t>(d);
    std::vector<char> buf(dim * value_bytes);
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size())
      throw Error(ErrorCode::kMalformedRecord, "truncated payload in record " + std::to_string(n));
    for (std::size_t j = 0; j < dim; ++j) read_value(buf.data() + j * value_bytes, real, bytes);
    ++n;
  }
  if (kind == StorageKind::kReal64) return Dataset::real(n, dim, std::move(real));
  return Dataset::bytes(n, dim, std::move(bytes));
}

}  // namespace detail

inline Dataset read_fvecs(std::istream& is) {
  return detail::read_vecs(is, StorageKind::kReal64, 4,
                           [](const char* p, std::vector<double>& real, std::vector<std::uint8_t>&) {
                             std::uint32_t u = std::uint32_t{static_cast<unsigned char>(p[0])} |
                                               std::uint32_t{static_cast<unsigned char>(p[1])} << 8 |
                                               std::uint32_t{static_cast<unsigned char>(p[2])} << 16 |
                                               std::uint32_t{static_cast<unsigned char>(p[3])} << 24;
                             real.push_back(static_cast<double>(std::bit_cast<float>(u)));
                           });
}

inline Dataset read_bvecs(std::istream& is) {
  return detail::read_vecs(is, StorageKind::kByte, 1,
                           [](const char* p, std::vector<double>&, std::vector<std::uint8_t>& bytes) {
                             bytes.push_back(static_cast<std::uint8_t>(p[0]));
                           });
}

// Real datasets are narrowed to float32 on write.
inline void write_fvecs(std::ostream& os, const Dataset& data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    le::put_i32(os, static_cast<std::int32_t>(data.dim()));
    for (std::size_t j = 0; j < data.dim(); ++j) le::put_f32(os, static_cast<float>(data.at(i, j)));
  }
}

inline void write_bvecs(std::ostream& os, const Dataset& data) {
  require(data.storage() == StorageKind::kByte, "write_bvecs needs byte storage");
  for (std::size_t i = 0; i < data.size(); ++i) {
    le::put_i32(os, static_cast<std::int32_t>(data.dim()));
    auto row = data.byte_row(i);
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Picks the reader from the file extension (.bvecs, otherwise fvecs).
inline Dataset load_vecs(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  return ends_with(path, ".bvecs") ? read_bvecs(in) : read_fvecs(in);
}

inline void save_vecs(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  if (ends_with(path, ".bvecs")) write_bvecs(out, data);
  else write_fvecs(out, data);
}

// ---------------------------------------------------------------------------
// Synthetic mixture of isotropic Gaussians.

struct SyntheticMixture {
  Dataset data;
  std::vector<std::vector<double>> means;
  std::vector<std::size_t> labels;
};

inline constexpr double kSyntheticMeanRange = 1.0;
inline constexpr double kSyntheticNoise = 0.2;

// Cluster means are uniform in [-1, 1]^d, points add N(0, 0.2^2 I) noise, and
// each point picks its cluster uniformly.
inline SyntheticMixture generate_mixture(std::size_t n, std::size_t d, std::size_t n_clusters,
                                         std::uint64_t seed) {
  require(n >= 1 && d >= 1 && n_clusters >= 1, "generate_synthetic needs n, d, n_clusters >= 1");
  Rng rng(mix_seed({seed, 0x5157ULL}));
  std::uniform_real_distribution<double> uni(-kSyntheticMeanRange, kSyntheticMeanRange);
  std::normal_distribution<double> noise(0.0, kSyntheticNoise);

  SyntheticMixture out;
  out.means.assign(n_clusters, std::vector<double>(d));
  for (auto& m : out.means)
    for (auto& v : m) v = uni(rng);

  std::vector<double> values(n * d);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto c = static_cast<std::size_t>(rng() % n_clusters);
    out.labels[i] = c;
    for (std::size_t j = 0; j < d; ++j) values[i * d + j] = out.means[c][j] + noise(rng);
  }
  out.data = Dataset::real(n, d, std::move(values));
  return out;
}

inline Dataset generate_synthetic(std::size_t n, std::size_t d, std::size_t n_clusters,
                                  std::uint64_t seed) {
  return generate_mixture(n, d, n_clusters, seed).data;
}

// ---------------------------------------------------------------------------
// Load-balanced partition.

struct Partition {
  std::vector<std::vector<std::size_t>> shards;
  std::vector<double> speeds;

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s;
    for (const auto& shard : shards) s.push_back(shard.size());
    return s;
  }
};

// Shard p receives round(n * speed_p / sum) points under largest-remainder
// rounding (ties go to the lower machine index), as a contiguous index range.
inline Partition partition(std::size_t n, std::span<const double> speeds) {
  const std::size_t P = speeds.size();
  require(P >= 1, "partition needs at least one machine");
  require(n >= P, "partition needs n >= P");
  double total = 0.0;
  for (double a : speeds) {
    require(a > 0.0 && std::isfinite(a), "machine speeds must be positive");
    total += a;
  }

  std::vector<std::size_t> sizes(P);
  std::vector<std::pair<double, std::size_t>> remainders(P);
  std::size_t assigned = 0;
  for (std::size_t p = 0; p < P; ++p) {
    double ideal = static_cast<double>(n) * speeds[p] / total;
    sizes[p] = static_cast<std::size_t>(std::floor(ideal));
    remainders[p] = {ideal - static_cast<double>(sizes[p]), p};
    assigned += sizes[p];
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++sizes[remainders[r % P].second];

  Partition out;
  out.speeds.assign(speeds.begin(), speeds.end());
  std::size_t next = 0;
  for (std::size_t p = 0; p < P; ++p) {
    if (sizes[p] == 0) throw Error(ErrorCode::kEmptyShard, "machine " + std::to_string(p) + " gets no points");
    std::vector<std::size_t> idx(sizes[p]);
    std::iota(idx.begin(), idx.end(), next);
    next += sizes[p];
    out.shards.push_back(std::move(idx));
  }
  return out;
}

inline Partition partition_equal(std::size_t n, std::size_t P) {
  std::vector<double> speeds(P, 1.0);
  return partition(n, speeds);
}

// ---------------------------------------------------------------------------
// Truncated PCA initialisation.

struct PcaProjection {
  // L x (D+1); row l is the l-th principal direction with bias -dir . mean, so
  // step(row . [x;1]) is the thresholded centred projection.
  Eigen::MatrixXd weights;
  CodeMatrix codes;
  std::size_t degenerate_bits = 0;
  std::vector<double> eigenvalues;
};

// Fixes the eigenvector sign so its largest-magnitude entry is positive (first
// such entry on ties).
inline void canonicalize_sign(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (std::abs(v(i)) > std::abs(v(best))) best = i;
  if (v(best) < 0) v = -v;
}

inline PcaProjection pca_init(const Dataset& data, std::size_t L, std::size_t subset_size,
                              std::uint64_t seed) {
  const std::size_t D = data.dim();
  const std::size_t N = data.size();
  require(L >= 1 && L <= D, "pca_init needs 1 <= L <= D");
  require(L <= kMaxCodeBits, "pca_init: L exceeds 64");
  require(subset_size >= 1 && subset_size <= N, "pca_init needs 1 <= subset_size <= N");

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed({seed, 0x9ca1ULL}));
  portable_shuffle(order.data(), order.size(), rng);
  order.resize(subset_size);
  std::sort(order.begin(), order.end());

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(D));
  RowReader rows(data);
  for (auto i : order) {
    auto x = rows(i);
    for (std::size_t j = 0; j < D; ++j) mean(j) += x[j];
  }
  mean /= static_cast<double>(subset_size);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(D, D);
  Eigen::VectorXd centred(D);
  for (auto i : order) {
    auto x = rows(i);
    for (std::size_t j = 0; j < D; ++j) centred(j) = x[j] - mean(j);
    cov.selfadjointView<Eigen::Lower>().rankUpdate(centred);
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= static_cast<double>(subset_size);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
  const double top = values(values.size() - 1);
  const double tol = 1e-12 * std::max(top, 0.0);

  PcaProjection out;
  out.weights = Eigen::MatrixXd::Zero(L, D + 1);
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::Index col = static_cast<Eigen::Index>(D - 1 - l);
    double lambda = values(col);
    out.eigenvalues.push_back(lambda);
    if (!(top > 0.0) || lambda <= tol) {
      // constant-zero bit: step(-1) = 0 for every input
      out.weights(l, D) = -1.0;
      ++out.degenerate_bits;
      continue;
    }
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    canonicalize_sign(v);
    out.weights.row(l).head(D) = v.transpose();
    out.weights(l, D) = -v.dot(mean);
  }

  out.codes = CodeMatrix(N, L);
  Eigen::VectorXd xt(D + 1);
  xt(D) = 1.0;
  for (std::size_t i = 0; i < N; ++i) {
    auto x = rows(i);
    for (std::size_t j = 0; j < D; ++j) xt(j) = x[j];
    Code z = 0;
    for (std::size_t l = 0; l < L; ++l)
      if (out.weights.row(l).dot(xt) >= 0.0) z |= Code{1} << l;
    out.codes[i] = z;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian RBF features stored as bytes.

struct KernelConfig {
  Eigen::MatrixXd centers;  // m x D
  double sigma = 1.0;

  std::size_t m() const { return static_cast<std::size_t>(centers.rows()); }
};

// Centres are drawn from the data without replacement.
inline KernelConfig make_kernel_config(const Dataset& data, std::size_t m, double sigma, std::uint64_t seed) {
  require(m >= 1 && m <= data.size(), "kernel centre count must be in [1, N]");
  require(sigma > 0.0, "kernel bandwidth must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed({seed, 0x4bfULL}));
  portable_shuffle(order.data(), order.size(), rng);
  KernelConfig cfg;
  cfg.sigma = sigma;
  cfg.centers.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(data.dim()));
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t j = 0; j < data.dim(); ++j) cfg.centers(c, j) = data.at(order[c], j);
  return cfg;
}

inline std::uint8_t quantize_unit(double k) {
  double q = std::round(255.0 * std::clamp(k, 0.0, 1.0));
  return static_cast<std::uint8_t>(q);
}

inline std::vector<std::uint8_t> rbf_featurize(std::span<const double> x, const KernelConfig& cfg) {
  require(static_cast<Eigen::Index>(x.size()) == cfg.centers.cols(), "rbf_featurize: dimension mismatch");
  require(cfg.sigma > 0.0, "kernel bandwidth must be positive");
  std::vector<std::uint8_t> out(cfg.m());
  const double denom = 2.0 * cfg.sigma * cfg.sigma;
  for (std::size_t c = 0; c < cfg.m(); ++c) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      double diff = x[j] - cfg.centers(c, j);
      d2 += diff * diff;
    }
    out[c] = quantize_unit(std::exp(-d2 / denom));
  }
  return out;
}

inline double decode_kernel_byte(std::uint8_t b) { return static_cast<double>(b) / 255.0; }

// Byte dataset of kernel values that widens to byte/255.
inline Dataset featurize_dataset(const Dataset& data, const KernelConfig& cfg) {
  std::vector<std::uint8_t> values;
  values.reserve(data.size() * cfg.m());
  RowReader rows(data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto f = rbf_featurize(rows(i), cfg);
    values.insert(values.end(), f.begin(), f.end());
  }
  return Dataset::bytes(data.size(), cfg.m(), std::move(values), 1.0 / 255.0);
}

}  // namespace parmac
