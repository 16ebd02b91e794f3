#include "minimt/quant.hpp"

#include <cmath>
#include <cstring>
#include <thread>

#if defined(__x86_64__)
#include <immintrin.h>
#define MINIMT_X86 1
#endif

namespace minimt {

namespace {

constexpr Index kMaxInner = 65536;  // 127*255*65536 < 2^31

Index pad_up(Index v, Index to) { return (v + to - 1) / to * to; }

template <typename Fn>
void parallel_range(Index total, Index block, int workers, Fn&& body) {
  Index nblocks = (total + block - 1) / block;
  if (workers <= 1 || nblocks < 2) {
    body(Index(0), total);
    return;
  }
  int nw = static_cast<int>(std::min<Index>(workers, nblocks));
  std::vector<std::thread> pool;
  Index per = (nblocks + nw - 1) / nw * block;
  for (int w = 0; w < nw; ++w) {
    Index lo = w * per;
    Index hi = std::min(total, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

#ifdef MINIMT_X86

__attribute__((target("avx512f,avx512bw,avx512vl,avx512vnni"))) void
vnni_rows_packed(const std::uint8_t* a_u8, Index k4, const std::int8_t* packed,
                 const std::int32_t* col_sums, Index n, Index n_pad,
                 float inv_scale, float* c_row, Index j_lo, Index j_hi) {
  // j_lo/j_hi are multiples of 16 (j_hi may be clipped to n at the tail).
  alignas(64) std::int32_t tmp[16];
  for (Index jb = j_lo; jb < j_hi; jb += 16) {
    __m512i acc = _mm512_setzero_si512();
    const std::int8_t* bp = packed + jb * 4;
    for (Index kk = 0; kk < k4; ++kk) {
      std::uint32_t a4;
      std::memcpy(&a4, a_u8 + kk * 4, 4);
      __m512i av = _mm512_set1_epi32(static_cast<int>(a4));
      __m512i bv = _mm512_loadu_si512(bp + kk * n_pad * 4);
      acc = _mm512_dpbusd_epi32(acc, av, bv);
    }
    _mm512_store_si512(tmp, acc);
    Index jmax = std::min<Index>(jb + 16, j_hi);
    for (Index j = jb; j < jmax && j < n; ++j)
      c_row[j] = static_cast<float>(tmp[j - jb] - 128 * col_sums[j]) * inv_scale;
  }
}

__attribute__((target("avx512f,avx512bw,avx512vl,avx512vnni"))) std::int32_t
vnni_dot(const std::uint8_t* a_u8, const std::int8_t* b, Index k) {
  __m512i acc = _mm512_setzero_si512();
  Index kk = 0;
  for (; kk + 64 <= k; kk += 64) {
    __m512i av = _mm512_loadu_si512(a_u8 + kk);
    __m512i bv = _mm512_loadu_si512(b + kk);
    acc = _mm512_dpbusd_epi32(acc, av, bv);
  }
  if (kk < k) {
    __mmask64 m = (~0ULL) >> (64 - (k - kk));
    __m512i av = _mm512_maskz_loadu_epi8(m, a_u8 + kk);
    __m512i bv = _mm512_maskz_loadu_epi8(m, b + kk);
    acc = _mm512_dpbusd_epi32(acc, av, bv);
  }
  return _mm512_reduce_add_epi32(acc);
}

bool cpu_has_vnni() {
  return __builtin_cpu_supports("avx512vnni") &&
         __builtin_cpu_supports("avx512bw") &&
         __builtin_cpu_supports("avx512vl");
}

#else
bool cpu_has_vnni() { return false; }
#endif

// Activations shifted to unsigned (+128) for the u8*s8 dot instructions;
// the 128*sum(b) correction term is subtracted afterwards.
std::vector<std::uint8_t> shift_unsigned(const QuantizedTensor& a, Index k_pad) {
  Index m = a.rows(), k = a.cols();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(m) * k_pad, 0);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < k; ++j)
      out[i * k_pad + j] =
          static_cast<std::uint8_t>(static_cast<int>(a.qdata[i * k + j]) + 128);
  return out;
}

}  // namespace

bool int8_simd_available() { return cpu_has_vnni(); }

QuantizedTensor quantize(const Tensor& x) {
  check_finite(x, "quantize");
  QuantizedTensor q;
  q.shape = x.shape;
  q.qdata.resize(x.numel());
  float max_abs = x.numel() ? x.data.cwiseAbs().maxCoeff() : 0.0f;
  q.scale = max_abs == 0.0f ? 1.0f : 127.0f / max_abs;
  for (Index i = 0; i < x.numel(); ++i) {
    float v = std::round(x.data[i] * q.scale);
    v = std::min(127.0f, std::max(-127.0f, v));
    q.qdata[i] = static_cast<std::int8_t>(v);
  }
  q.finish();
  return q;
}

void QuantizedTensor::finish() {
  row_sums.assign(rows(), 0);
  for (Index i = 0; i < rows(); ++i) {
    std::int32_t s = 0;
    for (Index j = 0; j < cols(); ++j) s += qdata[i * cols() + j];
    row_sums[i] = s;
  }
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor t(q.shape);
  for (Index i = 0; i < q.numel(); ++i)
    t.data[i] = static_cast<float>(q.qdata[i]) / q.scale;
  return t;
}

void QuantizedTensor::prepare() {
  if (prepared() || rank() != 2) return;
  Index k = shape[0], n = shape[1];
  Index k4 = pad_up(k, 4) / 4;
  Index n_pad = pad_up(n, 16);
  packed.assign(static_cast<std::size_t>(k4) * n_pad * 4, 0);
  col_sums.assign(n, 0);
  for (Index r = 0; r < k; ++r)
    for (Index c = 0; c < n; ++c) {
      std::int8_t v = qdata[r * n + c];
      packed[(r / 4) * n_pad * 4 + c * 4 + (r % 4)] = v;
      col_sums[c] += v;
    }
}

Tensor qmatmul(const QuantizedTensor& a, const QuantizedTensor& b, int workers) {
  Index m = a.rows(), k = a.cols(), n = b.cols();
  if (k != b.rows()) throw ShapeError("qmatmul: inner dimensions disagree");
  if (k > kMaxInner) throw ValueError("qmatmul: inner dimension above 65536");
  Tensor c({m, n});
  float inv_scale = 1.0f / (a.scale * b.scale);
#ifdef MINIMT_X86
  if (cpu_has_vnni()) {
    const QuantizedTensor* bp = &b;
    QuantizedTensor local;
    if (!b.prepared()) {
      local = b;
      local.prepare();
      bp = &local;
    }
    Index k4 = pad_up(k, 4) / 4;
    Index n_pad = pad_up(n, 16);
    auto a_u8 = shift_unsigned(a, k4 * 4);
    parallel_range(pad_up(n, 16), 16, workers, [&](Index j_lo, Index j_hi) {
      for (Index i = 0; i < m; ++i)
        vnni_rows_packed(a_u8.data() + i * k4 * 4, k4, bp->packed.data(),
                         bp->col_sums.data(), n, n_pad, inv_scale,
                         c.data.data() + i * n, j_lo, std::min(j_hi, n_pad));
    });
    return c;
  }
#endif
  parallel_range(n, 1, workers, [&](Index j_lo, Index j_hi) {
    for (Index i = 0; i < m; ++i)
      for (Index j = j_lo; j < j_hi; ++j) {
        std::int32_t acc = 0;
        for (Index kk = 0; kk < k; ++kk)
          acc += static_cast<std::int32_t>(a.qdata[i * k + kk]) *
                 static_cast<std::int32_t>(b.qdata[kk * n + j]);
        c.data[i * n + j] = static_cast<float>(acc) * inv_scale;
      }
  });
  return c;
}

Tensor qmatmul_nt(const QuantizedTensor& a, const QuantizedTensor& b,
                  const std::vector<int>* row_subset, int workers) {
  Index m = a.rows(), k = a.cols();
  if (k != b.cols()) throw ShapeError("qmatmul_nt: inner dimensions disagree");
  if (k > kMaxInner) throw ValueError("qmatmul_nt: inner dimension above 65536");
  Index n = row_subset ? static_cast<Index>(row_subset->size()) : b.rows();
  Tensor c({m, n});
  float inv_scale = 1.0f / (a.scale * b.scale);
  auto brow = [&](Index j) {
    Index r = row_subset ? (*row_subset)[j] : j;
    if (r < 0 || r >= b.rows()) throw IndexError("qmatmul_nt: row out of range");
    return r;
  };
#ifdef MINIMT_X86
  if (cpu_has_vnni()) {
    Index k_pad = pad_up(k, 64);
    auto a_u8 = shift_unsigned(a, k_pad);
    parallel_range(n, 1, workers, [&](Index j_lo, Index j_hi) {
      for (Index j = j_lo; j < j_hi; ++j) {
        Index r = brow(j);
        for (Index i = 0; i < m; ++i) {
          std::int32_t acc =
              vnni_dot(a_u8.data() + i * k_pad, b.qdata.data() + r * k, k);
          c.data[i * n + j] =
              static_cast<float>(acc - 128 * b.row_sums[r]) * inv_scale;
        }
      }
    });
    return c;
  }
#endif
  parallel_range(n, 1, workers, [&](Index j_lo, Index j_hi) {
    for (Index j = j_lo; j < j_hi; ++j) {
      Index r = brow(j);
      for (Index i = 0; i < m; ++i) {
        std::int32_t acc = 0;
        for (Index kk = 0; kk < k; ++kk)
          acc += static_cast<std::int32_t>(a.qdata[i * k + kk]) *
                 static_cast<std::int32_t>(b.qdata[r * k + kk]);
        c.data[i * n + j] = static_cast<float>(acc) * inv_scale;
      }
    }
  });
  return c;
}

}  // namespace minimt
