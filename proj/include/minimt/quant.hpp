#pragma once

#include <cstdint>
#include <vector>

#include "minimt/tensor.hpp"

namespace minimt {

/// Int8 values plus one f32 scale = 127 / max-abs of the source tensor.
/// Values stay in [-127, 127]; -128 is never produced. Immutable after
/// construction (and after an optional prepare()) and safe to share.
class QuantizedTensor {
 public:
  std::vector<Index> shape;
  Eigen::Matrix<std::int8_t, Eigen::Dynamic, 1> qdata;  // row-major
  float scale = 1.0f;

  Index rank() const { return static_cast<Index>(shape.size()); }
  Index numel() const { return qdata.size(); }
  Index rows() const { return rank() == 2 ? shape[0] : 1; }
  Index cols() const {
    return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0);
  }

  // Builds the k-interleaved layout and column sums the int8 kernel wants
  // when this tensor is the right-hand side of qmatmul. Call once, before
  // sharing across workers.
  void prepare();
  bool prepared() const { return !packed.empty(); }

  // Fills row_sums from qdata. quantize() does this; call it after building
  // a QuantizedTensor by hand (e.g. when loading from a file).
  void finish();

  // Kernel-side data. row_sums is filled by finish().
  std::vector<std::int8_t> packed;  // [ceil(k/4)][n_pad16][4]
  std::vector<std::int32_t> col_sums;
  std::vector<std::int32_t> row_sums;
};

// scale = 127/max_abs(x); qdata[i] = round-half-away-from-zero(x[i]*scale).
// All-zero input gets scale 1 and zero qdata.
QuantizedTensor quantize(const Tensor& x);

// Same formula, applied per matmul input during decoding.
inline QuantizedTensor quantize_activations(const Tensor& x) {
  return quantize(x);
}

Tensor dequantize(const QuantizedTensor& q);

// C[i][j] = (sum_k a*b in int32) / (scale_a * scale_b). Precondition k <=
// 65536 so the 32-bit accumulator (including the unsigned-offset correction)
// cannot overflow. Workers split output columns; results are bit-identical
// for any worker count.
Tensor qmatmul(const QuantizedTensor& a, const QuantizedTensor& b,
               int workers = 1);

// C = A·Bᵀ over rows of B; row_subset restricts (and reorders) the output
// features, which is how the vocabulary shortlist slices the projection.
Tensor qmatmul_nt(const QuantizedTensor& a, const QuantizedTensor& b,
                  const std::vector<int>* row_subset = nullptr,
                  int workers = 1);

// True when the CPU has the 8-bit dot-product instructions the fast kernel
// needs (AVX-512 VNNI). The scalar fallback computes identical results.
bool int8_simd_available();

}  // namespace minimt
