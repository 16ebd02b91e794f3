#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "minimt/errors.hpp"

namespace minimt {

using RowMatrixXf =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class Tape;

/// Dense f32 tensor of rank 1 or 2, row-major, optionally attached to a Tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<Index> shape);

  static Tensor zeros(std::vector<Index> shape);
  static Tensor vector(std::initializer_list<float> values);
  static Tensor from_matrix(const RowMatrixXf& m);
  static Tensor scalar(float v);

  Index rank() const { return static_cast<Index>(shape.size()); }
  Index numel() const { return data.size(); }
  Index rows() const { return rank() == 2 ? shape[0] : 1; }
  Index cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }

  // Rank-2 view; a rank-1 tensor maps to a single row.
  Eigen::Map<RowMatrixXf> mat() {
    return Eigen::Map<RowMatrixXf>(data.data(), rows(), cols());
  }
  Eigen::Map<const RowMatrixXf> mat() const {
    return Eigen::Map<const RowMatrixXf>(data.data(), rows(), cols());
  }

  float item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
    return data[0];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  std::vector<Index> shape;
  Eigen::VectorXf data;
  Eigen::VectorXf grad;  // empty until a backward pass fills it
  // Tape bookkeeping: node_id is only meaningful for the tape whose unique
  // id matches tape_uid, so tensors left over from an earlier tape read as
  // untracked on a new one (even when the new tape reuses the old address).
  int node_id = -1;
  std::uint64_t tape_uid = 0;
};

/// Seedable RNG; every stochastic operation takes one explicitly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::mt19937_64& engine() { return engine_; }
  float uniform(float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    return d(engine_);
  }
  double uniform01() {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    return d(engine_);
  }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Reverse-mode tape. Operations append backward closures in topological
/// order; backward() replays them once in reverse and rejects a second run.
class Tape {
 public:
  Tape();
  std::uint64_t uid() const { return uid_; }

  int add_node(Index numel);
  int watch(Tensor& param);
  void record(std::function<void(Tape&)> backward_fn);
  Eigen::VectorXf& grad(int node_id);
  bool tracks(const Tensor& t) const {
    return t.tape_uid == uid_ && t.node_id >= 0 &&
           t.node_id < static_cast<int>(grads_.size());
  }

  // Seeds d(loss)/d(loss) = 1, replays the tape, then copies gradients into
  // every watched parameter's .grad buffer.
  void backward(const Tensor& loss);

  std::size_t num_ops() const { return ops_.size(); }

 private:
  std::uint64_t uid_;
  std::vector<Eigen::VectorXf> grads_;
  std::vector<std::function<void(Tape&)>> ops_;
  std::vector<std::pair<int, Tensor*>> watched_;
  bool consumed_ = false;
};

// ---- forward/backward operations ----------------------------------------
// Every op computes eagerly; when `tape` is non-null and an input is tracked,
// a backward closure is recorded.

// C = A·B with a fixed k-ordered accumulation (deterministic run to run).
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
// C = A·Bᵀ (rows of B are output features).
Tensor matmul_nt(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
// Adds a length-n row vector to every row of a.
Tensor add_rowvec(const Tensor& a, const Tensor& row, Tape* tape = nullptr);
// Adds an untracked constant matrix (masks, positional encodings).
Tensor add_const(const Tensor& a, const RowMatrixXf& c, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, float s, Tape* tape = nullptr);
Tensor relu(const Tensor& a, Tape* tape = nullptr);
Tensor sum(const Tensor& a, Tape* tape = nullptr);

// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& x, Tape* tape = nullptr);
// Per-row normalization (population variance) followed by gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps, Tape* tape = nullptr);

// Identity when !training; otherwise zeroes entries with probability p and
// scales survivors by 1/(1-p).
Tensor dropout(const Tensor& x, float p, bool training, Rng& rng,
               Tape* tape = nullptr);

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        Tape* tape = nullptr);

Tensor slice_cols(const Tensor& x, Index start, Index len, Tape* tape = nullptr);
Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape = nullptr);

// ---- raw kernels ---------------------------------------------------------

// c[m×n] = a[m×k]·b[k×n], row-major buffers. Accumulation order over k is
// fixed per output element; any worker count gives bit-identical results.
void gemm_f32(const float* a, const float* b, float* c, Index m, Index k,
              Index n, int workers = 1);
// c[m×n] = a[m×k]·b[n×k]ᵀ.
void gemm_f32_nt(const float* a, const float* b, float* c, Index m, Index k,
                 Index n, int workers = 1);

void check_finite(const Tensor& t, const std::string& where);

}  // namespace minimt
