#include "minimt/tensor.hpp"

#include <atomic>
#include <cmath>
#include <thread>
#include <utility>

namespace minimt {

namespace {

std::string shape_str(const Tensor& t) {
  std::string s = "(";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + ")";
}

Index checked_numel(const std::vector<Index>& shape) {
  if (shape.empty() || shape.size() > 2)
    throw ShapeError("tensors support rank 1 or 2");
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension");
    n *= d;
  }
  return n;
}

bool tracked(Tape* tape, const Tensor& t) { return tape && tape->tracks(t); }

int out_node(Tape* tape, Tensor& out) {
  out.node_id = tape->add_node(out.numel());
  out.tape_uid = tape->uid();
  return out.node_id;
}

}  // namespace

Tensor::Tensor(std::vector<Index> shape_in) {
  Index n = checked_numel(shape_in);
  shape = std::move(shape_in);
  data = Eigen::VectorXf::Zero(n);
}

Tensor Tensor::zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::vector(std::initializer_list<float> values) {
  Tensor t({static_cast<Index>(values.size())});
  Index i = 0;
  for (float v : values) t.data[i++] = v;
  return t;
}

Tensor Tensor::from_matrix(const RowMatrixXf& m) {
  Tensor t({m.rows(), m.cols()});
  t.mat() = m;
  return t;
}

Tensor Tensor::scalar(float v) {
  Tensor t({1});
  t.data[0] = v;
  return t;
}

void check_finite(const Tensor& t, const std::string& where) {
  if (!t.data.allFinite())
    throw ValueError(where + ": non-finite values in tensor " + shape_str(t));
}

// ---- Tape ----------------------------------------------------------------

Tape::Tape() {
  static std::atomic<std::uint64_t> counter{0};
  uid_ = ++counter;
}

int Tape::add_node(Index numel) {
  grads_.push_back(Eigen::VectorXf::Zero(numel));
  return static_cast<int>(grads_.size()) - 1;
}

int Tape::watch(Tensor& param) {
  param.node_id = add_node(param.numel());
  param.tape_uid = uid_;
  watched_.emplace_back(param.node_id, &param);
  return param.node_id;
}

void Tape::record(std::function<void(Tape&)> backward_fn) {
  ops_.push_back(std::move(backward_fn));
}

Eigen::VectorXf& Tape::grad(int node_id) { return grads_.at(node_id); }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw StateError("backward() already ran on this tape");
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss");
  if (!tracks(loss)) throw StateError("loss was not recorded on this tape");
  consumed_ = true;
  grads_[loss.node_id].setConstant(1.0f);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
  for (auto& [id, param] : watched_) param->grad = grads_[id];
}

// ---- raw kernels ---------------------------------------------------------

namespace {

void gemm_rows(const float* a, const float* b, float* c, Index k, Index n,
               Index row_begin, Index row_end) {
  for (Index i = row_begin; i < row_end; ++i) {
    Eigen::Map<Eigen::VectorXf> crow(c + i * n, n);
    crow.setZero();
    const float* arow = a + i * k;
    for (Index kk = 0; kk < k; ++kk) {
      crow += arow[kk] * Eigen::Map<const Eigen::VectorXf>(b + kk * n, n);
    }
  }
}

void gemm_nt_rows(const float* a, const float* b, float* c, Index k, Index n,
                  Index row_begin, Index row_end) {
  for (Index i = row_begin; i < row_end; ++i) {
    Eigen::Map<const Eigen::VectorXf> arow(a + i * k, k);
    for (Index j = 0; j < n; ++j) {
      c[i * n + j] = arow.dot(Eigen::Map<const Eigen::VectorXf>(b + j * k, k));
    }
  }
}

template <typename Fn>
void parallel_rows(Index m, int workers, Fn&& body) {
  if (workers <= 1 || m < 2) {
    body(Index(0), m);
    return;
  }
  int nw = static_cast<int>(std::min<Index>(workers, m));
  std::vector<std::thread> pool;
  pool.reserve(nw);
  Index chunk = (m + nw - 1) / nw;
  for (int w = 0; w < nw; ++w) {
    Index lo = w * chunk;
    Index hi = std::min(m, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

void gemm_f32(const float* a, const float* b, float* c, Index m, Index k,
              Index n, int workers) {
  parallel_rows(m, workers, [&](Index lo, Index hi) {
    gemm_rows(a, b, c, k, n, lo, hi);
  });
}

void gemm_f32_nt(const float* a, const float* b, float* c, Index m, Index k,
                 Index n, int workers) {
  parallel_rows(m, workers, [&](Index lo, Index hi) {
    gemm_nt_rows(a, b, c, k, n, lo, hi);
  });
}

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + shape_str(a) + " vs " +
                     shape_str(b));
  Tensor out({a.rows(), b.cols()});
  gemm_f32(a.data.data(), b.data.data(), out.data.data(), a.rows(), a.cols(),
           b.cols());
  if (tracked(tape, a) || tracked(tape, b)) {
    int ida = a.node_id, idb = b.node_id;
    bool ta = tracked(tape, a), tb = tracked(tape, b);
    int ido = out_node(tape, out);
    RowMatrixXf av = a.mat(), bv = b.mat();
    Index m = a.rows(), kk = a.cols(), n = b.cols();
    tape->record([=](Tape& t) {
      Eigen::Map<const RowMatrixXf> go(t.grad(ido).data(), m, n);
      if (ta)
        Eigen::Map<RowMatrixXf>(t.grad(ida).data(), m, kk) += go * bv.transpose();
      if (tb)
        Eigen::Map<RowMatrixXf>(t.grad(idb).data(), kk, n) += av.transpose() * go;
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions " + shape_str(a) + " vs " +
                     shape_str(b));
  Tensor out({a.rows(), b.rows()});
  gemm_f32_nt(a.data.data(), b.data.data(), out.data.data(), a.rows(), a.cols(),
              b.rows());
  if (tracked(tape, a) || tracked(tape, b)) {
    int ida = a.node_id, idb = b.node_id;
    bool ta = tracked(tape, a), tb = tracked(tape, b);
    int ido = out_node(tape, out);
    RowMatrixXf av = a.mat(), bv = b.mat();
    Index m = a.rows(), kk = a.cols(), n = b.rows();
    tape->record([=](Tape& t) {
      Eigen::Map<const RowMatrixXf> go(t.grad(ido).data(), m, n);
      if (ta)
        Eigen::Map<RowMatrixXf>(t.grad(ida).data(), m, kk) += go * bv;
      if (tb)
        Eigen::Map<RowMatrixXf>(t.grad(idb).data(), n, kk) += go.transpose() * av;
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!a.same_shape(b))
    throw ShapeError("add: shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  Tensor out = a;
  out.node_id = -1;
  out.grad.resize(0);
  out.data += b.data;
  if (tracked(tape, a) || tracked(tape, b)) {
    int ida = a.node_id, idb = b.node_id;
    bool ta = tracked(tape, a), tb = tracked(tape, b);
    int ido = out_node(tape, out);
    tape->record([=](Tape& t) {
      if (ta) t.grad(ida) += t.grad(ido);
      if (tb) t.grad(idb) += t.grad(ido);
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& row, Tape* tape) {
  if (row.numel() != a.cols())
    throw ShapeError("add_rowvec: row length " + shape_str(row) +
                     " vs columns of " + shape_str(a));
  Tensor out = a;
  out.node_id = -1;
  out.grad.resize(0);
  out.mat().rowwise() += Eigen::Map<const Eigen::RowVectorXf>(row.data.data(),
                                                              row.numel());
  if (tracked(tape, a) || tracked(tape, row)) {
    int ida = a.node_id, idr = row.node_id;
    bool ta = tracked(tape, a), tr = tracked(tape, row);
    int ido = out_node(tape, out);
    Index m = a.rows(), n = a.cols();
    tape->record([=](Tape& t) {
      Eigen::Map<const RowMatrixXf> go(t.grad(ido).data(), m, n);
      if (ta) t.grad(ida) += t.grad(ido);
      if (tr)
        Eigen::Map<Eigen::RowVectorXf>(t.grad(idr).data(), n) +=
            go.colwise().sum();
    });
  }
  return out;
}

Tensor add_const(const Tensor& a, const RowMatrixXf& c, Tape* tape) {
  if (a.rows() != c.rows() || a.cols() != c.cols())
    throw ShapeError("add_const: shape mismatch");
  Tensor out = a;
  out.node_id = -1;
  out.grad.resize(0);
  out.mat() += c;
  if (tracked(tape, a)) {
    int ida = a.node_id;
    int ido = out_node(tape, out);
    tape->record([=](Tape& t) { t.grad(ida) += t.grad(ido); });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!a.same_shape(b))
    throw ShapeError("mul: shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  Tensor out = a;
  out.node_id = -1;
  out.grad.resize(0);
  out.data.array() *= b.data.array();
  if (tracked(tape, a) || tracked(tape, b)) {
    int ida = a.node_id, idb = b.node_id;
    bool ta = tracked(tape, a), tb = tracked(tape, b);
    int ido = out_node(tape, out);
    Eigen::VectorXf av = a.data, bv = b.data;
    tape->record([=](Tape& t) {
      if (ta) t.grad(ida).array() += t.grad(ido).array() * bv.array();
      if (tb) t.grad(idb).array() += t.grad(ido).array() * av.array();
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s, Tape* tape) {
  Tensor out = a;
  out.node_id = -1;
  out.grad.resize(0);
  out.data *= s;
  if (tracked(tape, a)) {
    int ida = a.node_id;
    int ido = out_node(tape, out);
    tape->record([=](Tape& t) { t.grad(ida) += s * t.grad(ido); });
  }
  return out;
}

Tensor relu(const Tensor& a, Tape* tape) {
  Tensor out = a;
  out.node_id = -1;
  out.grad.resize(0);
  out.data = out.data.cwiseMax(0.0f);
  if (tracked(tape, a)) {
    int ida = a.node_id;
    int ido = out_node(tape, out);
    Eigen::VectorXf av = a.data;
    tape->record([=](Tape& t) {
      t.grad(ida).array() +=
          t.grad(ido).array() * (av.array() > 0.0f).cast<float>();
    });
  }
  return out;
}

Tensor sum(const Tensor& a, Tape* tape) {
  Tensor out = Tensor::scalar(a.data.sum());
  if (tracked(tape, a)) {
    int ida = a.node_id;
    int ido = out_node(tape, out);
    tape->record([=](Tape& t) { t.grad(ida).array() += t.grad(ido)[0]; });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x, Tape* tape) {
  Tensor out = x;
  out.node_id = -1;
  out.grad.resize(0);
  auto m = out.mat();
  for (Index i = 0; i < m.rows(); ++i) {
    float mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
  if (tracked(tape, x)) {
    int idx = x.node_id;
    int ido = out_node(tape, out);
    RowMatrixXf y = out.mat();
    Index r = out.rows(), c = out.cols();
    tape->record([=](Tape& t) {
      Eigen::Map<const RowMatrixXf> go(t.grad(ido).data(), r, c);
      Eigen::Map<RowMatrixXf> gx(t.grad(idx).data(), r, c);
      for (Index i = 0; i < r; ++i) {
        float dot = go.row(i).dot(y.row(i));
        gx.row(i).array() += y.row(i).array() * (go.row(i).array() - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps, Tape* tape) {
  Index n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeError("layer_norm: gain/bias length vs normalized dim");
  Index r = x.rows();
  RowMatrixXf y(r, n);
  Eigen::VectorXf inv_std(r);
  auto xm = x.mat();
  for (Index i = 0; i < r; ++i) {
    float mu = xm.row(i).mean();
    float var = (xm.row(i).array() - mu).square().mean();
    float is = 1.0f / std::sqrt(var + eps);
    inv_std[i] = is;
    y.row(i) = (xm.row(i).array() - mu) * is;
  }
  Tensor out({r, n});
  Eigen::Map<const Eigen::RowVectorXf> g(gain.data.data(), n);
  Eigen::Map<const Eigen::RowVectorXf> b(bias.data.data(), n);
  out.mat() = (y.array().rowwise() * g.array()).rowwise() + b.array();
  if (tracked(tape, x) || tracked(tape, gain) || tracked(tape, bias)) {
    int idx = x.node_id, idg = gain.node_id, idb = bias.node_id;
    bool tx = tracked(tape, x), tg = tracked(tape, gain),
         tb = tracked(tape, bias);
    int ido = out_node(tape, out);
    Eigen::RowVectorXf gv = g;
    tape->record([=](Tape& t) {
      Eigen::Map<const RowMatrixXf> go(t.grad(ido).data(), r, n);
      if (tg)
        Eigen::Map<Eigen::RowVectorXf>(t.grad(idg).data(), n) +=
            (go.array() * y.array()).colwise().sum().matrix();
      if (tb)
        Eigen::Map<Eigen::RowVectorXf>(t.grad(idb).data(), n) +=
            go.colwise().sum();
      if (tx) {
        Eigen::Map<RowMatrixXf> gx(t.grad(idx).data(), r, n);
        for (Index i = 0; i < r; ++i) {
          Eigen::RowVectorXf dy = go.row(i).cwiseProduct(gv);
          float m1 = dy.mean();
          float m2 = dy.cwiseProduct(y.row(i)).mean();
          gx.row(i).array() +=
              inv_std[i] * (dy.array() - m1 - y.row(i).array() * m2);
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, float p, bool training, Rng& rng, Tape* tape) {
  if (p < 0.0f || p >= 1.0f) throw ValueError("dropout: need 0 <= p < 1");
  if (!training || p == 0.0f) {
    Tensor out = x;
    out.node_id = -1;
    out.grad.resize(0);
    if (tracked(tape, x)) {
      int idx = x.node_id;
      int ido = out_node(tape, out);
      tape->record([=](Tape& t) { t.grad(idx) += t.grad(ido); });
    }
    return out;
  }
  float keep = 1.0f - p;
  Eigen::VectorXf mask(x.numel());
  for (Index i = 0; i < x.numel(); ++i)
    mask[i] = rng.uniform01() < keep ? 1.0f / keep : 0.0f;
  Tensor out = x;
  out.node_id = -1;
  out.grad.resize(0);
  out.data.array() *= mask.array();
  if (tracked(tape, x)) {
    int idx = x.node_id;
    int ido = out_node(tape, out);
    tape->record([=](Tape& t) {
      t.grad(idx).array() += t.grad(ido).array() * mask.array();
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        Tape* tape) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be 2-D");
  Index rows = table.rows(), dim = table.cols();
  Tensor out({static_cast<Index>(ids.size()), dim});
  auto tm = table.mat();
  auto om = out.mat();
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= rows)
      throw IndexError("embedding_lookup: id " + std::to_string(ids[t]) +
                       " out of range [0," + std::to_string(rows) + ")");
    om.row(static_cast<Index>(t)) = tm.row(ids[t]);
  }
  if (tracked(tape, table)) {
    int idt = table.node_id;
    int ido = out_node(tape, out);
    std::vector<int> idv = ids;
    tape->record([=](Tape& t) {
      Eigen::Map<const RowMatrixXf> go(t.grad(ido).data(),
                                       static_cast<Index>(idv.size()), dim);
      Eigen::Map<RowMatrixXf> gt(t.grad(idt).data(), rows, dim);
      for (std::size_t i = 0; i < idv.size(); ++i)
        gt.row(idv[i]) += go.row(static_cast<Index>(i));
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, Index start, Index len, Tape* tape) {
  if (start < 0 || len < 0 || start + len > x.cols())
    throw ShapeError("slice_cols: range out of bounds");
  Tensor out({x.rows(), len});
  out.mat() = x.mat().middleCols(start, len);
  if (tracked(tape, x)) {
    int idx = x.node_id;
    int ido = out_node(tape, out);
    Index r = x.rows(), c = x.cols();
    tape->record([=](Tape& t) {
      Eigen::Map<RowMatrixXf>(t.grad(idx).data(), r, c).middleCols(start, len) +=
          Eigen::Map<const RowMatrixXf>(t.grad(ido).data(), r, len);
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) throw ShapeError("concat_cols: empty list");
  Index r = parts[0].rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor out({r, total});
  Index off = 0;
  bool any_tracked = false;
  for (const auto& p : parts) {
    out.mat().middleCols(off, p.cols()) = p.mat();
    off += p.cols();
    if (tracked(tape, p)) any_tracked = true;
  }
  if (any_tracked) {
    struct Piece {
      int id;
      Index off, len;
    };
    std::vector<Piece> pieces;
    off = 0;
    for (const auto& p : parts) {
      if (tracked(tape, p)) pieces.push_back({p.node_id, off, p.cols()});
      off += p.cols();
    }
    int ido = out_node(tape, out);
    tape->record([=](Tape& t) {
      Eigen::Map<const RowMatrixXf> go(t.grad(ido).data(), r, total);
      for (const auto& pc : pieces)
        Eigen::Map<RowMatrixXf>(t.grad(pc.id).data(), r, pc.len) +=
            go.middleCols(pc.off, pc.len);
    });
  }
  return out;
}

}  // namespace minimt
