// Copyright (c) 2026 The fairprompt Authors
// SPDX-License-Identifier: Apache-2.0

#include "fairprompt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "fairprompt/rng.hpp"

namespace fairprompt {

namespace {

thread_local GradTape* g_active_tape = nullptr;

/// Temporarily disables recording on the current thread (finite differences,
/// pure evaluation inside an outer training tape).
class TapeSuspend {
 public:
  TapeSuspend() : prev_(g_active_tape) { g_active_tape = nullptr; }
  ~TapeSuspend() { g_active_tape = prev_; }

 private:
  GradTape* prev_;
};

void ensure_grad(TensorNode& n) {
  if (n.grad.size() != n.value.size()) n.grad = FlatArray::Zero(n.value.size());
}

Tensor make_result(Shape shape, FlatArray data, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

void record(const Tensor& out, std::function<void()> fn) {
  if (out.requires_grad() && g_active_tape != nullptr)
    g_active_tape->push(out.node(), std::move(fn));
}

// Effective (rows, cols) of a rank<=2 tensor; rank-1 acts as one row.
std::pair<Index, Index> eff_dims(const TensorNode& n) {
  if (n.shape.size() == 1) return {1, n.shape[0]};
  if (n.shape.size() == 2) return {n.shape[0], n.shape[1]};
  throw ShapeError("operation requires rank<=2 tensor, got shape " +
                   shape_str(n.shape));
}

Eigen::Map<const RowMat> as_mat(const TensorNode& n) {
  auto [r, c] = eff_dims(n);
  return Eigen::Map<const RowMat>(n.value.data(), r, c);
}

Eigen::Map<RowMat> grad_mat(TensorNode& n) {
  ensure_grad(n);
  auto [r, c] = eff_dims(n);
  return Eigen::Map<RowMat>(n.grad.data(), r, c);
}

void check_finite(const FlatArray& a, const char* op) {
  if (!a.isFinite().all())
    throw NumericError(std::string(op) + ": non-finite result");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar v, bool requires_grad) {
  for (Index d : shape)
    if (d <= 0)
      throw ShapeError("Tensor: non-positive dimension in " + shape_str(shape));
  Index n = numel(shape);
  Tensor t = make_result(std::move(shape), FlatArray::Constant(n, v), false);
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(Scalar v, bool requires_grad) {
  return full({1}, v, requires_grad);
}

Tensor Tensor::from_flat(Shape shape, FlatArray data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw ShapeError("Tensor: data size " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  Tensor t = make_result(std::move(shape), std::move(data), false);
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from_matrix(const RowMat& m, bool requires_grad) {
  FlatArray flat = Eigen::Map<const FlatArray>(m.data(), m.size());
  return from_flat({m.rows(), m.cols()}, std::move(flat), requires_grad);
}

Tensor Tensor::from_vector(const ColVec& v, bool requires_grad) {
  FlatArray flat = Eigen::Map<const FlatArray>(v.data(), v.size());
  return from_flat({v.size()}, std::move(flat), requires_grad);
}

Tensor Tensor::identity(Index n) {
  RowMat m = RowMat::Identity(n, n);
  return from_matrix(m);
}

Index Tensor::rows() const { return eff_dims(*node_).first; }
Index Tensor::cols() const { return eff_dims(*node_).second; }

Tensor& Tensor::set_requires_grad(bool rg) {
  node_->requires_grad = rg;
  if (rg)
    ensure_grad(*node_);
  else
    node_->grad.resize(0);
  return *this;
}

Scalar Tensor::item() const {
  if (size() != 1)
    throw ShapeError("item(): tensor has " + std::to_string(size()) +
                     " elements");
  return node_->value[0];
}

Scalar Tensor::at(Index flat) const {
  if (flat < 0 || flat >= size())
    throw ShapeError("at(): index out of range");
  return node_->value[flat];
}

Scalar Tensor::at(Index r, Index c) const {
  auto [nr, nc] = eff_dims(*node_);
  if (r < 0 || r >= nr || c < 0 || c >= nc)
    throw ShapeError("at(): index out of range");
  return node_->value[r * nc + c];
}

Eigen::Map<const RowMat> Tensor::matrix() const { return as_mat(*node_); }

Eigen::Map<const ColVec> Tensor::vector() const {
  return Eigen::Map<const ColVec>(node_->value.data(), node_->value.size());
}

FlatArray Tensor::grad_or_zero() const {
  if (node_->grad.size() == node_->value.size()) return node_->grad;
  return FlatArray::Zero(node_->value.size());
}

void Tensor::zero_grad() {
  if (node_->requires_grad) {
    ensure_grad(*node_);
    node_->grad.setZero();
  }
}

Tensor Tensor::detached() const {
  return make_result(node_->shape, node_->value, false);
}

// ---- GradTape ---------------------------------------------------------------

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::push(std::shared_ptr<TensorNode> out, std::function<void()> fn) {
  records_.push_back({std::move(out), std::move(fn)});
}

void GradTape::clear() { records_.clear(); }

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ValueError("backward: loss must be a scalar tensor");
  // Interior results get fresh gradients every call; leaves keep accumulating
  // until zero_grads.
  for (auto& r : records_) {
    if (r.out->requires_grad) {
      ensure_grad(*r.out);
      r.out->grad.setZero();
    }
  }
  if (!loss.requires_grad()) return;
  ensure_grad(*loss.node());
  loss.node()->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
}

TapeScope::TapeScope(GradTape& tape) : prev_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = prev_; }

// ---- operations --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() > 2 || b.rank() > 2 || (a.rank() == 1 && b.rank() == 1))
    throw ShapeError("matmul: unsupported ranks for shapes " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Index m = (a.rank() == 1) ? 1 : a.shape()[0];
  const Index k = (a.rank() == 1) ? a.shape()[0] : a.shape()[1];
  const Index kb = (b.rank() == 1) ? b.shape()[0] : b.shape()[0];
  const Index n = (b.rank() == 1) ? 1 : b.shape()[1];
  if (k != kb)
    throw ShapeError("matmul: inner dimensions differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));

  Eigen::Map<const RowMat> am(a.flat().data(), m, k);
  Eigen::Map<const RowMat> bm(b.flat().data(), kb, n);
  RowMat c = am * bm;

  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2)
    out_shape = {m, n};
  else if (a.rank() == 1)
    out_shape = {n};
  else
    out_shape = {m};

  FlatArray flat = Eigen::Map<const FlatArray>(c.data(), c.size());
  Tensor out = make_result(std::move(out_shape), std::move(flat),
                           a.requires_grad() || b.requires_grad());
  record(out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
    Eigen::Map<const RowMat> g(on->grad.data(), m, n);
    Eigen::Map<const RowMat> am(an->value.data(), m, k);
    Eigen::Map<const RowMat> bm(bn->value.data(), k, n);
    if (an->requires_grad) {
      ensure_grad(*an);
      Eigen::Map<RowMat>(an->grad.data(), m, k).noalias() += g * bm.transpose();
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      Eigen::Map<RowMat>(bn->grad.data(), k, n).noalias() += am.transpose() * g;
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose: rank-2 required, got " + shape_str(a.shape()));
  RowMat t = a.matrix().transpose();
  FlatArray flat = Eigen::Map<const FlatArray>(t.data(), t.size());
  Tensor out = make_result({t.rows(), t.cols()}, std::move(flat),
                           a.requires_grad());
  record(out, [an = a.node(), on = out.node()] {
    if (!an->requires_grad) return;
    auto [r, c] = eff_dims(*an);
    Eigen::Map<const RowMat> g(on->grad.data(), c, r);
    grad_mat(*an) += g.transpose();
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_result(a.shape(), a.flat() + b.flat(),
                           a.requires_grad() || b.requires_grad());
  record(out, [an = a.node(), bn = b.node(), on = out.node()] {
    if (an->requires_grad) {
      ensure_grad(*an);
      an->grad += on->grad;
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      bn->grad += on->grad;
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_result(a.shape(), a.flat() - b.flat(),
                           a.requires_grad() || b.requires_grad());
  record(out, [an = a.node(), bn = b.node(), on = out.node()] {
    if (an->requires_grad) {
      ensure_grad(*an);
      an->grad += on->grad;
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      bn->grad -= on->grad;
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_result(a.shape(), a.flat() * b.flat(),
                           a.requires_grad() || b.requires_grad());
  record(out, [an = a.node(), bn = b.node(), on = out.node()] {
    if (an->requires_grad) {
      ensure_grad(*an);
      an->grad += on->grad * bn->value;
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      bn->grad += on->grad * an->value;
    }
  });
  return out;
}

Tensor scale(const Tensor& a, Scalar s) {
  Tensor out = make_result(a.shape(), a.flat() * s, a.requires_grad());
  record(out, [an = a.node(), on = out.node(), s] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad += on->grad * s;
  });
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.rank() != 1 || v.size() != a.cols())
    throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) +
                     " does not match columns of " + shape_str(a.shape()));
  RowMat m = a.matrix();
  m.rowwise() += v.vector().transpose();
  FlatArray flat = Eigen::Map<const FlatArray>(m.data(), m.size());
  Tensor out = make_result(a.shape(), std::move(flat),
                           a.requires_grad() || v.requires_grad());
  record(out, [an = a.node(), vn = v.node(), on = out.node()] {
    if (an->requires_grad) {
      ensure_grad(*an);
      an->grad += on->grad;
    }
    if (vn->requires_grad) {
      ensure_grad(*vn);
      Eigen::Map<ColVec>(vn->grad.data(), vn->grad.size()) +=
          as_mat(*on).colwise().sum().transpose();
    }
  });
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = make_result(a.shape(), a.flat().max(0.0), a.requires_grad());
  record(out, [an = a.node(), on = out.node()] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad += on->grad * (an->value > 0.0).cast<Scalar>();
  });
  return out;
}

Tensor log(const Tensor& a) {
  if ((a.flat() <= 0.0).any())
    throw NumericError("log: non-positive input");
  Tensor out = make_result(a.shape(), a.flat().log(), a.requires_grad());
  check_finite(out.flat(), "log");
  record(out, [an = a.node(), on = out.node()] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad += on->grad / an->value;
  });
  return out;
}

namespace {

// Row-wise stabilized softmax of a dense matrix.
RowMat softmax_rows(const Eigen::Ref<const RowMat>& x) {
  RowMat y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar mx = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - mx).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  if (a.rank() == 1) {
    if (axis != 0)
      throw ShapeError("softmax: axis " + std::to_string(axis) +
                       " invalid for shape " + shape_str(a.shape()));
  } else if (a.rank() == 2) {
    if (axis != 0 && axis != 1)
      throw ShapeError("softmax: axis " + std::to_string(axis) +
                       " invalid for shape " + shape_str(a.shape()));
  } else {
    throw ShapeError("softmax: rank<=2 required, got " + shape_str(a.shape()));
  }

  const bool along_cols = (a.rank() == 2 && axis == 0);
  RowMat x = a.matrix();
  RowMat y;
  if (along_cols) {
    RowMat xt = x.transpose();
    y = softmax_rows(xt).transpose();
  } else {
    y = softmax_rows(x);
  }
  FlatArray flat = Eigen::Map<const FlatArray>(y.data(), y.size());
  Tensor out = make_result(a.shape(), std::move(flat), a.requires_grad());
  check_finite(out.flat(), "softmax");
  record(out, [an = a.node(), on = out.node(), along_cols] {
    if (!an->requires_grad) return;
    RowMat y = as_mat(*on);
    auto [r, c] = eff_dims(*on);
    Eigen::Map<const RowMat> g(on->grad.data(), r, c);
    RowMat gx(r, c);
    if (along_cols) {
      for (Index j = 0; j < c; ++j) {
        const Scalar s = (g.col(j).array() * y.col(j).array()).sum();
        gx.col(j) = y.col(j).array() * (g.col(j).array() - s);
      }
    } else {
      for (Index i = 0; i < r; ++i) {
        const Scalar s = (g.row(i).array() * y.row(i).array()).sum();
        gx.row(i) = y.row(i).array() * (g.row(i).array() - s);
      }
    }
    grad_mat(*an) += gx;
  });
  return out;
}

Tensor log_softmax(const Tensor& a) {
  if (a.rank() != 1)
    throw ShapeError("log_softmax: rank-1 required, got " +
                     shape_str(a.shape()));
  const Scalar mx = a.flat().maxCoeff();
  FlatArray shifted = a.flat() - mx;
  const Scalar lse = std::log(shifted.exp().sum());
  Tensor out = make_result(a.shape(), shifted - lse, a.requires_grad());
  check_finite(out.flat(), "log_softmax");
  record(out, [an = a.node(), on = out.node()] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    const FlatArray p = on->value.exp();
    an->grad += on->grad - p * on->grad.sum();
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Scalar eps) {
  if (eps <= 0.0) throw ValueError("layer_norm: eps must be positive");
  const Index d = x.cols();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.size() != d ||
      bias.size() != d)
    throw ShapeError("layer_norm: gain/bias must be rank-1 of size " +
                     std::to_string(d));
  RowMat xm = x.matrix();
  const Index r = xm.rows();
  RowMat xhat(r, d);
  ColVec sinv(r);
  for (Index i = 0; i < r; ++i) {
    const Scalar mu = xm.row(i).mean();
    const Scalar var = (xm.row(i).array() - mu).square().mean();
    sinv[i] = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xm.row(i).array() - mu) * sinv[i];
  }
  RowMat y = xhat;
  y.array().rowwise() *= gain.vector().transpose().array();
  y.array().rowwise() += bias.vector().transpose().array();
  FlatArray flat = Eigen::Map<const FlatArray>(y.data(), y.size());
  Tensor out =
      make_result(x.shape(), std::move(flat),
                  x.requires_grad() || gain.requires_grad() ||
                      bias.requires_grad());
  check_finite(out.flat(), "layer_norm");
  record(out, [xn = x.node(), gn = gain.node(), bn = bias.node(),
               on = out.node(), xhat, sinv] {
    auto [r, d] = eff_dims(*on);
    Eigen::Map<const RowMat> g(on->grad.data(), r, d);
    if (gn->requires_grad) {
      ensure_grad(*gn);
      Eigen::Map<ColVec>(gn->grad.data(), d) +=
          (g.array() * xhat.array()).colwise().sum().matrix().transpose();
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      Eigen::Map<ColVec>(bn->grad.data(), d) +=
          g.colwise().sum().transpose();
    }
    if (xn->requires_grad) {
      RowMat gx(r, d);
      for (Index i = 0; i < r; ++i) {
        Eigen::Array<Scalar, Eigen::Dynamic, 1> h =
            g.row(i).transpose().array() *
            Eigen::Map<const ColVec>(gn->value.data(), d).array();
        const Scalar mh = h.mean();
        const Scalar mhx = (h * xhat.row(i).transpose().array()).mean();
        gx.row(i) =
            ((h - mh - xhat.row(i).transpose().array() * mhx) * sinv[i])
                .transpose();
      }
      grad_mat(*xn) += gx;
    }
  });
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_result({1}, FlatArray::Constant(1, a.flat().sum()),
                           a.requires_grad());
  record(out, [an = a.node(), on = out.node()] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad += on->grad[0];
  });
  return out;
}

Tensor mean(const Tensor& a) {
  const Scalar n = static_cast<Scalar>(a.size());
  Tensor out = make_result({1}, FlatArray::Constant(1, a.flat().sum() / n),
                           a.requires_grad());
  record(out, [an = a.node(), on = out.node(), n] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad += on->grad[0] / n;
  });
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size())
    throw ShapeError("dot: rank-1 tensors of equal size required, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Scalar v = (a.flat() * b.flat()).sum();
  Tensor out = make_result({1}, FlatArray::Constant(1, v),
                           a.requires_grad() || b.requires_grad());
  record(out, [an = a.node(), bn = b.node(), on = out.node()] {
    const Scalar g = on->grad[0];
    if (an->requires_grad) {
      ensure_grad(*an);
      an->grad += g * bn->value;
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      bn->grad += g * an->value;
    }
  });
  return out;
}

Tensor l2_normalize(const Tensor& a) {
  if (a.rank() != 1)
    throw ShapeError("l2_normalize: rank-1 required, got " +
                     shape_str(a.shape()));
  const Scalar n = std::sqrt((a.flat() * a.flat()).sum());
  if (!(n > 1e-300))
    throw NumericError("l2_normalize: zero-norm input");
  Tensor out = make_result(a.shape(), a.flat() / n, a.requires_grad());
  record(out, [an = a.node(), on = out.node(), n] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    const Scalar yg = (on->value * on->grad).sum();
    an->grad += (on->grad - on->value * yg) / n;
  });
  return out;
}

Tensor pick(const Tensor& a, Index flat_index) {
  if (flat_index < 0 || flat_index >= a.size())
    throw ShapeError("pick: index " + std::to_string(flat_index) +
                     " out of range for size " + std::to_string(a.size()));
  Tensor out = make_result({1}, FlatArray::Constant(1, a.flat()[flat_index]),
                           a.requires_grad());
  record(out, [an = a.node(), on = out.node(), flat_index] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad[flat_index] += on->grad[0];
  });
  return out;
}

Tensor row(const Tensor& a, Index r) {
  if (a.rank() != 2)
    throw ShapeError("row: rank-2 required, got " + shape_str(a.shape()));
  const Index c = a.shape()[1];
  if (r < 0 || r >= a.shape()[0])
    throw ShapeError("row: index out of range");
  FlatArray flat = a.flat().segment(r * c, c);
  Tensor out = make_result({c}, std::move(flat), a.requires_grad());
  record(out, [an = a.node(), on = out.node(), r, c] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad.segment(r * c, c) += on->grad;
  });
  return out;
}

Tensor slice_rows(const Tensor& a, Index begin, Index count) {
  if (a.rank() != 2)
    throw ShapeError("slice_rows: rank-2 required, got " +
                     shape_str(a.shape()));
  const Index c = a.shape()[1];
  if (begin < 0 || count <= 0 || begin + count > a.shape()[0])
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of bounds for " +
                     shape_str(a.shape()));
  FlatArray flat = a.flat().segment(begin * c, count * c);
  Tensor out = make_result({count, c}, std::move(flat), a.requires_grad());
  record(out, [an = a.node(), on = out.node(), begin, count, c] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad.segment(begin * c, count * c) += on->grad;
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ValueError("concat_rows: no parts");
  const Index c = parts[0].cols();
  Index total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() > 2 || p.cols() != c)
      throw ShapeError("concat_rows: column mismatch at " +
                       shape_str(p.shape()));
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  FlatArray flat(total * c);
  Index off = 0;
  for (const Tensor& p : parts) {
    flat.segment(off, p.size()) = p.flat();
    off += p.size();
  }
  Tensor out = make_result({total, c}, std::move(flat), rg);
  std::vector<std::shared_ptr<TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) nodes.push_back(p.node());
  record(out, [nodes, on = out.node()] {
    Index off = 0;
    for (auto& pn : nodes) {
      if (pn->requires_grad) {
        ensure_grad(*pn);
        pn->grad += on->grad.segment(off, pn->value.size());
      }
      off += pn->value.size();
    }
  });
  return out;
}

Tensor concat_vec(std::span<const Tensor> parts) {
  if (parts.empty()) throw ValueError("concat_vec: no parts");
  Index total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 1)
      throw ShapeError("concat_vec: rank-1 parts required, got " +
                       shape_str(p.shape()));
    total += p.size();
    rg = rg || p.requires_grad();
  }
  FlatArray flat(total);
  Index off = 0;
  for (const Tensor& p : parts) {
    flat.segment(off, p.size()) = p.flat();
    off += p.size();
  }
  Tensor out = make_result({total}, std::move(flat), rg);
  std::vector<std::shared_ptr<TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) nodes.push_back(p.node());
  record(out, [nodes, on = out.node()] {
    Index off = 0;
    for (auto& pn : nodes) {
      if (pn->requires_grad) {
        ensure_grad(*pn);
        pn->grad += on->grad.segment(off, pn->value.size());
      }
      off += pn->value.size();
    }
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor out = make_result(std::move(shape), a.flat(), a.requires_grad());
  record(out, [an = a.node(), on = out.node()] {
    if (!an->requires_grad) return;
    ensure_grad(*an);
    an->grad += on->grad;
  });
  return out;
}

Tensor solve_psd(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.shape()[0] != a.shape()[1])
    throw ShapeError("solve_psd: square matrix required, got " +
                     shape_str(a.shape()));
  const Index n = a.shape()[0];
  if (b.rows() != n && !(b.rank() == 1 && b.size() == n))
    throw ShapeError("solve_psd: rhs " + shape_str(b.shape()) +
                     " incompatible with " + shape_str(a.shape()));
  const Index m = (b.rank() == 1) ? 1 : b.shape()[1];

  Eigen::MatrixXd A = a.matrix();
  auto ldlt = std::make_shared<Eigen::LDLT<Eigen::MatrixXd>>(A);
  if (ldlt->info() != Eigen::Success)
    throw NumericError("solve_psd: factorization failed");
  const Eigen::VectorXd d = ldlt->vectorD();
  const Scalar dmax = d.cwiseAbs().maxCoeff();
  if (d.minCoeff() <= dmax * 1e-13)
    throw NumericError("solve_psd: matrix is singular or not positive definite");

  Eigen::MatrixXd B(n, m);
  if (b.rank() == 1)
    B = b.vector();
  else
    B = b.matrix();
  Eigen::MatrixXd X = ldlt->solve(B);

  RowMat xr = X;
  FlatArray flat = Eigen::Map<const FlatArray>(xr.data(), xr.size());
  Shape out_shape = (b.rank() == 1) ? Shape{n} : Shape{n, m};
  Tensor out = make_result(std::move(out_shape), std::move(flat),
                           a.requires_grad() || b.requires_grad());
  check_finite(out.flat(), "solve_psd");
  record(out, [an = a.node(), bn = b.node(), on = out.node(), ldlt, X, n, m] {
    Eigen::MatrixXd G(n, m);
    if (on->shape.size() == 1)
      G = Eigen::Map<const ColVec>(on->grad.data(), n);
    else
      G = Eigen::Map<const RowMat>(on->grad.data(), n, m);
    const Eigen::MatrixXd gb = ldlt->solve(G);  // A^{-1} G, A symmetric
    if (bn->requires_grad) {
      ensure_grad(*bn);
      if (bn->shape.size() == 1)
        Eigen::Map<ColVec>(bn->grad.data(), n) += gb;
      else
        Eigen::Map<RowMat>(bn->grad.data(), n, m) += gb;
    }
    if (an->requires_grad) {
      ensure_grad(*an);
      Eigen::Map<RowMat>(an->grad.data(), n, n).noalias() -=
          gb * X.transpose();
    }
  });
  return out;
}

void zero_grads(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

// ---- grad_check -------------------------------------------------------------

Scalar grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                  const GradCheckOptions& opts) {
  const Scalar h = opts.step;
  if (h < 1e-6 || h > 1e-4)
    throw ValueError("grad_check: step must lie in [1e-6, 1e-4]");

  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = f();
  }
  if (loss.size() != 1 || !std::isfinite(loss.item()))
    throw NumericError("grad_check: loss is not a finite scalar");
  tape.backward(loss);

  std::vector<FlatArray> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad_or_zero());

  TapeSuspend no_tape;
  Scalar max_rel = 0.0;
  Rng rng(opts.coord_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<Index> coords(static_cast<std::size_t>(p.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (opts.max_coords_per_tensor > 0 &&
        p.size() > opts.max_coords_per_tensor) {
      rng.shuffle(coords);
      coords.resize(static_cast<std::size_t>(opts.max_coords_per_tensor));
    }
    for (Index i : coords) {
      const Scalar orig = p.mutable_flat()[i];
      p.mutable_flat()[i] = orig + h;
      const Scalar lp = f().item();
      p.mutable_flat()[i] = orig - h;
      const Scalar lm = f().item();
      p.mutable_flat()[i] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw NumericError("grad_check: non-finite loss during perturbation");
      const Scalar numeric = (lp - lm) / (2.0 * h);
      const Scalar a = analytic[pi][i];
      const Scalar denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

Scalar grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                  Scalar h) {
  GradCheckOptions opts;
  opts.step = h;
  return grad_check(f, params, opts);
}

}  // namespace fairprompt
