// Copyright (c) 2026 The fairprompt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with define-by-run reverse-mode differentiation.
// A Tensor is a cheap handle onto shared storage; free functions build the
// computation, and an active GradTape records backward closures in execution
// order. Replaying the tape in reverse propagates gradients into every
// requires-grad ancestor exactly once per backward() call. Eigen supplies
// all dense kernels.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fairprompt/errors.hpp"

namespace fairprompt {

using Scalar = double;
using Index = Eigen::Index;
using Shape = std::vector<Index>;

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using FlatArray = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

Index numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
  Shape shape;
  FlatArray value;  // row-major flat storage
  FlatArray grad;   // zero-length until first accumulation
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar v, bool requires_grad = false);
  static Tensor scalar(Scalar v, bool requires_grad = false);
  static Tensor from_flat(Shape shape, FlatArray data, bool requires_grad = false);
  static Tensor from_matrix(const RowMat& m, bool requires_grad = false);
  static Tensor from_vector(const ColVec& v, bool requires_grad = false);
  static Tensor identity(Index n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }
  /// Row/column extents under the rank<=2 convention (rank-1 is a single row).
  Index rows() const;
  Index cols() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool rg);

  Scalar item() const;
  Scalar at(Index flat) const;
  Scalar at(Index r, Index c) const;

  const FlatArray& flat() const { return node_->value; }
  FlatArray& mutable_flat() { return node_->value; }
  Eigen::Map<const RowMat> matrix() const;
  Eigen::Map<const ColVec> vector() const;

  /// Accumulated gradient; zero-sized until backward touches this tensor.
  const FlatArray& grad_flat() const { return node_->grad; }
  FlatArray grad_or_zero() const;
  void zero_grad();

  const std::shared_ptr<TensorNode>& node() const { return node_; }

  /// Value copy detached from any graph; never requires grad.
  Tensor detached() const;

  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Execution-ordered record of differentiable operations. backward(loss)
/// zeroes the gradients of every recorded result, seeds the scalar loss with
/// 1 and replays the closures in exact reverse order. Gradients of leaf
/// tensors (anything never produced by a recorded op) accumulate across
/// backward calls until zero_grads is invoked.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  void backward(const Tensor& loss);
  void clear();
  std::size_t size() const { return records_.size(); }

  static GradTape* active();
  void push(std::shared_ptr<TensorNode> out, std::function<void()> fn);

 private:
  struct Record {
    std::shared_ptr<TensorNode> out;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
  friend class TapeScope;
};

/// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

// ---- differentiable operations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar s);
Tensor neg(const Tensor& a);
/// Adds a length-c vector to every row of an r x c tensor.
Tensor add_rowvec(const Tensor& a, const Tensor& v);
Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
/// Normalizes along dimension `axis`; every slice sums to 1. Max-subtraction
/// keeps exp in range for arbitrary finite logits.
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a);  // rank-1
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Scalar eps);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& a);
Tensor pick(const Tensor& a, Index flat_index);
Tensor row(const Tensor& a, Index r);
Tensor slice_rows(const Tensor& a, Index begin, Index count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_vec(std::span<const Tensor> parts);
Tensor reshape(const Tensor& a, Shape shape);
/// X solving A X = B for symmetric positive definite A. Differentiable in
/// both arguments; throws NumericError when A is singular.
Tensor solve_psd(const Tensor& a, const Tensor& b);

void zero_grads(std::span<Tensor> params);

// ---- gradient checking ---------------------------------------------------

struct GradCheckOptions {
  Scalar step = 1e-5;                 // central-difference h, in [1e-6, 1e-4]
  Index max_coords_per_tensor = 0;    // 0 checks every coordinate
  std::uint64_t coord_seed = 0;       // subsample selection when limited
};

/// Central finite differences against tape gradients for a scalar loss
/// f(). Returns the max relative error over all checked coordinates with
/// denominator max(|analytic|, |numeric|, 1e-8).
Scalar grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                  const GradCheckOptions& opts = {});
Scalar grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                  Scalar h);

}  // namespace fairprompt
