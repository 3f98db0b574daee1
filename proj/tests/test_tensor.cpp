// Copyright (c) 2026 The fairprompt Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fairprompt/rng.hpp"
#include "fairprompt/tensor.hpp"
#include "test_util.hpp"

using namespace fairprompt;
using fptest::rand_tensor;

namespace {

// Independent triple-loop product, the oracle for every matmul assertion.
Eigen::MatrixXd matmul_oracle(const Eigen::MatrixXd& a,
                              const Eigen::MatrixXd& b) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index k = 0; k < a.cols(); ++k) c(i, j) += a(i, k) * b(k, j);
  return c;
}

Eigen::VectorXd softmax_oracle(const Eigen::VectorXd& x) {
  Eigen::VectorXd e = x.array().exp();
  return e / e.sum();
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor i2 = Tensor::identity(2);
  Tensor p = matmul(i2, i2);
  CHECK(p.at(0, 0) == 1.0);
  CHECK(p.at(0, 1) == 0.0);
  CHECK(p.at(1, 1) == 1.0);

  Tensor a = Tensor::from_matrix((RowMat(2, 2) << 1, 2, 3, 4).finished());
  Tensor b = Tensor::from_matrix((RowMat(2, 1) << 0, 1).finished());
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == 2.0);
  CHECK(c.at(1, 0) == 4.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  Tensor a = rand_tensor(rng, {3, 4});
  Tensor b = rand_tensor(rng, {4, 2});
  Tensor c = matmul(a, b);
  Eigen::MatrixXd ref = matmul_oracle(a.matrix(), b.matrix());
  CHECK(fptest::max_abs_diff(c, ref) < 1e-12);
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2x3]"), ShapeError);
  try {
    matmul(a, b);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul associativity on random triples") {
  Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    Tensor a = rand_tensor(rng, {3, 5});
    Tensor b = rand_tensor(rng, {5, 4});
    Tensor c = rand_tensor(rng, {4, 2});
    Eigen::MatrixXd l = matmul(matmul(a, b), c).matrix();
    Eigen::MatrixXd r = matmul(a, matmul(b, c)).matrix();
    double scale = std::max(1.0, l.cwiseAbs().maxCoeff());
    CHECK((l - r).cwiseAbs().maxCoeff() / scale < 1e-9);
  }
}

TEST_CASE("softmax uniform, stability, oracle") {
  Tensor u = softmax(Tensor::from_vector((ColVec(3) << 0, 0, 0).finished()), 0);
  for (int i = 0; i < 3; ++i) CHECK(u.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor s = softmax(Tensor::from_vector((ColVec(2) << 1000, 0).finished()), 0);
  CHECK(std::isfinite(s.at(0)));
  CHECK(s.at(0) == doctest::Approx(1.0));
  CHECK(s.at(1) == doctest::Approx(0.0));

  Tensor x = Tensor::from_vector((ColVec(3) << 1, 2, 3).finished());
  Tensor y = softmax(x, 0);
  Eigen::VectorXd ref = softmax_oracle(x.vector());
  for (int i = 0; i < 3; ++i) CHECK(std::abs(y.at(i) - ref[i]) < 1e-12);
}

TEST_CASE("softmax slices sum to one and shift invariance") {
  Rng rng(3);
  Tensor x = rand_tensor(rng, {4, 6});
  for (int axis : {0, 1}) {
    Tensor y = softmax(x, axis);
    Eigen::MatrixXd m = y.matrix();
    if (axis == 1) {
      for (int i = 0; i < 4; ++i) CHECK(std::abs(m.row(i).sum() - 1.0) < 1e-12);
    } else {
      for (int j = 0; j < 6; ++j) CHECK(std::abs(m.col(j).sum() - 1.0) < 1e-12);
    }
  }
  // adding a constant to a slice leaves the softmax unchanged
  Tensor x1 = Tensor::from_flat(x.shape(), x.flat() + 17.25);
  Eigen::MatrixXd a = softmax(x, 1).matrix();
  Eigen::MatrixXd b = softmax(x1, 1).matrix();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("softmax invalid axis") {
  Tensor x = Tensor::zeros({3});
  CHECK_THROWS_AS(softmax(x, 1), ShapeError);
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), ShapeError);
}

TEST_CASE("layer_norm contract") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});

  Tensor c = layer_norm(Tensor::full({4}, 5.0), gain, bias, 1e-5);
  for (int i = 0; i < 4; ++i) CHECK(c.at(i) == 0.0);

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor two = layer_norm(
      Tensor::from_vector((ColVec(2) << 1, 3).finished()), g2, b2, 1e-15);
  CHECK(two.at(0) == doctest::Approx(-1.0).epsilon(1e-7));
  CHECK(two.at(1) == doctest::Approx(1.0).epsilon(1e-7));

  Rng rng(5);
  Tensor x = rand_tensor(rng, {3, 8});
  Tensor g8 = Tensor::full({8}, 1.0);
  Tensor b8 = Tensor::zeros({8});
  Tensor y = layer_norm(x, g8, b8, 1e-12);
  Eigen::MatrixXd xm = x.matrix();
  for (int i = 0; i < 3; ++i) {
    // explicit mean/variance oracle
    double mu = xm.row(i).mean();
    double var = (xm.row(i).array() - mu).square().mean();
    for (int j = 0; j < 8; ++j) {
      double ref = (xm(i, j) - mu) / std::sqrt(var + 1e-12);
      CHECK(std::abs(y.at(i, j) - ref) < 1e-10);
    }
    CHECK(std::abs(y.matrix().row(i).mean()) < 1e-9);
  }
}

TEST_CASE("grad_check on quadratic, constant, and known gradient") {
  Rng rng(1);
  Tensor x = Tensor::from_vector((ColVec(2) << 1, 2).finished(), true);
  auto f = [&] { return sum(mul(x, x)); };
  std::vector<Tensor> params{x};
  CHECK(grad_check(f, params, 1e-4) < 1e-8);

  zero_grads(params);
  GradTape tape;
  {
    TapeScope scope(tape);
    tape.backward(f());
  }
  CHECK(x.grad_flat()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(x.grad_flat()[1] == doctest::Approx(4.0).epsilon(1e-12));

  auto constant = [] { return Tensor::scalar(3.5); };
  CHECK(grad_check(constant, params, 1e-5) == 0.0);

  CHECK_THROWS_AS(grad_check(f, params, 1e-2), ValueError);
}

TEST_CASE("single-op gradients match finite differences") {
  Rng rng(23);
  auto check = [&](const std::function<Tensor()>& f, std::vector<Tensor> ps) {
    CHECK(grad_check(f, ps, 1e-5) < 1e-7);
  };

  Tensor a = rand_tensor(rng, {3, 4}, true);
  Tensor b = rand_tensor(rng, {4, 2}, true);
  Tensor w = rand_tensor(rng, {3, 2});
  check([&] { return sum(mul(matmul(a, b), w)); }, {a, b});

  Tensor t = rand_tensor(rng, {3, 4}, true);
  Tensor wt = rand_tensor(rng, {4, 3});
  check([&] { return sum(mul(transpose(t), wt)); }, {t});

  Tensor u = rand_tensor(rng, {5}, true);
  Tensor v = rand_tensor(rng, {5}, true);
  check([&] { return sum(mul(add(u, v), v.detached())); }, {u, v});
  check([&] { return sum(mul(sub(u, v), u.detached())); }, {u, v});
  check([&] { return sum(mul(u, v)); }, {u, v});
  check([&] { return scale(sum(u), -2.5); }, {u});
  check([&] { return sum(neg(u)); }, {u});
  check([&] { return mean(mul(u, u)); }, {u});
  check([&] { return dot(u, v); }, {u, v});

  Tensor m = rand_tensor(rng, {3, 5}, true);
  Tensor rv = rand_tensor(rng, {5}, true);
  Tensor wm = rand_tensor(rng, {3, 5});
  check([&] { return sum(mul(add_rowvec(m, rv), wm)); }, {m, rv});

  // relu away from the kink
  FlatArray rd(6);
  rd << 0.7, -0.9, 1.3, -0.4, 0.5, -1.1;
  Tensor r = Tensor::from_flat({6}, rd, true);
  check([&] { return sum(mul(relu(r), v.detached())); }, {r});

  FlatArray pd(4);
  pd << 0.6, 1.7, 0.9, 2.4;
  Tensor pos = Tensor::from_flat({4}, pd, true);
  check([&] { return sum(fairprompt::log(pos)); }, {pos});

  Tensor sm = rand_tensor(rng, {3, 4}, true);
  Tensor wsm = rand_tensor(rng, {3, 4});
  check([&] { return sum(mul(softmax(sm, 1), wsm)); }, {sm});
  check([&] { return sum(mul(softmax(sm, 0), wsm)); }, {sm});

  Tensor ls = rand_tensor(rng, {5}, true);
  check([&] { return sum(mul(log_softmax(ls), v.detached())); }, {ls});

  Tensor lx = rand_tensor(rng, {2, 6}, true);
  Tensor lg = rand_tensor(rng, {6}, true);
  Tensor lb = rand_tensor(rng, {6}, true);
  Tensor lw = rand_tensor(rng, {2, 6});
  check([&] { return sum(mul(layer_norm(lx, lg, lb, 1e-5), lw)); },
        {lx, lg, lb});

  Tensor nz = rand_tensor(rng, {6}, true);
  check([&] { return sum(mul(l2_normalize(nz), v.detached())); }, {nz});

  Tensor pk = rand_tensor(rng, {7}, true);
  check([&] { return pick(pk, 3); }, {pk});
  Tensor rw = rand_tensor(rng, {4, 3}, true);
  Tensor wr = rand_tensor(rng, {3});
  check([&] { return sum(mul(row(rw, 2), wr)); }, {rw});
  Tensor ws = rand_tensor(rng, {2, 3});
  check([&] { return sum(mul(slice_rows(rw, 1, 2), ws)); }, {rw});

  Tensor c1 = rand_tensor(rng, {2, 3}, true);
  Tensor c2 = rand_tensor(rng, {1, 3}, true);
  Tensor wcat = rand_tensor(rng, {3, 3});
  check(
      [&] {
        std::vector<Tensor> parts{c1, c2};
        return sum(mul(concat_rows(parts), wcat));
      },
      {c1, c2});
  Tensor v1 = rand_tensor(rng, {2}, true);
  Tensor v2 = rand_tensor(rng, {3}, true);
  Tensor wv = rand_tensor(rng, {5});
  check(
      [&] {
        std::vector<Tensor> parts{v1, v2};
        return sum(mul(concat_vec(parts), wv));
      },
      {v1, v2});

  Tensor rs = rand_tensor(rng, {6}, true);
  Tensor wrs = rand_tensor(rng, {2, 3});
  check([&] { return sum(mul(reshape(rs, {2, 3}), wrs)); }, {rs});

  // solve_psd: A = Z Z^T + I keeps the system well conditioned
  Tensor z = rand_tensor(rng, {3, 3}, true);
  Tensor rhs = rand_tensor(rng, {3, 2}, true);
  Tensor wsol = rand_tensor(rng, {3, 2});
  check(
      [&] {
        Tensor g = add(matmul(z, transpose(z)),
                       Tensor::from_matrix(RowMat::Identity(3, 3)));
        return sum(mul(solve_psd(g, rhs), wsol));
      },
      {z, rhs});
}

TEST_CASE("diamond graph accumulates gradients") {
  Tensor x = Tensor::scalar(1.5, true);
  GradTape tape;
  {
    TapeScope scope(tape);
    Tensor y = add(x, x);
    tape.backward(y);
  }
  CHECK(x.grad_flat()[0] == 2.0);
}

TEST_CASE("backward accumulates across calls until reset") {
  Tensor x = Tensor::from_vector((ColVec(2) << 1, 1).finished(), true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(mul(x, x));
  }
  tape.backward(loss);
  CHECK(x.grad_flat()[0] == 2.0);
  tape.backward(loss);
  CHECK(x.grad_flat()[0] == 4.0);  // leaves accumulate
  std::vector<Tensor> ps{x};
  zero_grads(ps);
  tape.backward(loss);
  CHECK(x.grad_flat()[0] == 2.0);
}

TEST_CASE("no recording without an active tape") {
  Tensor x = Tensor::scalar(2.0, true);
  GradTape tape;
  Tensor y = mul(x, x);  // outside any scope
  CHECK(tape.size() == 0);
  CHECK(y.at(0) == 4.0);
}

TEST_CASE("frozen operands receive no gradient") {
  Tensor w = Tensor::from_vector((ColVec(2) << 3, 4).finished(), false);
  Tensor x = Tensor::from_vector((ColVec(2) << 1, 2).finished(), true);
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = dot(w, x);
  }
  tape.backward(loss);
  CHECK(w.grad_flat().size() == 0);
  CHECK(x.grad_flat()[0] == 3.0);
  CHECK(x.grad_flat()[1] == 4.0);
}

TEST_CASE("numeric guards") {
  Tensor z = Tensor::zeros({3});
  CHECK_THROWS_AS(l2_normalize(z), NumericError);
  CHECK_THROWS_AS(fairprompt::log(Tensor::zeros({2})), NumericError);
  Tensor singular = Tensor::from_matrix((RowMat(2, 2) << 1, 1, 1, 1).finished());
  CHECK_THROWS_AS(solve_psd(singular, Tensor::zeros({2})), NumericError);
}

TEST_CASE("finite outputs on finite inputs") {
  Rng rng(99);
  Tensor x = rand_tensor(rng, {4, 5}, false, 50.0);
  CHECK(softmax(x, 1).flat().isFinite().all());
  Tensor g = Tensor::full({5}, 1.0);
  Tensor b = Tensor::zeros({5});
  CHECK(layer_norm(x, g, b, 1e-8).flat().isFinite().all());
}
