// Copyright (c) 2026 The fairprompt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include "fairprompt/rng.hpp"
#include "fairprompt/tensor.hpp"

namespace fptest {

inline fairprompt::Tensor rand_tensor(fairprompt::Rng& rng,
                                      fairprompt::Shape shape,
                                      bool requires_grad = false,
                                      double stddev = 1.0) {
  fairprompt::FlatArray data(fairprompt::numel(shape));
  for (Eigen::Index i = 0; i < data.size(); ++i)
    data[i] = rng.normal(0.0, stddev);
  return fairprompt::Tensor::from_flat(std::move(shape), std::move(data),
                                       requires_grad);
}

inline double max_abs_diff(const fairprompt::Tensor& t,
                           const Eigen::MatrixXd& ref) {
  Eigen::MatrixXd m = t.matrix();
  return (m - ref).cwiseAbs().maxCoeff();
}

}  // namespace fptest
