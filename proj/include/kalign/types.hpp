#pragma once

#include <cstddef>
#include <cstdint>

#include <Eigen/Dense>

namespace kalign {

// Row-major so that a sample is a contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowRef = Eigen::Ref<const Eigen::RowVectorXd>;

using Index = std::ptrdiff_t;

}  // namespace kalign
