#pragma once

#include <Eigen/Core>

namespace stainforge::model {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;

inline Eigen::Map<RowMat> map(double* p, Eigen::Index rows, Eigen::Index cols) { return {p, rows, cols}; }
inline Eigen::Map<const RowMat> cmap(const double* p, Eigen::Index rows, Eigen::Index cols) {
  return {p, rows, cols};
}
inline Eigen::Map<RowMat, 0, Stride> strided(double* p, Eigen::Index rows, Eigen::Index cols, Eigen::Index stride) {
  return {p, rows, cols, Stride(stride)};
}
inline Eigen::Map<const RowMat, 0, Stride> cstrided(const double* p, Eigen::Index rows, Eigen::Index cols,
                                                    Eigen::Index stride) {
  return {p, rows, cols, Stride(stride)};
}
inline Eigen::Map<Eigen::VectorXd> vec(double* p, Eigen::Index n) { return {p, n}; }
inline Eigen::Map<const Eigen::VectorXd> cvec(const double* p, Eigen::Index n) { return {p, n}; }

}  // namespace stainforge::model
