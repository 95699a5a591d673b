#ifndef DEEPFV_TYPES_HPP_
#define DEEPFV_TYPES_HPP_

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace deepfv {

using Scalar = double;
using Index = Eigen::Index;

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Matrix = MatrixX<Scalar>;
using Vector = VectorX<Scalar>;
using IntVector = VectorX<int>;

// Function-boundary views; accept any contiguous Eigen expression without copy.
using MatrixRef = Eigen::Ref<const Matrix>;
using VectorRef = Eigen::Ref<const Vector>;

// Error taxonomy. The CLI maps these onto exit codes, everything else just
// throws and lets the caller decide.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape / dimension mismatches between inputs and models.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Requested more structure than the data supports (rank-deficient PCA input,
// N < K mixtures, infeasible batch compositions).
class DataError : public Error {
 public:
  using Error::Error;
};

// A numerical operation left its valid regime (indefinite regularized scatter,
// non-finite losses, failed line searches).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Two objects that must describe the same computation do not (trace vs params,
// eigen solution vs mask).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Evaluation-protocol violations (probe identity missing from the gallery).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// File and config problems.
class IoError : public Error {
 public:
  using Error::Error;
};

// Unknown image ids and similar failed lookups.
class LookupError : public Error {
 public:
  using Error::Error;
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.derived().array().isFinite().all();
}

}  // namespace deepfv

#endif  // DEEPFV_TYPES_HPP_
