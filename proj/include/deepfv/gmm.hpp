#ifndef DEEPFV_GMM_HPP_
#define DEEPFV_GMM_HPP_

#include <cstdint>
#include <vector>

#include "deepfv/types.hpp"

namespace deepfv {

// Variances never drop below this floor; it guards the sigma divisions in the
// Fisher vector encoding and its parameter gradients.
inline constexpr Scalar kVarianceFloor = 1e-8;

// Diagonal-covariance Gaussian mixture in the log reparametrization: the
// stored parameters are log unnormalized weights and log variances, so
// gradient steps can never leave the valid region. Normalized weights are
// recovered by softmax on read; they are never projected.
struct GmmModel {
  Matrix means;               // K x D
  Matrix log_vars;            // K x D, log sigma^2
  Vector log_weights_unnorm;  // K

  Index components() const { return means.rows(); }
  Index dim() const { return means.cols(); }

  Vector weights() const;      // softmax(log_weights_unnorm), sums to 1
  Matrix variances() const;    // exp(log_vars)
  Matrix stddevs() const;      // exp(log_vars / 2)

  void clamp_variances();      // enforce the floor on exp(log_vars)
  void validate() const;
};

struct EmDiagnostics {
  int iterations = 0;
  bool converged = false;
  int reseeded_components = 0;
  std::vector<Scalar> log_likelihood;  // per-point average, one per iteration
};

// EM fit, initialized with k-means++ seeding and a few Lloyd iterations.
// Stops when the per-point log-likelihood improves by less than `tol` or at
// `max_iters`. The log-likelihood sequence is nondecreasing unless an empty
// component had to be reseeded (counted in the diagnostics).
GmmModel gmm_fit_em(const MatrixRef& data, Index k, std::uint64_t seed,
                    int max_iters = 100, Scalar tol = 1e-6,
                    EmDiagnostics* diagnostics = nullptr);

// Soft assignment weights gamma_k(x); log-sum-exp stabilized, sums to 1.
Vector posteriors(const GmmModel& model, const VectorRef& x);

// Row i holds posteriors(model, data.row(i)).
Matrix posteriors_batch(const GmmModel& model, const MatrixRef& data);

// Per-point average log-likelihood of the data under the mixture.
Scalar average_log_likelihood(const GmmModel& model, const MatrixRef& data);

}  // namespace deepfv

#endif  // DEEPFV_GMM_HPP_
