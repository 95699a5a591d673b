#ifndef DEEPFV_FISHER_HPP_
#define DEEPFV_FISHER_HPP_

#include <cstdint>
#include <vector>

#include "deepfv/gmm.hpp"
#include "deepfv/types.hpp"

namespace deepfv {

// Image encoding: 2*K*D values laid out as [phi_1..phi_K, psi_1..psi_K],
// each block of length D. phi holds the first-order statistics, psi the
// second-order ones. `normalized` tracks whether the signed-square-root /
// norm division step has been applied.
struct FisherVector {
  Vector values;
  bool normalized = false;
};

// Gradient of a scalar function of the normalized Fisher vector with respect
// to the reparametrized GMM parameters (log unnormalized weights, means,
// log variances).
struct FvGmmGradient {
  Vector d_log_weights;  // K
  Matrix d_means;        // K x D
  Matrix d_log_vars;     // K x D
};

// Average-pooled encoding of a descriptor set: (1/M) sum_i Phi(x_i), where
// per descriptor
//   phi_k = gamma_k / sqrt(pi_k)   * (x - mu_k) / sigma_k
//   psi_k = gamma_k / sqrt(2 pi_k) * ((x - mu_k)^2 / sigma_k^2 - 1).
FisherVector fv_encode(const GmmModel& model, const MatrixRef& descriptors);

// Signed square root, then division by the square root of the L1 norm. The
// result has unit L2 norm unless the input is identically zero, in which case
// the zero vector is returned and *zero_input (when given) is set.
FisherVector fv_normalize(const FisherVector& fv, bool* zero_input = nullptr);

// Per-channel encode + normalize, concatenated in channel order.
FisherVector fv_encode_image(const std::vector<GmmModel>& models,
                             const std::vector<Matrix>& channels);

// Pullback of `upstream` (a gradient w.r.t. the normalized, aggregated Fisher
// vector) onto the GMM parameters, composed through the normalization chain
// rule. Descriptor terms whose posterior gamma_k' does not exceed
// `gamma_threshold` contribute zero; with subsample_fraction < 1 a seeded
// uniform subsample of the descriptors estimates the result.
FvGmmGradient fv_grad_gmm(const GmmModel& model, const MatrixRef& descriptors,
                          const VectorRef& upstream, Scalar gamma_threshold,
                          Scalar subsample_fraction, std::uint64_t seed);

}  // namespace deepfv

#endif  // DEEPFV_FISHER_HPP_
