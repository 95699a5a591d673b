#ifndef DEEPFV_LDA_HPP_
#define DEEPFV_LDA_HPP_

#include <vector>

#include "deepfv/types.hpp"

namespace deepfv {

// Scatter statistics of a labeled batch:
//   S_w = (1/C) sum_c S_c,  S_c = X_c_centered^T X_c_centered / (N_c - 1)
//   S_t = X_centered^T X_centered / (N - 1)
//   S_b = S_t - S_w  (exactly, by construction; not necessarily PSD under
//   these divisors — negative eigenvalues are kept and reported).
struct ScatterSet {
  Matrix s_w;          // d x d
  Matrix s_b;          // d x d
  Matrix s_t;          // d x d
  Matrix class_means;  // C x d
  IntVector counts;    // C, per-class sample counts
  std::vector<int> class_labels;  // label value per class row
};

ScatterSet scatter(const MatrixRef& hidden, const std::vector<int>& labels);

// Eigenpairs of S_b e = v (S_w + lambda I) e, eigenvectors normalized so
// e^T (S_w + lambda I) e = 1.
struct EigenSolution {
  Vector eigenvalues;   // ascending
  Matrix eigenvectors;  // one eigenvector per row
  Scalar lambda_reg = 0;
};

// All d eigenpairs, ascending. Solved by symmetrizing with the Cholesky
// factor of (S_w + lambda I).
EigenSolution generalized_eigen_sym(const MatrixRef& s_b, const MatrixRef& s_w,
                                    Scalar lambda_reg);

// The pairs the objective sees: the largest min(C-1, d) of the spectrum,
// still sorted ascending.
EigenSolution lda_solve(const ScatterSet& scatter_set, Scalar lambda_reg);

struct LdaLoss {
  Scalar loss = 0;                // mean of the active eigenvalues
  std::vector<bool> active_mask;  // v_i < min(v) + epsilon
};

// Mean of the eigenvalues strictly below (min + epsilon). The minimum always
// participates.
LdaLoss lda_loss(const VectorRef& eigenvalues, Scalar epsilon);

// Gradient of the mean active eigenvalue w.r.t. each hidden entry:
//   dv_i/dX = e_i^T (dS_b/dX - v_i dS_w/dX) e_i
// with the eigenvectors held fixed and lambda treated as constant.
Matrix lda_grad_hidden(const MatrixRef& hidden, const std::vector<int>& labels,
                       const EigenSolution& solution,
                       const std::vector<bool>& active_mask);

}  // namespace deepfv

#endif  // DEEPFV_LDA_HPP_
