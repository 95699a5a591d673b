#include "deepfv/lda.hpp"

#include <algorithm>
#include <map>

namespace deepfv {

ScatterSet scatter(const MatrixRef& hidden, const std::vector<int>& labels) {
  const Index n = hidden.rows();
  const Index d = hidden.cols();
  if (static_cast<Index>(labels.size()) != n)
    throw DimensionError("scatter: label count does not match batch");
  if (n < 2) throw DataError("scatter: need at least 2 samples");

  std::map<int, std::vector<Index>> by_class;
  for (Index i = 0; i < n; ++i) by_class[labels[static_cast<std::size_t>(i)]].push_back(i);
  const Index c = static_cast<Index>(by_class.size());
  if (c < 2) throw DataError("scatter: need at least 2 classes in the batch");

  ScatterSet out;
  out.class_means.resize(c, d);
  out.counts.resize(c);
  out.s_w = Matrix::Zero(d, d);

  Index row = 0;
  for (const auto& [label, idx] : by_class) {
    const Index nc = static_cast<Index>(idx.size());
    if (nc < 2)
      throw DataError("scatter: class " + std::to_string(label) +
                      " has a single sample in the batch");
    Matrix block(nc, d);
    for (Index i = 0; i < nc; ++i) block.row(i) = hidden.row(idx[static_cast<std::size_t>(i)]);
    Vector mean = block.colwise().mean();
    block.rowwise() -= mean.transpose();
    out.s_w += block.transpose() * block / static_cast<Scalar>(nc - 1);
    out.class_means.row(row) = mean.transpose();
    out.counts(row) = static_cast<int>(nc);
    out.class_labels.push_back(label);
    ++row;
  }
  out.s_w /= static_cast<Scalar>(c);

  Vector mean = hidden.colwise().mean();
  Matrix centered = hidden.rowwise() - mean.transpose();
  out.s_t = centered.transpose() * centered / static_cast<Scalar>(n - 1);
  out.s_b = out.s_t - out.s_w;
  return out;
}

EigenSolution generalized_eigen_sym(const MatrixRef& s_b, const MatrixRef& s_w,
                                    Scalar lambda_reg) {
  const Index d = s_b.rows();
  if (s_b.cols() != d || s_w.rows() != d || s_w.cols() != d)
    throw DimensionError("generalized_eigen_sym: scatter matrices must be square and equal-sized");

  Matrix reg = s_w + lambda_reg * Matrix::Identity(d, d);
  Eigen::LLT<Matrix> llt(reg);
  if (llt.info() != Eigen::Success)
    throw NumericError(
        "generalized_eigen_sym: S_w + lambda I is not positive definite; "
        "increase the regularization");

  // L L^T = S_w + lambda I; the standard symmetric problem on
  // L^-1 S_b L^-T shares eigenvalues, and e = L^-T u gives
  // e^T (S_w + lambda I) e = u^T u = 1.
  Matrix l = llt.matrixL();
  Matrix m = l.triangularView<Eigen::Lower>().solve(Matrix(s_b));
  m = l.triangularView<Eigen::Lower>().solve(Matrix(m.transpose()));
  m = 0.5 * (m + m.transpose());

  Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
  if (eig.info() != Eigen::Success)
    throw NumericError("generalized_eigen_sym: eigensolver failed");

  EigenSolution out;
  out.lambda_reg = lambda_reg;
  out.eigenvalues = eig.eigenvalues();
  out.eigenvectors.resize(d, d);
  Matrix back = l.transpose().triangularView<Eigen::Upper>().solve(
      Matrix(eig.eigenvectors()));
  out.eigenvectors = back.transpose();

  // Residual contract, enforced on every solve.
  for (Index i = 0; i < d; ++i) {
    Vector e = out.eigenvectors.row(i).transpose();
    Scalar v = out.eigenvalues(i);
    Scalar residual = (s_b * e - v * (reg * e)).norm();
    if (!(residual <= 1e-6 * (1 + std::abs(v)) * e.norm()))
      throw NumericError("generalized_eigen_sym: residual " +
                         std::to_string(residual) + " breaks the invariant for v=" +
                         std::to_string(v));
  }
  return out;
}

EigenSolution lda_solve(const ScatterSet& scatter_set, Scalar lambda_reg) {
  EigenSolution all =
      generalized_eigen_sym(scatter_set.s_b, scatter_set.s_w, lambda_reg);
  const Index d = all.eigenvalues.size();
  const Index c = scatter_set.class_means.rows();
  const Index keep = std::min<Index>(c - 1, d);
  EigenSolution out;
  out.lambda_reg = lambda_reg;
  out.eigenvalues = all.eigenvalues.tail(keep);
  out.eigenvectors = all.eigenvectors.bottomRows(keep);
  return out;
}

LdaLoss lda_loss(const VectorRef& eigenvalues, Scalar epsilon) {
  const Index n = eigenvalues.size();
  if (n == 0) throw DataError("lda_loss: empty eigenvalue vector");
  Scalar min_v = eigenvalues.minCoeff();
  LdaLoss out;
  out.active_mask.assign(static_cast<std::size_t>(n), false);
  Scalar sum = 0;
  Index count = 0;
  for (Index i = 0; i < n; ++i) {
    if (eigenvalues(i) < min_v + epsilon || eigenvalues(i) == min_v) {
      out.active_mask[static_cast<std::size_t>(i)] = true;
      sum += eigenvalues(i);
      ++count;
    }
  }
  out.loss = sum / static_cast<Scalar>(count);
  return out;
}

Matrix lda_grad_hidden(const MatrixRef& hidden, const std::vector<int>& labels,
                       const EigenSolution& solution,
                       const std::vector<bool>& active_mask) {
  const Index n = hidden.rows();
  const Index d = hidden.cols();
  if (static_cast<Index>(labels.size()) != n)
    throw DimensionError("lda_grad_hidden: label count does not match batch");
  if (solution.eigenvectors.cols() != d)
    throw ConsistencyError("lda_grad_hidden: solution dim does not match hidden");
  if (active_mask.size() != static_cast<std::size_t>(solution.eigenvalues.size()))
    throw ConsistencyError("lda_grad_hidden: mask does not match solution");

  std::map<int, std::vector<Index>> by_class;
  for (Index i = 0; i < n; ++i) by_class[labels[static_cast<std::size_t>(i)]].push_back(i);
  const Index c = static_cast<Index>(by_class.size());

  Vector global_mean = hidden.colwise().mean();
  Matrix centered = hidden.rowwise() - global_mean.transpose();

  Index active_count = 0;
  for (bool a : active_mask) active_count += a ? 1 : 0;
  if (active_count == 0)
    throw ConsistencyError("lda_grad_hidden: empty active set");

  Matrix grad = Matrix::Zero(n, d);
  for (Index i = 0; i < solution.eigenvalues.size(); ++i) {
    if (!active_mask[static_cast<std::size_t>(i)]) continue;
    Vector e = solution.eigenvectors.row(i).transpose();
    Scalar v = solution.eigenvalues(i);

    // e^T S_t e differentiates to (2/(N-1)) (X_centered e) e^T; the class
    // blocks of e^T S_w e differentiate the same way with their own centering
    // and divisor. S_b = S_t - S_w, so S_w picks up the factor (1 + v).
    Vector proj_t = centered * e;  // N
    grad += (2.0 / static_cast<Scalar>(n - 1)) * proj_t * e.transpose();

    for (const auto& [label, idx] : by_class) {
      const Index nc = static_cast<Index>(idx.size());
      Matrix block(nc, d);
      for (Index r = 0; r < nc; ++r) block.row(r) = hidden.row(idx[static_cast<std::size_t>(r)]);
      Vector class_mean = block.colwise().mean();
      block.rowwise() -= class_mean.transpose();
      Vector proj_c = block * e;  // nc
      Scalar coef = -(1.0 + v) * 2.0 /
                    (static_cast<Scalar>(c) * static_cast<Scalar>(nc - 1));
      for (Index r = 0; r < nc; ++r)
        grad.row(idx[static_cast<std::size_t>(r)]) += coef * proj_c(r) * e.transpose();
    }
  }
  return grad / static_cast<Scalar>(active_count);
}

}  // namespace deepfv
