#include "deepfv/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "deepfv/rng.hpp"

namespace deepfv {

namespace {

constexpr Scalar kLog2Pi = 1.8378770664093454836;  // log(2*pi)

// Rows: log p(x_i | component k) + log pi_k, for all i, k.
Matrix weighted_log_densities(const GmmModel& model, const MatrixRef& data) {
  const Index k = model.components();
  Vector log_pi = model.log_weights_unnorm;
  Scalar lse = std::log(log_pi.array().exp().sum());
  log_pi.array() -= lse;

  Matrix vars = model.variances();
  // log N_k(x) = -0.5 * sum_d [log 2pi + log var + (x-mu)^2 / var]
  Vector log_norm(k);  // -0.5 * sum_d (log 2pi + log var)
  for (Index c = 0; c < k; ++c)
    log_norm(c) = -0.5 * (kLog2Pi * static_cast<Scalar>(model.dim()) +
                          model.log_vars.row(c).sum());

  Matrix out(data.rows(), k);
  for (Index c = 0; c < k; ++c) {
    auto diff = data.rowwise() - model.means.row(c);
    out.col(c) =
        (diff.array().square().rowwise() / vars.row(c).array()).rowwise().sum();
    out.col(c) = (-0.5 * out.col(c).array() + log_norm(c) + log_pi(c)).matrix();
  }
  return out;
}

Vector logsumexp_rows(const MatrixRef& m) {
  Vector maxes = m.rowwise().maxCoeff();
  return maxes.array() +
         ((m.colwise() - maxes).array().exp().rowwise().sum()).log();
}

// k-means++ seeding followed by a few Lloyd iterations.
Matrix kmeans_init(const MatrixRef& data, Index k, Rng& rng, int lloyd_iters) {
  const Index n = data.rows();
  Matrix centers(k, data.cols());
  centers.row(0) = data.row(static_cast<Index>(rng.uniform_int(n)));
  Vector dist2 = (data.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (Index c = 1; c < k; ++c) {
    Scalar total = dist2.sum();
    Index pick = 0;
    if (total > 0) {
      Scalar r = rng.uniform() * total;
      Scalar acc = 0;
      for (Index i = 0; i < n; ++i) {
        acc += dist2(i);
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Index>(rng.uniform_int(n));
    }
    centers.row(c) = data.row(pick);
    dist2 = dist2.cwiseMin(
        (data.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  std::vector<Index> assign(n, 0);
  for (int it = 0; it < lloyd_iters; ++it) {
    for (Index i = 0; i < n; ++i) {
      Scalar best = std::numeric_limits<Scalar>::max();
      for (Index c = 0; c < k; ++c) {
        Scalar d = (data.row(i) - centers.row(c)).squaredNorm();
        if (d < best) {
          best = d;
          assign[static_cast<std::size_t>(i)] = c;
        }
      }
    }
    Matrix sums = Matrix::Zero(k, data.cols());
    Vector counts = Vector::Zero(k);
    for (Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += data.row(i);
      counts(assign[static_cast<std::size_t>(i)]) += 1;
    }
    for (Index c = 0; c < k; ++c)
      if (counts(c) > 0) centers.row(c) = sums.row(c) / counts(c);
  }
  return centers;
}

}  // namespace

Vector GmmModel::weights() const {
  Vector w = log_weights_unnorm;
  w.array() -= w.maxCoeff();
  w = w.array().exp();
  return w / w.sum();
}

Matrix GmmModel::variances() const { return log_vars.array().exp(); }

Matrix GmmModel::stddevs() const { return (log_vars.array() / 2).exp(); }

void GmmModel::clamp_variances() {
  log_vars = log_vars.cwiseMax(std::log(kVarianceFloor));
}

void GmmModel::validate() const {
  if (means.rows() != log_vars.rows() || means.cols() != log_vars.cols() ||
      log_weights_unnorm.size() != means.rows())
    throw ConsistencyError("GmmModel: mismatched parameter shapes");
  if (!all_finite(means) || !all_finite(log_vars) ||
      !all_finite(log_weights_unnorm))
    throw NumericError("GmmModel: non-finite parameters");
  if ((variances().array() < kVarianceFloor * (1 - 1e-12)).any())
    throw NumericError("GmmModel: variance below floor");
}

GmmModel gmm_fit_em(const MatrixRef& data, Index k, std::uint64_t seed,
                    int max_iters, Scalar tol, EmDiagnostics* diagnostics) {
  const Index n = data.rows();
  const Index d = data.cols();
  if (k < 1) throw DataError("gmm_fit_em: K must be >= 1");
  if (n < k)
    throw DataError("gmm_fit_em: " + std::to_string(n) +
                    " points cannot support K=" + std::to_string(k));

  Rng rng(seed_stream(seed, 0x6A3A));

  GmmModel model;
  model.means = kmeans_init(data, k, rng, 10);
  model.log_vars.resize(k, d);
  model.log_weights_unnorm = Vector::Constant(k, -std::log(static_cast<Scalar>(k)));

  // Start every component at the global per-dimension variance.
  Vector mean = data.colwise().mean();
  Vector var = (data.rowwise() - mean.transpose())
                   .array()
                   .square()
                   .colwise()
                   .mean()
                   .max(kVarianceFloor);
  for (Index c = 0; c < k; ++c) model.log_vars.row(c) = var.array().log();

  EmDiagnostics diag;
  Scalar prev_ll = -std::numeric_limits<Scalar>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    Matrix wld = weighted_log_densities(model, data);
    Vector row_lse = logsumexp_rows(wld);
    Scalar ll = row_lse.mean();
    diag.log_likelihood.push_back(ll);
    diag.iterations = iter + 1;

    Matrix resp = (wld.colwise() - row_lse).array().exp();

    // M-step.
    Vector nk = resp.colwise().sum();
    for (Index c = 0; c < k; ++c) {
      if (nk(c) < 1e-10 * static_cast<Scalar>(n)) {
        // Numerically empty component: restart it on a random data point.
        model.means.row(c) = data.row(static_cast<Index>(rng.uniform_int(n)));
        model.log_vars.row(c).setConstant(std::log(kVarianceFloor));
        model.log_weights_unnorm(c) = std::log(Scalar(1) / static_cast<Scalar>(n));
        ++diag.reseeded_components;
        continue;
      }
      Vector mu = (resp.col(c).transpose() * data).transpose() / nk(c);
      Vector ex2 =
          (resp.col(c).transpose() * data.cwiseProduct(data)).transpose() / nk(c);
      Vector sigma2 = (ex2 - mu.cwiseProduct(mu)).cwiseMax(kVarianceFloor);
      model.means.row(c) = mu.transpose();
      model.log_vars.row(c) = sigma2.array().log();
      model.log_weights_unnorm(c) = std::log(nk(c) / static_cast<Scalar>(n));
    }

    if (iter > 0 && ll - prev_ll < tol) {
      diag.converged = true;
      break;
    }
    prev_ll = ll;
  }

  // Keep the stored logs normalized (softmax on read makes this cosmetic).
  Scalar lse = std::log(model.log_weights_unnorm.array().exp().sum());
  model.log_weights_unnorm.array() -= lse;
  model.clamp_variances();
  if (diagnostics) *diagnostics = diag;
  return model;
}

Vector posteriors(const GmmModel& model, const VectorRef& x) {
  if (x.size() != model.dim())
    throw DimensionError("posteriors: input dim does not match model");
  Matrix wld = weighted_log_densities(model, x.transpose());
  Vector row = wld.row(0);
  Scalar lse = logsumexp_rows(wld)(0);
  return (row.array() - lse).exp();
}

Matrix posteriors_batch(const GmmModel& model, const MatrixRef& data) {
  if (data.cols() != model.dim())
    throw DimensionError("posteriors_batch: input dim does not match model");
  Matrix wld = weighted_log_densities(model, data);
  Vector lse = logsumexp_rows(wld);
  return (wld.colwise() - lse).array().exp();
}

Scalar average_log_likelihood(const GmmModel& model, const MatrixRef& data) {
  return logsumexp_rows(weighted_log_densities(model, data)).mean();
}

}  // namespace deepfv
