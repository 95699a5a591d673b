#include <doctest.h>

#include "deepfv/fisher.hpp"
#include "deepfv/gmm.hpp"
#include "deepfv/rng.hpp"
#include "oracles.hpp"

using namespace deepfv;

TEST_CASE("K=1 EM reduces to sample statistics") {
  Rng rng(21);
  Matrix data = oracles::random_matrix(40, 3, rng, 2.0);
  GmmModel model = gmm_fit_em(data, 1, 0);
  CHECK(model.weights()(0) == doctest::Approx(1.0).epsilon(1e-12));
  Vector mean = data.colwise().mean();
  Vector var = (data.rowwise() - mean.transpose()).array().square().colwise().mean();
  CHECK((model.means.row(0).transpose() - mean).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((model.variances().row(0).transpose() - var).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("EM separates two well-separated 1-D clusters") {
  Rng rng(22);
  Matrix data(40, 1);
  for (Index i = 0; i < 20; ++i) data(i, 0) = -10.0 + 0.3 * rng.gaussian();
  for (Index i = 20; i < 40; ++i) data(i, 0) = 10.0 + 0.3 * rng.gaussian();
  GmmModel model = gmm_fit_em(data, 2, 1);

  // Cluster oracle: per-half sample statistics.
  Scalar mean_lo = data.topRows(20).mean();
  Scalar mean_hi = data.bottomRows(20).mean();
  Vector means = model.means.col(0);
  Scalar lo = means.minCoeff(), hi = means.maxCoeff();
  CHECK(std::abs(lo - mean_lo) < 0.5);
  CHECK(std::abs(hi - mean_hi) < 0.5);
  Vector w = model.weights();
  CHECK(std::abs(w(0) - 0.5) < 0.1);
  CHECK(std::abs(w(1) - 0.5) < 0.1);
}

TEST_CASE("EM log-likelihood is nondecreasing on random data") {
  Rng rng(23);
  Matrix data = oracles::random_matrix(60, 4, rng);
  EmDiagnostics diag;
  gmm_fit_em(data, 3, 5, 50, 1e-9, &diag);
  REQUIRE(diag.log_likelihood.size() >= 2);
  CHECK(diag.reseeded_components == 0);
  for (std::size_t i = 1; i < diag.log_likelihood.size(); ++i)
    CHECK(diag.log_likelihood[i] >= diag.log_likelihood[i - 1] - 1e-9);
}

TEST_CASE("EM rejects more components than points") {
  Matrix data = Matrix::Random(3, 2);
  CHECK_THROWS_AS(gmm_fit_em(data, 4, 0), DataError);
}

TEST_CASE("posterior symmetry and trivial cases") {
  GmmModel model;
  model.means.resize(2, 1);
  model.means << -1.0, 1.0;
  model.log_vars = Matrix::Zero(2, 1);
  model.log_weights_unnorm = Vector::Zero(2);
  Vector x(1);
  x << 0.0;  // equidistant
  Vector g = posteriors(model, x);
  CHECK(g(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g(1) == doctest::Approx(0.5).epsilon(1e-12));

  GmmModel single;
  single.means = Matrix::Zero(1, 3);
  single.log_vars = Matrix::Zero(1, 3);
  single.log_weights_unnorm = Vector::Zero(1);
  Vector y(3);
  y << 5, -3, 100;
  CHECK(posteriors(single, y)(0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("posteriors match the extended-precision density oracle") {
  Rng rng(31);
  GmmModel model = oracles::random_gmm(3, 2, rng);
  for (int rep = 0; rep < 10; ++rep) {
    Vector x = oracles::random_matrix(2, 1, rng, 2.0).col(0);
    Vector g = posteriors(model, x);
    auto ref = oracles::posterior_reference(model, x);
    CHECK(g.sum() == doctest::Approx(1.0).epsilon(1e-12));
    for (Index c = 0; c < 3; ++c) {
      CHECK(g(c) >= 0.0);
      CHECK(g(c) <= 1.0);
      CHECK(std::abs(g(c) - static_cast<Scalar>(ref[static_cast<std::size_t>(c)])) <
            1e-10);
    }
  }
}

TEST_CASE("softmax shift invariance of the reparametrized weights") {
  Rng rng(37);
  GmmModel model = oracles::random_gmm(3, 2, rng);
  GmmModel shifted = model;
  shifted.log_weights_unnorm.array() += 17.5;

  CHECK((model.weights() - shifted.weights()).cwiseAbs().maxCoeff() < 1e-12);
  Vector x = oracles::random_matrix(2, 1, rng).col(0);
  CHECK((posteriors(model, x) - posteriors(shifted, x)).cwiseAbs().maxCoeff() <
        1e-10);

  Matrix descriptors = oracles::random_matrix(4, 2, rng);
  Vector fv_a = fv_encode(model, descriptors).values;
  Vector fv_b = fv_encode(shifted, descriptors).values;
  CHECK((fv_a - fv_b).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("posteriors are equivariant under component permutation") {
  Rng rng(41);
  GmmModel model = oracles::random_gmm(3, 2, rng);
  GmmModel permuted;
  std::vector<Index> perm = {2, 0, 1};
  permuted.means.resize(3, 2);
  permuted.log_vars.resize(3, 2);
  permuted.log_weights_unnorm.resize(3);
  for (Index c = 0; c < 3; ++c) {
    permuted.means.row(c) = model.means.row(perm[static_cast<std::size_t>(c)]);
    permuted.log_vars.row(c) = model.log_vars.row(perm[static_cast<std::size_t>(c)]);
    permuted.log_weights_unnorm(c) =
        model.log_weights_unnorm(perm[static_cast<std::size_t>(c)]);
  }
  Vector x = oracles::random_matrix(2, 1, rng).col(0);
  Vector g = posteriors(model, x);
  Vector gp = posteriors(permuted, x);
  for (Index c = 0; c < 3; ++c)
    CHECK(gp(c) == doctest::Approx(g(perm[static_cast<std::size_t>(c)])).epsilon(1e-12));
}

TEST_CASE("variance floor holds after fitting") {
  // Degenerate data: one repeated point per cluster direction.
  Matrix data(6, 2);
  data << 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1;
  GmmModel model = gmm_fit_em(data, 2, 3);
  CHECK((model.variances().array() >= kVarianceFloor * (1 - 1e-12)).all());
  model.validate();
}
