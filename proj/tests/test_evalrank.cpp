#include <doctest.h>

#include "deepfv/evalrank.hpp"
#include "deepfv/rng.hpp"
#include "oracles.hpp"

using namespace deepfv;

TEST_CASE("cmc: true match second-nearest of three") {
  Matrix probe(1, 2);
  probe << 0, 0;
  Matrix gallery(3, 2);
  gallery << 1, 0, 2, 0, 5, 0;  // nearest is an imposter
  std::vector<int> probe_labels = {7};
  std::vector<int> gallery_labels = {1, 7, 2};
  RankingResult r = cmc_evaluate(probe, probe_labels, gallery, gallery_labels, 1, 0);
  REQUIRE(r.cmc.size() == 3);
  CHECK(r.cmc(0) == doctest::Approx(0.0));
  CHECK(r.cmc(1) == doctest::Approx(1.0));
  CHECK(r.cmc(2) == doctest::Approx(1.0));
}

TEST_CASE("cmc: self gallery gives rank-1 = 1") {
  Rng rng(81);
  Matrix emb = oracles::random_matrix(6, 3, rng);
  std::vector<int> labels = {0, 1, 2, 3, 4, 5};
  RankingResult r = cmc_evaluate(emb, labels, emb, labels, 3, 9);
  CHECK(r.cmc(0) == doctest::Approx(1.0));
  // Monotone and bounded.
  for (Index i = 1; i < r.cmc.size(); ++i) {
    CHECK(r.cmc(i) >= r.cmc(i - 1));
    CHECK(r.cmc(i) <= 1.0);
  }
}

TEST_CASE("cmc matches the exhaustive oracle with one exemplar per id") {
  Rng rng(82);
  for (int rep = 0; rep < 10; ++rep) {
    // Gallery already single-shot: any trial samples the same exemplars.
    Index ids = 5;
    Matrix gallery = oracles::random_matrix(ids, 3, rng);
    std::vector<int> gallery_labels = {0, 1, 2, 3, 4};
    Matrix probes = oracles::random_matrix(8, 3, rng);
    std::vector<int> probe_labels;
    for (Index i = 0; i < 8; ++i)
      probe_labels.push_back(static_cast<int>(rng.uniform_int(ids)));
    RankingResult r =
        cmc_evaluate(probes, probe_labels, gallery, gallery_labels, 4, rep);
    Vector ref = oracles::cmc_reference(probes, probe_labels, gallery, gallery_labels);
    CHECK((r.cmc - ref).cwiseAbs().maxCoeff() == 0);
  }
}

TEST_CASE("cmc protocol error on missing probe identity") {
  Matrix probe = Matrix::Random(1, 2);
  Matrix gallery = Matrix::Random(2, 2);
  CHECK_THROWS_AS(
      cmc_evaluate(probe, {9}, gallery, {0, 1}, 1, 0), ProtocolError);
}

TEST_CASE("map: hand-computed average precision") {
  // Probe with 2 relevant at ranks 1 and 3 of 4: AP = (1/1 + 2/3)/2 = 5/6.
  Matrix probe(1, 1);
  probe << 0;
  Matrix gallery(4, 1);
  gallery << 1, 2, 3, 4;
  std::vector<int> gallery_labels = {5, 1, 5, 2};
  Scalar map = map_evaluate(probe, {5}, gallery, gallery_labels);
  CHECK(map == doctest::Approx(5.0 / 6.0).epsilon(1e-12));

  Matrix one(1, 1);
  one << 1.0;
  Matrix g1(2, 1);
  g1 << 1.2, 9.0;
  CHECK(map_evaluate(one, {3}, g1, {3, 4}) == doctest::Approx(1.0));
}

TEST_CASE("map matches the exhaustive oracle") {
  Rng rng(83);
  for (int rep = 0; rep < 10; ++rep) {
    Matrix gallery = oracles::random_matrix(9, 3, rng);
    std::vector<int> gallery_labels;
    for (Index i = 0; i < 9; ++i)
      gallery_labels.push_back(static_cast<int>(rng.uniform_int(4)));
    Matrix probes = oracles::random_matrix(5, 3, rng);
    std::vector<int> probe_labels;
    for (Index i = 0; i < 5; ++i)
      probe_labels.push_back(
          gallery_labels[rng.uniform_int(gallery_labels.size())]);
    Scalar map = map_evaluate(probes, probe_labels, gallery, gallery_labels);
    Scalar ref = oracles::map_reference(probes, probe_labels, gallery, gallery_labels);
    CHECK(std::abs(map - ref) < 1e-12);
  }
}

TEST_CASE("map excludes probes without relevant items") {
  Matrix probes = Matrix::Random(2, 2);
  Matrix gallery = Matrix::Random(2, 2);
  int excluded = 0;
  Scalar map = map_evaluate(probes, {0, 9}, gallery, {0, 0}, &excluded);
  CHECK(excluded == 1);
  CHECK(map >= 0.0);
  CHECK(map <= 1.0);
}

TEST_CASE("gallery permutation changes nothing with distinct distances") {
  Rng rng(84);
  Matrix gallery = oracles::random_matrix(6, 3, rng);
  std::vector<int> gallery_labels = {0, 1, 2, 3, 4, 5};
  Matrix probes = oracles::random_matrix(4, 3, rng);
  std::vector<int> probe_labels = {2, 0, 5, 3};
  RankingResult a = cmc_evaluate(probes, probe_labels, gallery, gallery_labels, 2, 5);

  std::vector<Index> perm = {3, 0, 5, 1, 4, 2};
  Matrix gp(6, 3);
  std::vector<int> lp(6);
  for (Index i = 0; i < 6; ++i) {
    gp.row(i) = gallery.row(perm[static_cast<std::size_t>(i)]);
    lp[static_cast<std::size_t>(i)] =
        gallery_labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  RankingResult b = cmc_evaluate(probes, probe_labels, gp, lp, 2, 5);
  CHECK((a.cmc - b.cmc).cwiseAbs().maxCoeff() == 0);
  CHECK(a.map_value == doctest::Approx(b.map_value).epsilon(1e-12));
}

TEST_CASE("cosine and euclidean orderings agree on unit-norm embeddings") {
  Rng rng(86);
  // On the unit sphere ||a-b||^2 = 2 - 2 a.b, so rankings must be identical.
  auto normalize_rows = [](Matrix m) {
    for (Index i = 0; i < m.rows(); ++i) m.row(i) /= m.row(i).norm();
    return m;
  };
  Matrix gallery = normalize_rows(oracles::random_matrix(7, 4, rng));
  std::vector<int> gallery_labels = {0, 1, 2, 3, 4, 5, 6};
  Matrix probes = normalize_rows(oracles::random_matrix(5, 4, rng));
  std::vector<int> probe_labels = {1, 3, 0, 6, 2};
  RankingResult e = cmc_evaluate(probes, probe_labels, gallery, gallery_labels, 2,
                                 3, DistanceKind::kEuclidean);
  RankingResult c = cmc_evaluate(probes, probe_labels, gallery, gallery_labels, 2,
                                 3, DistanceKind::kCosine);
  CHECK(e.rankings == c.rankings);
  CHECK((e.cmc - c.cmc).cwiseAbs().maxCoeff() == 0);
  CHECK(e.map_value == doctest::Approx(c.map_value).epsilon(1e-12));
}

TEST_CASE("single-relevant single-shot: mAP vs CMC(1)") {
  Rng rng(85);
  // One exemplar per id and exactly one relevant item per probe: each AP is
  // 1/rank, so mAP >= CMC(1), with equality exactly when every match sits at
  // rank 1.
  Matrix gallery = oracles::random_matrix(5, 3, rng);
  std::vector<int> gallery_labels = {0, 1, 2, 3, 4};
  Matrix probes = oracles::random_matrix(5, 3, rng);
  std::vector<int> probe_labels = {0, 1, 2, 3, 4};
  RankingResult r = cmc_evaluate(probes, probe_labels, gallery, gallery_labels, 1, 0);
  CHECK(r.map_value >= r.cmc(0) - 1e-12);

  // Perturbed copies of the gallery as probes: every match lands at rank 1.
  Matrix close = gallery + 1e-4 * oracles::random_matrix(5, 3, rng);
  RankingResult perfect =
      cmc_evaluate(close, gallery_labels, gallery, gallery_labels, 1, 0);
  CHECK(perfect.cmc(0) == doctest::Approx(1.0));
  CHECK(perfect.map_value == doctest::Approx(perfect.cmc(0)).epsilon(1e-12));
}
