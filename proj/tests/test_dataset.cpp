#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "deepfv/dataset.hpp"
#include "deepfv/io.hpp"
#include "deepfv/rng.hpp"
#include "oracles.hpp"

using namespace deepfv;

namespace {

std::string temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "deepfv_dataset_test";
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("pca_fit on collinear points recovers the line") {
  Matrix data(3, 2);
  data << 0, 0, 1, 1, 2, 2;
  PcaModel model = pca_fit(data, 1);
  Scalar inv_sqrt2 = 1.0 / std::sqrt(2.0);
  CHECK(model.basis(0, 0) == doctest::Approx(inv_sqrt2).epsilon(1e-9));
  CHECK(model.basis(0, 1) == doctest::Approx(inv_sqrt2).epsilon(1e-9));
  // The spectrum has one nonzero value; the dropped one is 0.
  Matrix cov = Matrix::Zero(2, 2);
  Vector mean = data.colwise().mean();
  for (Index i = 0; i < 3; ++i) {
    Vector diff = data.row(i).transpose() - mean;
    cov += diff * diff.transpose();
  }
  cov /= 2.0;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  CHECK(eig.eigenvalues()(0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("pca full-rank projection reconstructs centered data") {
  Rng rng(7);
  Matrix data = oracles::random_matrix(20, 5, rng);
  PcaModel model = pca_fit(data, 5);
  Matrix proj = pca_project(model, data);
  Matrix rec = proj * model.basis;  // rows orthonormal: inverse = transpose
  Matrix centered = data.rowwise() - model.mean.transpose();
  CHECK((rec - centered).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("pca explained variance matches brute-force covariance eigenvalues") {
  Rng rng(11);
  Matrix data = oracles::random_matrix(50, 8, rng);
  PcaModel model = pca_fit(data, 3);

  Vector mean = data.colwise().mean();
  Matrix cov = Matrix::Zero(8, 8);
  for (Index i = 0; i < data.rows(); ++i) {
    Vector diff = data.row(i).transpose() - mean;
    cov += diff * diff.transpose();
  }
  cov /= static_cast<Scalar>(data.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  for (Index i = 0; i < 3; ++i)
    CHECK(model.explained_variance(i) ==
          doctest::Approx(eig.eigenvalues()(7 - i)).epsilon(1e-6));
  // Nonincreasing and orthonormal basis.
  CHECK(model.explained_variance(0) >= model.explained_variance(1));
  CHECK(model.explained_variance(1) >= model.explained_variance(2));
  Matrix gram = model.basis * model.basis.transpose();
  CHECK((gram - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("pca errors") {
  Rng rng(3);
  Matrix data = oracles::random_matrix(4, 3, rng);
  CHECK_THROWS_AS(pca_fit(data, 4), DimensionError);  // > D
  Matrix tall = oracles::random_matrix(3, 8, rng);
  CHECK_THROWS_AS(pca_fit(tall, 3), DimensionError);  // > N-1
  Matrix constant = Matrix::Ones(5, 3);
  CHECK_THROWS_AS(pca_fit(constant, 1), DataError);  // rank 0
  PcaModel model = pca_fit(data, 2);
  Matrix wrong = oracles::random_matrix(2, 5, rng);
  CHECK_THROWS_AS(pca_project(model, wrong), DimensionError);
}

TEST_CASE("pca_project centering and identity") {
  Rng rng(5);
  Matrix data = oracles::random_matrix(12, 4, rng);
  PcaModel model = pca_fit(data, 2);
  // The model mean projects to zero.
  Matrix mean_row = model.mean.transpose();
  CHECK(pca_project(model, mean_row).cwiseAbs().maxCoeff() < 1e-12);

  PcaModel identity;
  identity.mean = Vector::Zero(4);
  identity.basis = Matrix::Identity(4, 4);
  identity.explained_variance = Vector::Ones(4);
  CHECK((pca_project(identity, data) - data).cwiseAbs().maxCoeff() == 0);

  // Random model/data against direct arithmetic.
  Matrix direct(data.rows(), 2);
  for (Index i = 0; i < data.rows(); ++i)
    direct.row(i) =
        (model.basis * (data.row(i).transpose() - model.mean)).transpose();
  CHECK((pca_project(model, data) - direct).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("pca decorrelates training data") {
  Rng rng(13);
  Matrix base = oracles::random_matrix(200, 6, rng);
  // Correlate columns deliberately.
  Matrix mix = oracles::random_matrix(6, 6, rng, 0.5) + Matrix::Identity(6, 6);
  Matrix data = base * mix;
  PcaModel model = pca_fit(data, 4);
  Matrix proj = pca_project(model, data);
  Vector mean = proj.colwise().mean();
  Matrix cov = Matrix::Zero(4, 4);
  for (Index i = 0; i < proj.rows(); ++i) {
    Vector diff = proj.row(i).transpose() - mean;
    cov += diff * diff.transpose();
  }
  cov /= static_cast<Scalar>(proj.rows() - 1);
  for (Index a = 0; a < 4; ++a)
    for (Index b = 0; b < 4; ++b)
      if (a != b) CHECK(std::abs(cov(a, b)) < 1e-5 * cov.diagonal().maxCoeff());
}

TEST_CASE("projection is linear with zero mean") {
  Rng rng(17);
  Matrix data = oracles::random_matrix(10, 3, rng);
  PcaModel model = pca_fit(data, 2);
  model.mean.setZero();
  Matrix x = oracles::random_matrix(1, 3, rng);
  Matrix y = oracles::random_matrix(1, 3, rng);
  Scalar a = 0.7, b = -1.3;
  Matrix lhs = pca_project(model, a * x + b * y);
  Matrix rhs = a * pca_project(model, x) + b * pca_project(model, y);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("synth_generate determinism and counts") {
  auto a = synth_generate(2, 4, 6, 42);
  auto b = synth_generate(2, 4, 6, 42);
  REQUIRE(a.size() == 8);
  std::vector<int> labels;
  for (const auto& s : a) labels.push_back(s.label);
  CHECK(labels == std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1});
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image_id == b[i].image_id);
    CHECK((a[i].descriptors - b[i].descriptors).cwiseAbs().maxCoeff() == 0);
  }
  // Both cameras appear for each identity.
  CHECK(a[0].camera_id == 0);
  CHECK(a[1].camera_id == 1);
}

TEST_CASE("synth classes separable by nearest class mean on descriptor means") {
  int num_ids = 4, per_id = 6;
  auto sets = synth_generate(num_ids, per_id, 8, 99);
  // Class means from the first half, classify the second half.
  Matrix class_means = Matrix::Zero(num_ids, 8);
  std::vector<int> counts(static_cast<std::size_t>(num_ids), 0);
  std::vector<std::pair<Vector, int>> held_out;
  for (const auto& s : sets) {
    Vector m = s.descriptors.colwise().mean();
    int img = std::stoi(s.image_id.substr(s.image_id.find("_im") + 3));
    if (img < per_id / 2) {
      class_means.row(s.label) += m.transpose();
      counts[static_cast<std::size_t>(s.label)]++;
    } else {
      held_out.emplace_back(m, s.label);
    }
  }
  for (int c = 0; c < num_ids; ++c) class_means.row(c) /= counts[static_cast<std::size_t>(c)];
  int correct = 0;
  for (const auto& [m, label] : held_out) {
    Index best = 0;
    (class_means.rowwise() - m.transpose()).rowwise().norm().minCoeff(&best);
    if (static_cast<int>(best) == label) ++correct;
  }
  // Far above the 25% chance rate.
  CHECK(correct >= static_cast<int>(held_out.size() * 3 / 4));
}

TEST_CASE("manifest round trip") {
  std::string dir = temp_dir();
  Matrix desc = Matrix::Random(5, 3);
  write_descriptor_file(dir + "/img0.dfv", desc);
  write_descriptor_file(dir + "/img1.dfv", desc);

  Manifest m;
  m.base_dir = dir;
  m.entries.push_back({"img0", 0, 0, "img0.dfv", Split::kTrain});
  m.entries.push_back({"img1", 0, 1, "img1.dfv", Split::kTest});
  save_manifest(m, dir + "/manifest.json");

  Manifest loaded = load_manifest(dir + "/manifest.json");
  REQUIRE(loaded.entries.size() == 2);
  CHECK(loaded.entries[0].id == "img0");
  CHECK(loaded.entries[0].label == 0);
  CHECK(loaded.entries[0].camera == 0);
  CHECK(loaded.entries[0].split == Split::kTrain);
  CHECK(loaded.entries[1].split == Split::kTest);
  CHECK(loaded.entries[1].file == "img1.dfv");
}

TEST_CASE("manifest validation errors") {
  std::string dir = temp_dir();
  Matrix desc = Matrix::Random(2, 2);
  write_descriptor_file(dir + "/a.dfv", desc);

  Manifest dup;
  dup.base_dir = dir;
  dup.entries.push_back({"a", 0, 0, "a.dfv", Split::kTrain});
  dup.entries.push_back({"a", 1, 1, "a.dfv", Split::kTrain});
  save_manifest(dup, dir + "/dup.json");
  CHECK_THROWS_AS(load_manifest(dir + "/dup.json"), IoError);

  Manifest missing;
  missing.base_dir = dir;
  missing.entries.push_back({"b", 0, 0, "nonexistent.dfv", Split::kTrain});
  // Write manually: save_manifest succeeds, load must reject.
  save_manifest(missing, dir + "/missing.json");
  CHECK_THROWS_AS(load_manifest(dir + "/missing.json"), IoError);
}
