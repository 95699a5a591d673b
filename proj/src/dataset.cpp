#include "deepfv/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "deepfv/io.hpp"
#include "deepfv/rng.hpp"

namespace deepfv {

void DescriptorSet::validate() const {
  if (descriptors.rows() < 1)
    throw DataError("descriptor set " + image_id + " has no rows");
  if (label < 0) throw DataError("descriptor set " + image_id + " has negative label");
  if (!all_finite(descriptors))
    throw DataError("descriptor set " + image_id + " contains NaN/Inf");
}

PcaModel pca_fit(const MatrixRef& data, Index out_dim) {
  const Index n = data.rows();
  const Index d = data.cols();
  if (n < 2) throw DataError("pca_fit needs at least 2 rows");
  if (out_dim < 1 || out_dim > std::min<Index>(n - 1, d))
    throw DimensionError("pca_fit: out_dim " + std::to_string(out_dim) +
                         " exceeds min(N-1, D) = " +
                         std::to_string(std::min<Index>(n - 1, d)));

  Vector mean = data.colwise().mean();
  Matrix centered = data.rowwise() - mean.transpose();
  Matrix cov = centered.transpose() * centered / static_cast<Scalar>(n - 1);

  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success)
    throw NumericError("pca_fit: eigendecomposition failed");

  // Eigen returns the spectrum ascending; walk it from the back.
  const Vector& evals = eig.eigenvalues();
  Scalar max_eval = std::max<Scalar>(evals(d - 1), Scalar(0));
  Scalar rank_tol = max_eval * 1e-12;
  Index rank = 0;
  for (Index i = 0; i < d; ++i)
    if (evals(i) > rank_tol) ++rank;
  if (out_dim > rank)
    throw DataError("pca_fit: data rank " + std::to_string(rank) +
                    " is below requested out_dim " + std::to_string(out_dim));

  PcaModel model;
  model.mean = mean;
  model.basis.resize(out_dim, d);
  model.explained_variance.resize(out_dim);
  for (Index i = 0; i < out_dim; ++i) {
    Index src = d - 1 - i;
    Vector v = eig.eigenvectors().col(src);
    // Sign convention: first nonzero component positive.
    for (Index j = 0; j < d; ++j) {
      if (std::abs(v(j)) > 1e-12) {
        if (v(j) < 0) v = -v;
        break;
      }
    }
    model.basis.row(i) = v.transpose();
    model.explained_variance(i) = std::max<Scalar>(evals(src), Scalar(0));
  }
  return model;
}

Matrix pca_project(const PcaModel& model, const MatrixRef& descriptors) {
  if (descriptors.cols() != model.in_dim())
    throw DimensionError("pca_project: descriptor dim " +
                         std::to_string(descriptors.cols()) +
                         " does not match model dim " +
                         std::to_string(model.in_dim()));
  return (descriptors.rowwise() - model.mean.transpose()) *
         model.basis.transpose();
}

std::vector<std::size_t> Manifest::split_indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s) out.push_back(i);
  return out;
}

std::string Manifest::resolve(const std::string& file) const {
  std::filesystem::path p(file);
  if (p.is_absolute() || base_dir.empty()) return file;
  return (std::filesystem::path(base_dir) / p).string();
}

Manifest load_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest " + path + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("entries") || !j["entries"].is_array())
    throw IoError("manifest " + path + ": expected top-level {\"entries\":[...]}");

  Manifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  std::unordered_set<std::string> seen;
  for (const auto& e : j["entries"]) {
    ManifestEntry entry;
    try {
      entry.id = e.at("id").get<std::string>();
      entry.label = e.at("label").get<int>();
      entry.camera = e.at("camera").get<int>();
      entry.file = e.at("file").get<std::string>();
      std::string split = e.at("split").get<std::string>();
      if (split == "train")
        entry.split = Split::kTrain;
      else if (split == "test")
        entry.split = Split::kTest;
      else
        throw IoError("manifest entry " + entry.id + ": bad split \"" + split + "\"");
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("manifest " + path + ": malformed entry: " + ex.what());
    }
    if (!seen.insert(entry.id).second)
      throw IoError("manifest " + path + ": duplicate image id " + entry.id);
    if (!std::filesystem::exists(m.resolve(entry.file)))
      throw IoError("manifest " + path + ": missing descriptor file " +
                    m.resolve(entry.file));
    m.entries.push_back(std::move(entry));
  }
  return m;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"id", e.id},
                       {"label", e.label},
                       {"camera", e.camera},
                       {"file", e.file},
                       {"split", e.split == Split::kTrain ? "train" : "test"}});
  }
  nlohmann::json j{{"entries", entries}};
  write_text_file(path, j.dump(2) + "\n");
}

std::vector<DescriptorSet> synth_generate(int num_ids, int per_id, Index d_raw,
                                          std::uint64_t seed,
                                          const SynthOptions& opts) {
  if (num_ids < 2) throw DataError("synth_generate: num_ids must be >= 2");
  if (per_id < 2) throw DataError("synth_generate: per_id must be >= 2");
  if (d_raw < 1) throw DimensionError("synth_generate: d_raw must be >= 1");

  // Two fixed camera warps, one per view; near-identity affine maps.
  Rng cam_rng(seed_stream(seed, 0xCA3E));
  std::vector<Matrix> cam_linear(2, Matrix::Identity(d_raw, d_raw));
  std::vector<Vector> cam_offset(2, Vector::Zero(d_raw));
  for (int cam = 0; cam < 2; ++cam) {
    for (Index i = 0; i < d_raw; ++i) {
      cam_offset[cam](i) = opts.camera_warp * cam_rng.gaussian();
      for (Index j = 0; j < d_raw; ++j)
        cam_linear[cam](i, j) +=
            opts.camera_warp / std::sqrt(static_cast<double>(d_raw)) *
            cam_rng.gaussian();
    }
  }

  std::vector<DescriptorSet> out;
  out.reserve(static_cast<std::size_t>(num_ids) * per_id);
  for (int id = 0; id < num_ids; ++id) {
    Rng id_rng(seed_stream(seed, 1, static_cast<std::uint64_t>(id)));
    Matrix clusters(opts.clusters_per_identity, d_raw);
    for (Index c = 0; c < clusters.rows(); ++c)
      for (Index j = 0; j < d_raw; ++j)
        clusters(c, j) = opts.cluster_spread * id_rng.gaussian();

    for (int img = 0; img < per_id; ++img) {
      Rng img_rng(seed_stream(seed, 2, static_cast<std::uint64_t>(id),
                              static_cast<std::uint64_t>(img)));
      int cam = img % 2;
      DescriptorSet set;
      set.image_id = "id" + std::to_string(id) + "_im" + std::to_string(img);
      set.camera_id = cam;
      set.label = id;
      set.descriptors.resize(opts.descriptors_per_image, d_raw);
      for (Index m = 0; m < opts.descriptors_per_image; ++m) {
        Index c = static_cast<Index>(
            img_rng.uniform_int(static_cast<std::uint64_t>(clusters.rows())));
        Vector x = clusters.row(c).transpose();
        for (Index j = 0; j < d_raw; ++j) x(j) += opts.noise_sigma * img_rng.gaussian();
        set.descriptors.row(m) =
            (cam_linear[cam] * x + cam_offset[cam]).transpose();
      }
      out.push_back(std::move(set));
    }
  }
  return out;
}

}  // namespace deepfv
