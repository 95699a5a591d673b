#ifndef DEEPFV_DATASET_HPP_
#define DEEPFV_DATASET_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "deepfv/types.hpp"

namespace deepfv {

// One image's worth of local descriptors plus its identity metadata.
struct DescriptorSet {
  std::string image_id;
  int camera_id = 0;
  int label = 0;
  Matrix descriptors;  // M x D_raw, one row per local patch descriptor

  void validate() const;
};

// Mean-centered orthonormal projection onto the leading covariance
// eigenvectors. Rows of `basis` are the principal directions.
struct PcaModel {
  Vector mean;                // D_raw
  Matrix basis;               // D_out x D_raw, rows orthonormal
  Vector explained_variance;  // D_out, nonincreasing

  Index in_dim() const { return mean.size(); }
  Index out_dim() const { return basis.rows(); }
};

// Covariance uses divisor N-1; ties in the spectrum keep a stable order and
// every basis row is sign-fixed so its first nonzero component is positive.
PcaModel pca_fit(const MatrixRef& data, Index out_dim);

Matrix pca_project(const PcaModel& model, const MatrixRef& descriptors);

enum class Split { kTrain, kTest };

struct ManifestEntry {
  std::string id;
  int label = 0;
  int camera = 0;
  std::string file;  // descriptor file path, relative to the manifest
  Split split = Split::kTrain;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::string base_dir;  // directory the manifest was loaded from

  std::vector<std::size_t> split_indices(Split s) const;
  std::string resolve(const std::string& file) const;
};

// JSON round trip. Loading checks id uniqueness and that every referenced
// descriptor file exists.
Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& manifest, const std::string& path);

struct SynthOptions {
  Index descriptors_per_image = 48;
  int clusters_per_identity = 3;
  double cluster_spread = 4.0;  // distance scale between identity clusters
  double noise_sigma = 0.6;    // within-cluster descriptor noise
  double camera_warp = 0.15;   // magnitude of the per-camera affine change
};

// Deterministic synthetic descriptor sets: each identity draws from its own
// Gaussian mixture, images alternate between two camera variants that apply
// distinct affine perturbations. Output is ordered by label, then image.
std::vector<DescriptorSet> synth_generate(int num_ids, int per_id, Index d_raw,
                                          std::uint64_t seed,
                                          const SynthOptions& opts = {});

}  // namespace deepfv

#endif  // DEEPFV_DATASET_HPP_
