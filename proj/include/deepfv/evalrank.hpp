#ifndef DEEPFV_EVALRANK_HPP_
#define DEEPFV_EVALRANK_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "deepfv/trainer.hpp"
#include "deepfv/types.hpp"

namespace deepfv {

// Single-shot retrieval summary. `rankings` holds every probe's full-gallery
// order (all exemplars, the list mAP is computed on); `cmc` is averaged over
// the sampled single-shot trials.
struct RankingResult {
  std::vector<std::vector<Index>> rankings;  // per probe, gallery indices
  std::vector<std::vector<Scalar>> distances;
  Vector cmc;  // index r = match rate within the top r+1 ranks
  Scalar map_value = 0;
  int num_trials = 0;
  int probes_without_match = 0;  // excluded from the mAP mean
};

// Distance used throughout: Euclidean between rows (callers pass
// L2-normalized embeddings for the cosine-equivalent behavior).
enum class DistanceKind { kEuclidean, kCosine };

// Averaged single-shot CMC over `trials` seeded gallery samplings (one
// exemplar per identity per trial). Ties in distance resolve by gallery index
// order. Every probe identity must be present in the gallery.
RankingResult cmc_evaluate(const MatrixRef& probe_embeddings,
                           const std::vector<int>& probe_labels,
                           const MatrixRef& gallery_embeddings,
                           const std::vector<int>& gallery_labels, int trials,
                           std::uint64_t seed,
                           DistanceKind distance = DistanceKind::kEuclidean);

// Mean over probes of the average precision of the full ranked gallery list.
// Probes with no relevant gallery item are excluded (and counted when
// `excluded` is passed).
Scalar map_evaluate(const MatrixRef& probe_embeddings,
                    const std::vector<int>& probe_labels,
                    const MatrixRef& gallery_embeddings,
                    const std::vector<int>& gallery_labels,
                    int* excluded = nullptr,
                    DistanceKind distance = DistanceKind::kEuclidean);

// Eval-mode embedding of image records under a trained state: project each
// channel, encode the concatenated normalized Fisher vector, run the net in
// eval mode, and L2-normalize the rows.
Matrix embed_records(const TrainState& state,
                     const std::vector<ImageRecord>& records);

Scalar cmc_at(const RankingResult& result, int rank);  // rank is 1-based

std::string cmc_to_csv(const RankingResult& result);
std::string ranking_report_json(const RankingResult& result);

}  // namespace deepfv

#endif  // DEEPFV_EVALRANK_HPP_
