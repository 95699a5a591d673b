#include "deepfv/evalrank.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "deepfv/fisher.hpp"
#include "deepfv/net.hpp"
#include "deepfv/rng.hpp"

namespace deepfv {

namespace {

Scalar row_distance(const MatrixRef& a, Index i, const MatrixRef& b, Index j,
                    DistanceKind kind) {
  if (kind == DistanceKind::kCosine) return 1.0 - a.row(i).dot(b.row(j));
  return (a.row(i) - b.row(j)).norm();
}

// Indices of `gallery` sorted by distance to probe row `p`; ties keep gallery
// index order.
std::vector<Index> ranked_gallery(const MatrixRef& probes, Index p,
                                  const MatrixRef& gallery,
                                  const std::vector<Index>& subset,
                                  DistanceKind kind,
                                  std::vector<Scalar>* dists_out = nullptr) {
  std::vector<std::pair<Scalar, Index>> order;
  order.reserve(subset.size());
  for (Index g : subset)
    order.emplace_back(row_distance(probes, p, gallery, g, kind), g);
  std::stable_sort(order.begin(), order.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first < y.first;
    return x.second < y.second;
  });
  std::vector<Index> out;
  out.reserve(order.size());
  for (const auto& [d, g] : order) {
    out.push_back(g);
    if (dists_out) dists_out->push_back(d);
  }
  return out;
}

}  // namespace

RankingResult cmc_evaluate(const MatrixRef& probe_embeddings,
                           const std::vector<int>& probe_labels,
                           const MatrixRef& gallery_embeddings,
                           const std::vector<int>& gallery_labels, int trials,
                           std::uint64_t seed, DistanceKind distance) {
  const Index np = probe_embeddings.rows();
  const Index ng = gallery_embeddings.rows();
  if (static_cast<Index>(probe_labels.size()) != np ||
      static_cast<Index>(gallery_labels.size()) != ng)
    throw DimensionError("cmc_evaluate: label counts do not match embeddings");
  if (np == 0 || ng == 0) throw ProtocolError("cmc_evaluate: empty probe or gallery");
  if (trials < 1) throw ProtocolError("cmc_evaluate: trials must be >= 1");

  std::map<int, std::vector<Index>> gallery_by_label;
  for (Index g = 0; g < ng; ++g) gallery_by_label[gallery_labels[static_cast<std::size_t>(g)]].push_back(g);
  for (Index p = 0; p < np; ++p)
    if (!gallery_by_label.count(probe_labels[static_cast<std::size_t>(p)]))
      throw ProtocolError("cmc_evaluate: probe identity " +
                          std::to_string(probe_labels[static_cast<std::size_t>(p)]) +
                          " absent from the gallery");

  const Index num_ids = static_cast<Index>(gallery_by_label.size());
  Vector cmc = Vector::Zero(num_ids);

  Rng rng(seed_stream(seed, 0xC3C));
  for (int t = 0; t < trials; ++t) {
    // One exemplar per identity for this trial.
    std::vector<Index> exemplars;
    exemplars.reserve(static_cast<std::size_t>(num_ids));
    for (const auto& [label, members] : gallery_by_label)
      exemplars.push_back(
          members[rng.uniform_int(static_cast<std::uint64_t>(members.size()))]);
    std::sort(exemplars.begin(), exemplars.end());

    for (Index p = 0; p < np; ++p) {
      std::vector<Index> order =
          ranked_gallery(probe_embeddings, p, gallery_embeddings, exemplars,
                         distance);
      for (std::size_t r = 0; r < order.size(); ++r) {
        if (gallery_labels[static_cast<std::size_t>(order[r])] ==
            probe_labels[static_cast<std::size_t>(p)]) {
          cmc.segment(static_cast<Index>(r), num_ids - static_cast<Index>(r))
              .array() += 1;
          break;
        }
      }
    }
  }
  cmc /= static_cast<Scalar>(trials) * static_cast<Scalar>(np);

  RankingResult out;
  out.cmc = cmc;
  out.num_trials = trials;

  // Full-gallery rankings (all exemplars) feed the mAP and the report.
  std::vector<Index> all(static_cast<std::size_t>(ng));
  std::iota(all.begin(), all.end(), Index{0});
  out.rankings.resize(static_cast<std::size_t>(np));
  out.distances.resize(static_cast<std::size_t>(np));
  for (Index p = 0; p < np; ++p)
    out.rankings[static_cast<std::size_t>(p)] =
        ranked_gallery(probe_embeddings, p, gallery_embeddings, all, distance,
                       &out.distances[static_cast<std::size_t>(p)]);
  out.map_value = map_evaluate(probe_embeddings, probe_labels,
                               gallery_embeddings, gallery_labels,
                               &out.probes_without_match, distance);
  return out;
}

Scalar map_evaluate(const MatrixRef& probe_embeddings,
                    const std::vector<int>& probe_labels,
                    const MatrixRef& gallery_embeddings,
                    const std::vector<int>& gallery_labels, int* excluded,
                    DistanceKind distance) {
  const Index np = probe_embeddings.rows();
  const Index ng = gallery_embeddings.rows();
  if (static_cast<Index>(probe_labels.size()) != np ||
      static_cast<Index>(gallery_labels.size()) != ng)
    throw DimensionError("map_evaluate: label counts do not match embeddings");
  if (np == 0 || ng == 0) throw ProtocolError("map_evaluate: empty probe or gallery");

  std::vector<Index> all(static_cast<std::size_t>(ng));
  std::iota(all.begin(), all.end(), Index{0});

  Scalar total = 0;
  int used = 0;
  int skipped = 0;
  for (Index p = 0; p < np; ++p) {
    std::vector<Index> order =
        ranked_gallery(probe_embeddings, p, gallery_embeddings, all, distance);
    int relevant = 0;
    Scalar ap = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery_labels[static_cast<std::size_t>(order[r])] ==
          probe_labels[static_cast<std::size_t>(p)]) {
        ++relevant;
        ap += static_cast<Scalar>(relevant) / static_cast<Scalar>(r + 1);
      }
    }
    if (relevant == 0) {
      ++skipped;
      continue;
    }
    total += ap / static_cast<Scalar>(relevant);
    ++used;
  }
  if (excluded) *excluded = skipped;
  if (used == 0) throw ProtocolError("map_evaluate: no probe has a relevant gallery item");
  return total / static_cast<Scalar>(used);
}

Matrix embed_records(const TrainState& state,
                     const std::vector<ImageRecord>& records) {
  if (!state.initialized) throw ConsistencyError("embed_records: untrained state");
  Matrix inputs(static_cast<Index>(records.size()), state.fv_dim());
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::vector<Matrix> proj;
    for (std::size_t ch = 0; ch < state.gmm.size(); ++ch)
      proj.push_back(pca_project(state.pca[ch], records[i].channels[ch]));
    inputs.row(static_cast<Index>(i)) =
        fv_encode_image(state.gmm, proj).values.transpose();
  }
  NetParams net = state.net;  // eval mode never mutates, but keep callers const
  Matrix hidden = forward(net, inputs, Mode::kEval, 0);
  for (Index i = 0; i < hidden.rows(); ++i) {
    Scalar norm = hidden.row(i).norm();
    if (norm > 0) hidden.row(i) /= norm;
  }
  return hidden;
}

Scalar cmc_at(const RankingResult& result, int rank) {
  if (result.cmc.size() == 0) throw ProtocolError("cmc_at: empty CMC");
  Index idx = std::min<Index>(static_cast<Index>(rank), result.cmc.size()) - 1;
  if (idx < 0) throw ProtocolError("cmc_at: rank must be >= 1");
  return result.cmc(idx);
}

std::string cmc_to_csv(const RankingResult& result) {
  std::ostringstream os;
  os << "rank,rate\n";
  os.precision(17);
  for (Index r = 0; r < result.cmc.size(); ++r)
    os << (r + 1) << "," << result.cmc(r) << "\n";
  return os.str();
}

std::string ranking_report_json(const RankingResult& result) {
  nlohmann::json j;
  j["num_trials"] = result.num_trials;
  j["map"] = result.map_value;
  j["probes_without_match"] = result.probes_without_match;
  j["cmc"] = std::vector<Scalar>(result.cmc.data(),
                                 result.cmc.data() + result.cmc.size());
  nlohmann::json probes = nlohmann::json::array();
  for (std::size_t p = 0; p < result.rankings.size(); ++p) {
    nlohmann::json item;
    item["gallery_order"] = result.rankings[p];
    item["distances"] = result.distances[p];
    probes.push_back(std::move(item));
  }
  j["probes"] = probes;
  return j.dump(2);
}

}  // namespace deepfv
