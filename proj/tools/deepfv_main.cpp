#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "deepfv/dataset.hpp"
#include "deepfv/evalrank.hpp"
#include "deepfv/io.hpp"
#include "deepfv/rng.hpp"
#include "deepfv/trainer.hpp"

namespace {

constexpr const char* kToolVersion = "0.1.0";

// Exit codes: 0 success, 2 config/IO, 3 lookup, 4 protocol, 5 numerical.
constexpr int kExitConfig = 2;
constexpr int kExitLookup = 3;
constexpr int kExitProtocol = 4;
constexpr int kExitNumeric = 5;

using namespace deepfv;

struct RunConfig {
  TrainConfig train;
  std::string manifest_path;
  std::string out_dir = "out";
  int eval_trials = 10;
  DistanceKind eval_distance = DistanceKind::kEuclidean;
  int synth_num_ids = 8;
  int synth_per_id = 16;
  Index synth_d_raw = 10;
  Index synth_descriptors_per_image = 48;
  double synth_test_fraction = 0.5;
};

RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw IoError("config " + path + ": expected a JSON object");

  RunConfig run;
  static const std::set<std::string> cli_keys = {
      "manifest", "out_dir", "eval_trials", "eval_distance", "synth_num_ids",
      "synth_per_id", "synth_d_raw", "synth_descriptors_per_image",
      "synth_test_fraction"};
  nlohmann::json train_part = nlohmann::json::object();
  try {
    for (const auto& [key, value] : j.items()) {
      if (!cli_keys.count(key)) {
        train_part[key] = value;
        continue;
      }
      if (key == "manifest") run.manifest_path = value.get<std::string>();
      if (key == "out_dir") run.out_dir = value.get<std::string>();
      if (key == "eval_trials") run.eval_trials = value.get<int>();
      if (key == "eval_distance") {
        std::string d = value.get<std::string>();
        if (d == "euclidean")
          run.eval_distance = DistanceKind::kEuclidean;
        else if (d == "cosine")
          run.eval_distance = DistanceKind::kCosine;
        else
          throw IoError("config: eval_distance must be euclidean or cosine");
      }
      if (key == "synth_num_ids") run.synth_num_ids = value.get<int>();
      if (key == "synth_per_id") run.synth_per_id = value.get<int>();
      if (key == "synth_d_raw") run.synth_d_raw = value.get<Index>();
      if (key == "synth_descriptors_per_image")
        run.synth_descriptors_per_image = value.get<Index>();
      if (key == "synth_test_fraction")
        run.synth_test_fraction = value.get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("config " + path + ": " + e.what());
  }
  run.train = train_config_from_json(train_part.dump());
  return run;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void write_run_manifest(const RunConfig& run, const std::string& config_path,
                        const std::string& command) {
  nlohmann::json j;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(read_text_file(config_path))));
  j["config_hash"] = std::string(buf);
  j["config_path"] = config_path;
  j["seed"] = run.train.seed;
  j["tool_version"] = kToolVersion;
  j["command"] = command;
  write_text_file(run.out_dir + "/run_manifest.json", j.dump(2) + "\n");
}

int cmd_train(const RunConfig& run, const std::string& config_path) {
  Manifest manifest = load_manifest(run.manifest_path);
  std::filesystem::create_directories(run.out_dir);
  TrainState state = fit(run.train, manifest);
  save_checkpoint(state, run.out_dir + "/checkpoint.dlfc");
  std::string log_text;
  for (const auto& rec : state.log) log_text += log_record_to_json(rec) + "\n";
  write_text_file(run.out_dir + "/train_log.ndjson", log_text);
  write_run_manifest(run, config_path, "train");
  std::cout << "trained " << state.epoch << " epochs; checkpoint at "
            << run.out_dir << "/checkpoint.dlfc\n";
  return 0;
}

int cmd_encode(const RunConfig& run, const std::string& checkpoint_path,
               const std::vector<std::string>& ids) {
  TrainState state = load_checkpoint(checkpoint_path);
  if (ids.empty()) return 0;
  Manifest manifest = load_manifest(run.manifest_path);
  std::filesystem::create_directories(run.out_dir);

  std::vector<ImageRecord> records;
  for (const std::string& id : ids) {
    const ManifestEntry* found = nullptr;
    for (const auto& e : manifest.entries)
      if (e.id == id) {
        found = &e;
        break;
      }
    if (!found) throw LookupError("unknown image id: " + id);
    Manifest single;
    single.base_dir = manifest.base_dir;
    single.entries = {*found};
    records.push_back(load_images(single, state.config.channels).front());
  }
  Matrix embeddings = embed_records(state, records);
  for (std::size_t i = 0; i < ids.size(); ++i)
    write_descriptor_file(run.out_dir + "/" + ids[i] + ".emb",
                          embeddings.row(static_cast<Index>(i)));
  std::cout << "wrote " << ids.size() << " embeddings to " << run.out_dir << "\n";
  return 0;
}

int cmd_eval(const RunConfig& run, const std::string& checkpoint_path,
             bool self_gallery, const std::string& config_path) {
  TrainState state = load_checkpoint(checkpoint_path);
  Manifest manifest = load_manifest(run.manifest_path);
  std::filesystem::create_directories(run.out_dir);

  std::vector<std::size_t> test_entries = manifest.split_indices(Split::kTest);
  if (test_entries.empty()) throw ProtocolError("eval: test split is empty");
  Manifest test_only;
  test_only.base_dir = manifest.base_dir;
  for (std::size_t i : test_entries) test_only.entries.push_back(manifest.entries[i]);
  std::vector<ImageRecord> records = load_images(test_only, state.config.channels);

  std::vector<std::size_t> probe_rows, gallery_rows;
  if (self_gallery) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      probe_rows.push_back(i);
      gallery_rows.push_back(i);
    }
  } else {
    std::set<int> cameras;
    for (const auto& r : records) cameras.insert(r.camera);
    if (cameras.size() >= 2) {
      int probe_cam = *cameras.begin();
      for (std::size_t i = 0; i < records.size(); ++i)
        (records[i].camera == probe_cam ? probe_rows : gallery_rows).push_back(i);
    } else {
      // Single camera view: disjoint half split per identity, seeded.
      std::map<int, std::vector<std::size_t>> by_label;
      for (std::size_t i = 0; i < records.size(); ++i)
        by_label[records[i].label].push_back(i);
      Rng rng(seed_stream(run.train.seed, 0xE7A1));
      for (auto& [label, members] : by_label) {
        if (members.size() < 2)
          throw ProtocolError("eval: identity " + std::to_string(label) +
                              " has a single test image and one camera view");
        rng.shuffle(members);
        for (std::size_t i = 0; i < members.size(); ++i)
          (i < members.size() / 2 ? probe_rows : gallery_rows).push_back(members[i]);
      }
    }
  }
  if (probe_rows.empty() || gallery_rows.empty())
    throw ProtocolError("eval: empty probe or gallery after the camera split");

  Matrix all = embed_records(state, records);
  Matrix probes(static_cast<Index>(probe_rows.size()), all.cols());
  Matrix gallery(static_cast<Index>(gallery_rows.size()), all.cols());
  std::vector<int> probe_labels, gallery_labels;
  for (std::size_t i = 0; i < probe_rows.size(); ++i) {
    probes.row(static_cast<Index>(i)) = all.row(static_cast<Index>(probe_rows[i]));
    probe_labels.push_back(records[probe_rows[i]].label);
  }
  for (std::size_t i = 0; i < gallery_rows.size(); ++i) {
    gallery.row(static_cast<Index>(i)) = all.row(static_cast<Index>(gallery_rows[i]));
    gallery_labels.push_back(records[gallery_rows[i]].label);
  }

  RankingResult result =
      cmc_evaluate(probes, probe_labels, gallery, gallery_labels,
                   run.eval_trials, run.train.seed, run.eval_distance);

  write_text_file(run.out_dir + "/cmc.csv", cmc_to_csv(result));
  write_text_file(run.out_dir + "/report.json", ranking_report_json(result) + "\n");
  write_run_manifest(run, config_path, "eval");

  nlohmann::json summary;
  summary["rank1"] = cmc_at(result, 1);
  summary["rank5"] = cmc_at(result, 5);
  summary["rank10"] = cmc_at(result, 10);
  summary["rank20"] = cmc_at(result, 20);
  summary["mAP"] = result.map_value;
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_synth(const RunConfig& run, const std::string& config_path) {
  SynthOptions opts;
  opts.descriptors_per_image = run.synth_descriptors_per_image;
  std::vector<DescriptorSet> sets =
      synth_generate(run.synth_num_ids, run.synth_per_id, run.synth_d_raw,
                     run.train.seed, opts);
  std::filesystem::create_directories(run.out_dir + "/descriptors");

  Manifest manifest;
  manifest.base_dir = run.out_dir;
  int train_per_id = run.synth_per_id -
                     static_cast<int>(run.synth_test_fraction * run.synth_per_id);
  for (const auto& set : sets) {
    std::string rel = "descriptors/" + set.image_id + ".dfv";
    write_descriptor_file(run.out_dir + "/" + rel, set.descriptors);
    ManifestEntry entry;
    entry.id = set.image_id;
    entry.label = set.label;
    entry.camera = set.camera_id;
    entry.file = rel;
    // Image index within its identity decides the split.
    int img = std::stoi(set.image_id.substr(set.image_id.find("_im") + 3));
    entry.split = img < train_per_id ? Split::kTrain : Split::kTest;
    manifest.entries.push_back(std::move(entry));
  }
  save_manifest(manifest, run.out_dir + "/manifest.json");
  write_run_manifest(run, config_path, "synth");
  std::cout << "wrote " << sets.size() << " descriptor sets and "
            << run.out_dir << "/manifest.json\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fisher-vector + deep-net + LDA pipeline for cross-view identity matching"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path;
  std::string checkpoint_path;
  std::string out_override;
  std::optional<int> threads_override;
  std::optional<std::uint64_t> seed_override;
  bool self_gallery = false;
  std::vector<std::string> encode_ids;

  app.add_option("--config", config_path, "run configuration (JSON)")->required();
  app.add_option("--checkpoint", checkpoint_path, "checkpoint file");
  app.add_option("--out", out_override, "output directory override");
  app.add_option("--threads", threads_override, "worker thread cap");
  app.add_option("--seed", seed_override, "seed override");

  CLI::App* train = app.add_subcommand("train", "fit PCA, GMM and the network");
  CLI::App* encode = app.add_subcommand("encode", "write embeddings for image ids");
  encode->add_option("ids", encode_ids, "image ids to encode");
  CLI::App* eval = app.add_subcommand("eval", "retrieval evaluation on the test split");
  eval->add_flag("--self-gallery", self_gallery, "match probes against themselves");
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig run = load_run_config(config_path);
    if (!out_override.empty()) run.out_dir = out_override;
    if (threads_override) run.train.threads = *threads_override;
    if (seed_override) run.train.seed = *seed_override;

    if (train->parsed()) return cmd_train(run, config_path);
    if (encode->parsed()) {
      if (checkpoint_path.empty()) throw IoError("encode: --checkpoint is required");
      return cmd_encode(run, checkpoint_path, encode_ids);
    }
    if (eval->parsed()) {
      if (checkpoint_path.empty()) throw IoError("eval: --checkpoint is required");
      return cmd_eval(run, checkpoint_path, self_gallery, config_path);
    }
    if (synth->parsed()) return cmd_synth(run, config_path);
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitLookup;
  } catch (const ProtocolError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitProtocol;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
