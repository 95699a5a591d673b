#include "deepfv/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include <json.hpp>

#include "deepfv/fisher.hpp"
#include "deepfv/io.hpp"
#include "deepfv/lda.hpp"
#include "deepfv/rng.hpp"

namespace deepfv {

namespace {

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex err_mutex;
  std::atomic<std::size_t> next{0};
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) break;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

Scalar l2_normalize_rows(Matrix& m) {
  Scalar min_norm = std::numeric_limits<Scalar>::max();
  for (Index i = 0; i < m.rows(); ++i) {
    Scalar norm = m.row(i).norm();
    min_norm = std::min(min_norm, norm);
    if (norm > 0) m.row(i) /= norm;
  }
  return min_norm;
}

}  // namespace

void TrainConfig::validate() const {
  if (channels.empty()) throw DataError("config: at least one channel required");
  for (const auto& ch : channels) {
    if (ch.raw_dim < 1 || ch.pca_dim < 1 || ch.gmm_k < 1)
      throw DataError("config: channel " + ch.name + " has non-positive dims");
    if (ch.pca_dim > ch.raw_dim)
      throw DimensionError("config: channel " + ch.name + " pca_dim exceeds raw_dim");
  }
  if (widths.empty()) throw DataError("config: at least one layer width required");
  if (min_per_class < 2)
    throw DataError("config: min_per_class must be >= 2 for scatter statistics");
  if (batch_size < 2 * min_per_class)
    throw DataError("config: batch_size must be >= 2 * min_per_class");
  if (!(lr_init > 0) || !(momentum >= 0 && momentum < 1) || !(weight_decay >= 0))
    throw DataError("config: bad optimizer rates");
  if (lr_halving_period_epochs < 1 || epochs < 0 || gmm_update_period_epochs < 1)
    throw DataError("config: bad schedule");
  if (!(lambda_reg > 0)) throw DataError("config: lambda_reg must be positive");
  if (!(epsilon_offset >= 0)) throw DataError("config: epsilon_offset must be >= 0");
  for (Scalar eta : line_search_grid)
    if (!(eta > 0)) throw DataError("config: line-search steps must be positive");
  if (!(subsample_fraction > 0 && subsample_fraction <= 1))
    throw DataError("config: subsample_fraction must be in (0, 1]");
  if (!(dropout_rate >= 0 && dropout_rate < 1))
    throw DataError("config: dropout_rate must be in [0, 1)");
  if (gmm_sample_size < 2 * static_cast<Index>(min_per_class))
    throw DataError("config: gmm_sample_size too small for scatter statistics");
}

Scalar learning_rate_at(const TrainConfig& config, int epoch) {
  int halvings = epoch / config.lr_halving_period_epochs;
  return config.lr_init * std::pow(Scalar(2), -static_cast<Scalar>(halvings));
}

std::string log_record_to_json(const LogRecord& rec) {
  nlohmann::json j;
  j["epoch"] = rec.epoch;
  j["loss"] = rec.loss;
  j["lr"] = rec.lr;
  j["eigenvalues"] = rec.eigenvalues;
  if (rec.eta)
    j["eta"] = *rec.eta;
  else
    j["eta"] = nullptr;
  return j.dump();
}

Index TrainState::fv_dim() const {
  Index total = 0;
  for (const auto& ch : config.channels) total += 2 * ch.gmm_k * ch.pca_dim;
  return total;
}

// --------------------------------------------------------------------------
// Config JSON

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["batch_size"] = c.batch_size;
  j["min_per_class"] = c.min_per_class;
  j["lr_init"] = c.lr_init;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["weight_decay_all"] = c.weight_decay_all;
  j["lr_halving_period_epochs"] = c.lr_halving_period_epochs;
  j["epochs"] = c.epochs;
  j["lambda_reg"] = c.lambda_reg;
  j["epsilon_offset"] = c.epsilon_offset;
  j["gmm_update_period_epochs"] = c.gmm_update_period_epochs;
  j["line_search_grid"] = c.line_search_grid;
  j["gamma_threshold"] = c.gamma_threshold;
  j["subsample_fraction"] = c.subsample_fraction;
  j["loss_kind"] = c.loss_kind == LossKind::kLda ? "lda" : "cross_entropy";
  j["seed"] = c.seed;
  nlohmann::json chans = nlohmann::json::array();
  for (const auto& ch : c.channels)
    chans.push_back({{"name", ch.name},
                     {"raw_dim", ch.raw_dim},
                     {"pca_dim", ch.pca_dim},
                     {"gmm_k", ch.gmm_k}});
  j["channels"] = chans;
  j["widths"] = c.widths;
  j["dropout_rate"] = c.dropout_rate;
  j["bn_enabled"] = c.bn_enabled;
  j["gmm_sample_size"] = c.gmm_sample_size;
  j["em_max_iters"] = c.em_max_iters;
  j["em_tol"] = c.em_tol;
  j["early_stop"] = c.early_stop;
  j["early_stop_tol"] = c.early_stop_tol;
  j["early_stop_window"] = c.early_stop_window;
  j["threads"] = c.threads;
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw IoError("config: expected a JSON object");

  static const std::set<std::string> known = {
      "batch_size", "min_per_class", "lr_init", "momentum", "weight_decay",
      "weight_decay_all", "lr_halving_period_epochs", "epochs", "lambda_reg",
      "epsilon_offset", "gmm_update_period_epochs", "line_search_grid",
      "gamma_threshold", "subsample_fraction", "loss_kind", "seed", "channels",
      "widths", "dropout_rate", "bn_enabled", "gmm_sample_size", "em_max_iters",
      "em_tol", "early_stop", "early_stop_tol", "early_stop_window", "threads"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw IoError("config: unknown key \"" + key + "\"");

  TrainConfig c;
  try {
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<Index>();
    if (j.contains("min_per_class")) c.min_per_class = j["min_per_class"].get<int>();
    if (j.contains("lr_init")) c.lr_init = j["lr_init"].get<Scalar>();
    if (j.contains("momentum")) c.momentum = j["momentum"].get<Scalar>();
    if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<Scalar>();
    if (j.contains("weight_decay_all"))
      c.weight_decay_all = j["weight_decay_all"].get<bool>();
    if (j.contains("lr_halving_period_epochs"))
      c.lr_halving_period_epochs = j["lr_halving_period_epochs"].get<int>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("lambda_reg")) c.lambda_reg = j["lambda_reg"].get<Scalar>();
    if (j.contains("epsilon_offset"))
      c.epsilon_offset = j["epsilon_offset"].get<Scalar>();
    if (j.contains("gmm_update_period_epochs"))
      c.gmm_update_period_epochs = j["gmm_update_period_epochs"].get<int>();
    if (j.contains("line_search_grid"))
      c.line_search_grid = j["line_search_grid"].get<std::vector<Scalar>>();
    if (j.contains("gamma_threshold"))
      c.gamma_threshold = j["gamma_threshold"].get<Scalar>();
    if (j.contains("subsample_fraction"))
      c.subsample_fraction = j["subsample_fraction"].get<Scalar>();
    if (j.contains("loss_kind")) {
      std::string kind = j["loss_kind"].get<std::string>();
      if (kind == "lda")
        c.loss_kind = LossKind::kLda;
      else if (kind == "cross_entropy")
        c.loss_kind = LossKind::kCrossEntropy;
      else
        throw IoError("config: loss_kind must be \"lda\" or \"cross_entropy\"");
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("channels")) {
      c.channels.clear();
      for (const auto& e : j["channels"]) {
        ChannelConfig ch;
        ch.name = e.at("name").get<std::string>();
        ch.raw_dim = e.at("raw_dim").get<Index>();
        ch.pca_dim = e.at("pca_dim").get<Index>();
        if (e.contains("gmm_k")) ch.gmm_k = e.at("gmm_k").get<Index>();
        for (const auto& [key, value] : e.items())
          if (key != "name" && key != "raw_dim" && key != "pca_dim" && key != "gmm_k")
            throw IoError("config: unknown channel key \"" + key + "\"");
        c.channels.push_back(std::move(ch));
      }
    }
    if (j.contains("widths")) c.widths = j["widths"].get<std::vector<Index>>();
    if (j.contains("dropout_rate")) c.dropout_rate = j["dropout_rate"].get<Scalar>();
    if (j.contains("bn_enabled")) c.bn_enabled = j["bn_enabled"].get<bool>();
    if (j.contains("gmm_sample_size"))
      c.gmm_sample_size = j["gmm_sample_size"].get<Index>();
    if (j.contains("em_max_iters")) c.em_max_iters = j["em_max_iters"].get<int>();
    if (j.contains("em_tol")) c.em_tol = j["em_tol"].get<Scalar>();
    if (j.contains("early_stop")) c.early_stop = j["early_stop"].get<bool>();
    if (j.contains("early_stop_tol"))
      c.early_stop_tol = j["early_stop_tol"].get<Scalar>();
    if (j.contains("early_stop_window"))
      c.early_stop_window = j["early_stop_window"].get<int>();
    if (j.contains("threads")) c.threads = j["threads"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("config: ") + e.what());
  }
  return c;
}

// --------------------------------------------------------------------------
// Checkpointing

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> pack_gmm(const GmmModel& g) {
  BinaryWriter w;
  w.put_u64(static_cast<std::uint64_t>(g.components()));
  w.put_u64(static_cast<std::uint64_t>(g.dim()));
  w.put_vector(g.log_weights_unnorm);
  w.put_matrix(g.means);
  w.put_matrix(g.log_vars);
  return w.bytes();
}

GmmModel unpack_gmm(BinaryReader& r) {
  GmmModel g;
  std::uint64_t k = r.get_u64();
  std::uint64_t d = r.get_u64();
  g.log_weights_unnorm = r.get_vector();
  g.means = r.get_matrix();
  g.log_vars = r.get_matrix();
  if (g.components() != static_cast<Index>(k) || g.dim() != static_cast<Index>(d))
    throw IoError("checkpoint: inconsistent GMM section");
  return g;
}

std::vector<std::uint8_t> pack_pca(const PcaModel& p) {
  BinaryWriter w;
  w.put_vector(p.mean);
  w.put_matrix(p.basis);
  w.put_vector(p.explained_variance);
  return w.bytes();
}

PcaModel unpack_pca(BinaryReader& r) {
  PcaModel p;
  p.mean = r.get_vector();
  p.basis = r.get_matrix();
  p.explained_variance = r.get_vector();
  return p;
}

std::vector<std::uint8_t> pack_net(const NetParams& n) {
  BinaryWriter w;
  w.put_u64(n.layers.size());
  for (const auto& layer : n.layers) {
    w.put_matrix(layer.weight);
    w.put_vector(layer.bias);
  }
  w.put_u32(n.bn_enabled ? 1 : 0);
  w.put_vector(n.bn_gamma);
  w.put_vector(n.bn_beta);
  w.put_vector(n.bn_running_mean);
  w.put_vector(n.bn_running_var);
  w.put_f64(n.bn_momentum);
  w.put_f64(n.bn_epsilon);
  w.put_f64(n.dropout_rate);
  return w.bytes();
}

NetParams unpack_net(BinaryReader& r) {
  NetParams n;
  std::uint64_t layers = r.get_u64();
  for (std::uint64_t l = 0; l < layers; ++l) {
    NetLayer layer;
    layer.weight = r.get_matrix();
    layer.bias = r.get_vector();
    n.layers.push_back(std::move(layer));
  }
  n.bn_enabled = r.get_u32() != 0;
  n.bn_gamma = r.get_vector();
  n.bn_beta = r.get_vector();
  n.bn_running_mean = r.get_vector();
  n.bn_running_var = r.get_vector();
  n.bn_momentum = r.get_f64();
  n.bn_epsilon = r.get_f64();
  n.dropout_rate = r.get_f64();
  return n;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  std::vector<Section> sections;

  {
    BinaryWriter w;
    w.put_string(train_config_to_json(state.config));
    w.put_u64(state.class_labels.size());
    for (int label : state.class_labels) w.put_u32(static_cast<std::uint32_t>(label));
    w.put_u32(state.initialized ? 1 : 0);
    sections.push_back({"meta", w.bytes()});
  }
  for (std::size_t ch = 0; ch < state.pca.size(); ++ch)
    sections.push_back({"pca." + std::to_string(ch), pack_pca(state.pca[ch])});
  for (std::size_t ch = 0; ch < state.gmm.size(); ++ch)
    sections.push_back({"gmm." + std::to_string(ch), pack_gmm(state.gmm[ch])});
  sections.push_back({"net", pack_net(state.net)});
  {
    BinaryWriter w;
    w.put_matrix(state.head_weight);
    w.put_vector(state.head_bias);
    sections.push_back({"head", w.bytes()});
  }
  {
    BinaryWriter w;
    w.put_u64(state.vel_layers.size());
    for (const auto& layer : state.vel_layers) {
      w.put_matrix(layer.weight);
      w.put_vector(layer.bias);
    }
    w.put_vector(state.vel_bn_gamma);
    w.put_vector(state.vel_bn_beta);
    w.put_matrix(state.vel_head_weight);
    w.put_vector(state.vel_head_bias);
    sections.push_back({"opt", w.bytes()});
  }
  {
    BinaryWriter w;
    w.put_u64(state.seed);
    w.put_u64(static_cast<std::uint64_t>(state.epoch));
    sections.push_back({"rng", w.bytes()});
  }
  {
    BinaryWriter w;
    w.put_u64(state.log.size());
    for (const auto& rec : state.log) {
      w.put_u64(static_cast<std::uint64_t>(rec.epoch));
      w.put_f64(rec.loss);
      w.put_f64(rec.lr);
      w.put_vector(rec.eigenvalues.empty()
                       ? Vector()
                       : Eigen::Map<const Vector>(rec.eigenvalues.data(),
                                                  static_cast<Index>(
                                                      rec.eigenvalues.size())));
      w.put_u32(rec.eta ? 1 : 0);
      w.put_f64(rec.eta ? *rec.eta : 0.0);
      w.put_f64(rec.gmm_objective_eta0);
      w.put_f64(rec.gmm_objective_adopted);
    }
    sections.push_back({"log", w.bytes()});
  }
  write_section_file(path, kCheckpointVersion, sections);
}

TrainState load_checkpoint(const std::string& path) {
  std::vector<Section> sections = read_section_file(path, kCheckpointVersion);
  std::map<std::string, const Section*> by_name;
  for (const auto& s : sections) by_name[s.name] = &s;
  auto get = [&](const std::string& name) -> BinaryReader {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw IoError("checkpoint: missing section \"" + name + "\" in " + path);
    return BinaryReader(it->second->payload);
  };

  TrainState state;
  {
    BinaryReader r = get("meta");
    state.config = train_config_from_json(r.get_string());
    std::uint64_t n = r.get_u64();
    for (std::uint64_t i = 0; i < n; ++i)
      state.class_labels.push_back(static_cast<int>(r.get_u32()));
    state.initialized = r.get_u32() != 0;
  }
  for (std::size_t ch = 0; ch < state.config.channels.size(); ++ch) {
    BinaryReader rp = get("pca." + std::to_string(ch));
    state.pca.push_back(unpack_pca(rp));
    BinaryReader rg = get("gmm." + std::to_string(ch));
    state.gmm.push_back(unpack_gmm(rg));
  }
  {
    BinaryReader r = get("net");
    state.net = unpack_net(r);
  }
  {
    BinaryReader r = get("head");
    state.head_weight = r.get_matrix();
    state.head_bias = r.get_vector();
  }
  {
    BinaryReader r = get("opt");
    std::uint64_t layers = r.get_u64();
    for (std::uint64_t l = 0; l < layers; ++l) {
      NetLayer layer;
      layer.weight = r.get_matrix();
      layer.bias = r.get_vector();
      state.vel_layers.push_back(std::move(layer));
    }
    state.vel_bn_gamma = r.get_vector();
    state.vel_bn_beta = r.get_vector();
    state.vel_head_weight = r.get_matrix();
    state.vel_head_bias = r.get_vector();
  }
  {
    BinaryReader r = get("rng");
    state.seed = r.get_u64();
    state.epoch = static_cast<int>(r.get_u64());
  }
  if (state.initialized) {
    for (std::size_t ch = 0; ch < state.config.channels.size(); ++ch) {
      const ChannelConfig& cc = state.config.channels[ch];
      if (state.gmm[ch].components() != cc.gmm_k ||
          state.gmm[ch].dim() != cc.pca_dim ||
          state.pca[ch].out_dim() != cc.pca_dim ||
          state.pca[ch].in_dim() != cc.raw_dim)
        throw IoError("checkpoint: channel " + cc.name +
                      " sections do not match its config in " + path);
    }
  }
  {
    BinaryReader r = get("log");
    std::uint64_t n = r.get_u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      LogRecord rec;
      rec.epoch = static_cast<int>(r.get_u64());
      rec.loss = r.get_f64();
      rec.lr = r.get_f64();
      Vector eigs = r.get_vector();
      rec.eigenvalues.assign(eigs.data(), eigs.data() + eigs.size());
      bool has_eta = r.get_u32() != 0;
      Scalar eta = r.get_f64();
      if (has_eta) rec.eta = eta;
      rec.gmm_objective_eta0 = r.get_f64();
      rec.gmm_objective_adopted = r.get_f64();
      state.log.push_back(std::move(rec));
    }
  }
  return state;
}

// --------------------------------------------------------------------------
// Data loading and batch sampling

std::vector<ImageRecord> load_images(const Manifest& manifest,
                                     const std::vector<ChannelConfig>& channels) {
  Index total_raw = 0;
  for (const auto& ch : channels) total_raw += ch.raw_dim;
  std::vector<ImageRecord> images;
  images.reserve(manifest.entries.size());
  for (const auto& entry : manifest.entries) {
    Matrix raw = read_descriptor_file(manifest.resolve(entry.file));
    if (raw.cols() != total_raw)
      throw DimensionError("image " + entry.id + ": descriptor file has " +
                           std::to_string(raw.cols()) + " columns, channels sum to " +
                           std::to_string(total_raw));
    if (raw.rows() < 1) throw DataError("image " + entry.id + ": empty descriptor set");
    if (!all_finite(raw)) throw DataError("image " + entry.id + ": NaN/Inf descriptors");
    ImageRecord rec;
    rec.id = entry.id;
    rec.label = entry.label;
    rec.camera = entry.camera;
    rec.split = entry.split;
    Index offset = 0;
    for (const auto& ch : channels) {
      rec.channels.push_back(raw.middleCols(offset, ch.raw_dim));
      offset += ch.raw_dim;
    }
    images.push_back(std::move(rec));
  }
  return images;
}

BatchSample sample_batch(const std::vector<int>& labels, Index batch_size,
                         int min_per_class, std::uint64_t seed) {
  if (min_per_class < 1) throw DataError("sample_batch: min_per_class must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  std::vector<int> eligible, offending;
  for (const auto& [label, idx] : by_class) {
    if (static_cast<int>(idx.size()) >= min_per_class)
      eligible.push_back(label);
    else
      offending.push_back(label);
  }
  Index max_classes = batch_size / min_per_class;
  if (static_cast<Index>(eligible.size()) < 2 || max_classes < 2) {
    std::string msg = "sample_batch: infeasible composition;";
    msg += " classes below min_per_class:";
    if (offending.empty()) msg += " (none)";
    for (int label : offending) msg += " " + std::to_string(label);
    throw DataError(msg);
  }

  Rng rng(seed_stream(seed, 0xBA7C4));
  rng.shuffle(eligible);
  Index num_classes = std::min<Index>(static_cast<Index>(eligible.size()), max_classes);
  eligible.resize(static_cast<std::size_t>(num_classes));

  std::vector<std::vector<std::size_t>> pools;
  for (int label : eligible) {
    auto pool = by_class[label];
    rng.shuffle(pool);
    pools.push_back(std::move(pool));
  }

  BatchSample batch;
  std::vector<std::size_t> taken(pools.size(), 0);
  for (std::size_t c = 0; c < pools.size(); ++c)
    for (int r = 0; r < min_per_class; ++r) {
      batch.indices.push_back(pools[c][taken[c]++]);
      batch.labels.push_back(eligible[c]);
    }
  // Spread the leftover capacity round-robin over the chosen classes.
  bool progressed = true;
  while (static_cast<Index>(batch.indices.size()) < batch_size && progressed) {
    progressed = false;
    for (std::size_t c = 0;
         c < pools.size() && static_cast<Index>(batch.indices.size()) < batch_size;
         ++c) {
      if (taken[c] < pools[c].size()) {
        batch.indices.push_back(pools[c][taken[c]++]);
        batch.labels.push_back(eligible[c]);
        progressed = true;
      }
    }
  }
  return batch;
}

std::pair<std::vector<std::string>, std::vector<int>> sample_batch(
    const Manifest& manifest, Split split, Index batch_size, int min_per_class,
    std::uint64_t seed) {
  std::vector<std::size_t> entry_idx = manifest.split_indices(split);
  std::vector<int> labels;
  labels.reserve(entry_idx.size());
  for (std::size_t i : entry_idx) labels.push_back(manifest.entries[i].label);
  BatchSample batch = sample_batch(labels, batch_size, min_per_class, seed);
  std::vector<std::string> ids;
  ids.reserve(batch.indices.size());
  for (std::size_t pos : batch.indices)
    ids.push_back(manifest.entries[entry_idx[pos]].id);
  return {std::move(ids), std::move(batch.labels)};
}

// --------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, std::vector<ImageRecord> images)
    : images_(std::move(images)) {
  config.validate();
  state_.config = std::move(config);
  state_.seed = state_.config.seed;
  for (std::size_t i = 0; i < images_.size(); ++i)
    (images_[i].split == Split::kTrain ? train_idx_ : test_idx_).push_back(i);
}

Trainer::Trainer(TrainState state, std::vector<ImageRecord> images)
    : state_(std::move(state)), images_(std::move(images)) {
  state_.config.validate();
  for (std::size_t i = 0; i < images_.size(); ++i)
    (images_[i].split == Split::kTrain ? train_idx_ : test_idx_).push_back(i);
  if (state_.initialized) {
    project_all();
    fv_cache_.assign(train_idx_.size(), Vector());
    fv_valid_.assign(train_idx_.size(), false);
    pick_gmm_sample();
  }
}

void Trainer::project_all() {
  projected_.assign(train_idx_.size(), {});
  for (std::size_t pos = 0; pos < train_idx_.size(); ++pos) {
    const ImageRecord& rec = images_[train_idx_[pos]];
    std::vector<Matrix> proj;
    for (std::size_t ch = 0; ch < state_.pca.size(); ++ch)
      proj.push_back(pca_project(state_.pca[ch], rec.channels[ch]));
    projected_[pos] = std::move(proj);
  }
}

void Trainer::pick_gmm_sample() {
  const TrainConfig& cfg = state_.config;
  std::vector<int> labels;
  for (std::size_t i : train_idx_) labels.push_back(images_[i].label);
  if (static_cast<Index>(train_idx_.size()) <= cfg.gmm_sample_size) {
    gmm_sample_.resize(train_idx_.size());
    std::iota(gmm_sample_.begin(), gmm_sample_.end(), std::size_t{0});
  } else {
    BatchSample s = sample_batch(labels, cfg.gmm_sample_size, cfg.min_per_class,
                                 seed_stream(state_.seed, 0x5A117E));
    gmm_sample_ = s.indices;
    std::sort(gmm_sample_.begin(), gmm_sample_.end());
  }
}

void Trainer::initialize() {
  if (state_.initialized) {
    if (projected_.empty()) {
      project_all();
      fv_cache_.assign(train_idx_.size(), Vector());
      fv_valid_.assign(train_idx_.size(), false);
      pick_gmm_sample();
    }
    return;
  }
  const TrainConfig& cfg = state_.config;
  if (train_idx_.empty()) throw DataError("fit: train split is empty");
  std::set<int> train_labels;
  for (std::size_t i : train_idx_) train_labels.insert(images_[i].label);
  if (train_labels.size() < 2) throw DataError("fit: need at least 2 identities");

  Index max_batch_classes =
      std::min<Index>(static_cast<Index>(train_labels.size()),
                      cfg.batch_size / cfg.min_per_class);
  if (cfg.widths.back() <= max_batch_classes - 1)
    throw ConsistencyError(
        "fit: last layer width must exceed C-1 for the eigenproblem; width " +
        std::to_string(cfg.widths.back()) + " vs batch classes " +
        std::to_string(max_batch_classes));

  // PCA and GMM vocabulary per channel, fit on the pooled train descriptors.
  for (std::size_t ch = 0; ch < cfg.channels.size(); ++ch) {
    Index rows = 0;
    for (std::size_t i : train_idx_) rows += images_[i].channels[ch].rows();
    Matrix pool(rows, cfg.channels[ch].raw_dim);
    Index at = 0;
    for (std::size_t i : train_idx_) {
      pool.middleRows(at, images_[i].channels[ch].rows()) = images_[i].channels[ch];
      at += images_[i].channels[ch].rows();
    }
    state_.pca.push_back(pca_fit(pool, cfg.channels[ch].pca_dim));
    Matrix proj = pca_project(state_.pca[ch], pool);
    state_.gmm.push_back(gmm_fit_em(proj, cfg.channels[ch].gmm_k,
                                    seed_stream(state_.seed, 0xE3, ch),
                                    cfg.em_max_iters, cfg.em_tol));
  }
  project_all();
  fv_cache_.assign(train_idx_.size(), Vector());
  fv_valid_.assign(train_idx_.size(), false);

  state_.net = net_init(state_.fv_dim(), cfg.widths, cfg.dropout_rate,
                        cfg.bn_enabled, state_.seed);
  state_.class_labels.assign(train_labels.begin(), train_labels.end());

  state_.vel_layers.clear();
  for (const auto& layer : state_.net.layers) {
    NetLayer v;
    v.weight = Matrix::Zero(layer.weight.rows(), layer.weight.cols());
    v.bias = Vector::Zero(layer.bias.size());
    state_.vel_layers.push_back(std::move(v));
  }
  state_.vel_bn_gamma = Vector::Zero(state_.net.bn_gamma.size());
  state_.vel_bn_beta = Vector::Zero(state_.net.bn_beta.size());

  if (cfg.loss_kind == LossKind::kCrossEntropy) {
    Index c = static_cast<Index>(state_.class_labels.size());
    Index d_out = cfg.widths.back();
    Rng rng(seed_stream(state_.seed, 0x4EAD));
    state_.head_weight.resize(c, d_out);
    Scalar bound = std::sqrt(6.0 / static_cast<Scalar>(d_out));
    for (Index i = 0; i < c; ++i)
      for (Index j = 0; j < d_out; ++j)
        state_.head_weight(i, j) = rng.uniform(-bound, bound);
    state_.head_bias = Vector::Zero(c);
    state_.vel_head_weight = Matrix::Zero(c, d_out);
    state_.vel_head_bias = Vector::Zero(c);
  }

  pick_gmm_sample();
  state_.initialized = true;

  LogRecord rec;
  rec.epoch = 0;
  rec.lr = learning_rate_at(cfg, 0);
  std::vector<Scalar> eigs;
  rec.loss = sample_objective(&eigs);
  if (cfg.loss_kind == LossKind::kCrossEntropy) rec.loss = -rec.loss;
  rec.eigenvalues = std::move(eigs);
  state_.log.push_back(std::move(rec));
}

Vector Trainer::encode_image_fv(std::size_t image_index,
                                const std::vector<GmmModel>& gmms) const {
  const ImageRecord& rec = images_[image_index];
  std::vector<Matrix> proj;
  for (std::size_t ch = 0; ch < gmms.size(); ++ch)
    proj.push_back(pca_project(state_.pca[ch], rec.channels[ch]));
  return fv_encode_image(gmms, proj).values;
}

const Vector& Trainer::cached_fv(std::size_t train_pos) {
  if (!fv_valid_[train_pos]) {
    fv_cache_[train_pos] =
        fv_encode_image(state_.gmm, projected_[train_pos]).values;
    fv_valid_[train_pos] = true;
  }
  return fv_cache_[train_pos];
}

void Trainer::invalidate_fv_cache() {
  std::fill(fv_valid_.begin(), fv_valid_.end(), false);
}

Matrix Trainer::batch_inputs(const BatchSample& batch) {
  // Fill missing cache entries first (parallel across images, deterministic).
  std::vector<std::size_t> missing;
  for (std::size_t pos : batch.indices)
    if (!fv_valid_[pos]) missing.push_back(pos);
  std::sort(missing.begin(), missing.end());
  missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
  parallel_for(missing.size(), state_.config.threads, [&](std::size_t i) {
    fv_cache_[missing[i]] =
        fv_encode_image(state_.gmm, projected_[missing[i]]).values;
  });
  for (std::size_t pos : missing) fv_valid_[pos] = true;

  Matrix inputs(static_cast<Index>(batch.indices.size()), state_.fv_dim());
  for (std::size_t i = 0; i < batch.indices.size(); ++i)
    inputs.row(static_cast<Index>(i)) = cached_fv(batch.indices[i]).transpose();
  return inputs;
}

Scalar Trainer::objective_from_hidden(const MatrixRef& hidden,
                                      const std::vector<int>& labels,
                                      std::vector<Scalar>* eigenvalues,
                                      Matrix* grad_hidden) {
  const TrainConfig& cfg = state_.config;
  if (!all_finite(hidden))
    throw NumericError(
        "divergence: non-finite hidden representation at epoch " +
        std::to_string(state_.epoch) + " (epoch loss history length " +
        std::to_string(state_.log.size()) + "); lower the learning rate");
  if (cfg.loss_kind == LossKind::kLda) {
    ScatterSet sc = scatter(hidden, labels);
    EigenSolution sol = lda_solve(sc, cfg.lambda_reg);
    LdaLoss loss = lda_loss(sol.eigenvalues, cfg.epsilon_offset);
    if (eigenvalues)
      eigenvalues->assign(sol.eigenvalues.data(),
                          sol.eigenvalues.data() + sol.eigenvalues.size());
    if (grad_hidden)
      *grad_hidden = lda_grad_hidden(hidden, labels, sol, loss.active_mask);
    return loss.loss;
  }

  // Cross-entropy ablation: objective is the negated loss so that "higher is
  // better" holds for both kinds.
  std::vector<int> class_idx(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = std::lower_bound(state_.class_labels.begin(),
                               state_.class_labels.end(), labels[i]);
    if (it == state_.class_labels.end() || *it != labels[i])
      throw DataError("objective: label " + std::to_string(labels[i]) +
                      " was not seen at initialization");
    class_idx[i] = static_cast<int>(it - state_.class_labels.begin());
  }
  Matrix logits =
      (hidden * state_.head_weight.transpose()).rowwise() +
      state_.head_bias.transpose();
  CrossEntropyResult ce = cross_entropy_loss(logits, class_idx);
  if (eigenvalues) eigenvalues->clear();
  if (grad_hidden) *grad_hidden = -(ce.grad * state_.head_weight);
  return -ce.loss;
}

Scalar Trainer::sample_objective(std::vector<Scalar>* eigenvalues) {
  if (!state_.initialized) throw ConsistencyError("sample_objective: untrained state");
  BatchSample batch;
  for (std::size_t pos : gmm_sample_) {
    batch.indices.push_back(pos);
    batch.labels.push_back(images_[train_idx_[pos]].label);
  }
  Matrix inputs = batch_inputs(batch);
  NetParams probe = state_.net;  // protect running statistics
  probe.dropout_rate = 0;
  Matrix hidden = forward(probe, inputs, Mode::kTrain, 0);
  return objective_from_hidden(hidden, batch.labels, eigenvalues, nullptr);
}

Scalar Trainer::candidate_objective(const std::vector<GmmModel>& gmms) {
  Matrix inputs(static_cast<Index>(gmm_sample_.size()), state_.fv_dim());
  std::vector<int> labels(gmm_sample_.size());
  std::vector<Vector> rows(gmm_sample_.size());
  parallel_for(gmm_sample_.size(), state_.config.threads, [&](std::size_t i) {
    rows[i] = fv_encode_image(gmms, projected_[gmm_sample_[i]]).values;
  });
  for (std::size_t i = 0; i < gmm_sample_.size(); ++i) {
    inputs.row(static_cast<Index>(i)) = rows[i].transpose();
    labels[i] = images_[train_idx_[gmm_sample_[i]]].label;
  }
  NetParams probe = state_.net;
  probe.dropout_rate = 0;
  Matrix hidden = forward(probe, inputs, Mode::kTrain, 0);
  return objective_from_hidden(hidden, labels, nullptr, nullptr);
}

ThetaStepMetrics Trainer::train_step_theta(const BatchSample& batch,
                                           std::uint64_t step_seed) {
  if (!state_.initialized) throw ConsistencyError("train_step_theta: untrained state");
  const TrainConfig& cfg = state_.config;
  Matrix inputs = batch_inputs(batch);

  ForwardTrace trace;
  Matrix hidden = forward(state_.net, inputs, Mode::kTrain, step_seed, &trace);

  ThetaStepMetrics metrics;
  Matrix d_hidden;
  Matrix head_w_grad;
  Vector head_b_grad;
  if (cfg.loss_kind == LossKind::kLda) {
    metrics.objective =
        objective_from_hidden(hidden, batch.labels, &metrics.eigenvalues, &d_hidden);
    d_hidden = -d_hidden;  // SGD minimizes the negated objective
  } else {
    std::vector<int> class_idx(batch.labels.size());
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      auto it = std::lower_bound(state_.class_labels.begin(),
                                 state_.class_labels.end(), batch.labels[i]);
      if (it == state_.class_labels.end() || *it != batch.labels[i])
        throw DataError("train_step_theta: unseen label " +
                        std::to_string(batch.labels[i]));
      class_idx[i] = static_cast<int>(it - state_.class_labels.begin());
    }
    Matrix logits = (hidden * state_.head_weight.transpose()).rowwise() +
                    state_.head_bias.transpose();
    CrossEntropyResult ce = cross_entropy_loss(logits, class_idx);
    metrics.objective = -ce.loss;
    head_w_grad = ce.grad.transpose() * hidden;
    head_b_grad = ce.grad.colwise().sum();
    d_hidden = ce.grad * state_.head_weight;
  }
  if (!std::isfinite(metrics.objective))
    throw NumericError("divergence: non-finite objective at epoch " +
                       std::to_string(state_.epoch));

  NetGradients grads = backward(state_.net, trace, d_hidden);

  Scalar lr = learning_rate_at(cfg, state_.epoch);
  auto nesterov = [&](auto& param, auto& velocity, const auto& grad) {
    velocity = cfg.momentum * velocity + grad;
    param -= lr * (grad + cfg.momentum * velocity);
  };

  for (std::size_t l = 0; l < state_.net.layers.size(); ++l) {
    Matrix gw = grads.layers[l].weight + cfg.weight_decay * state_.net.layers[l].weight;
    Vector gb = grads.layers[l].bias;
    if (cfg.weight_decay_all) gb += cfg.weight_decay * state_.net.layers[l].bias;
    if (!all_finite(gw) || !all_finite(gb))
      throw NumericError("divergence: non-finite gradient in layer " +
                         std::to_string(l) + " at epoch " +
                         std::to_string(state_.epoch));
    nesterov(state_.net.layers[l].weight, state_.vel_layers[l].weight, gw);
    nesterov(state_.net.layers[l].bias, state_.vel_layers[l].bias, gb);
  }
  if (state_.net.bn_enabled) {
    Vector gg = grads.bn_gamma;
    Vector gb = grads.bn_beta;
    if (cfg.weight_decay_all) {
      gg += cfg.weight_decay * state_.net.bn_gamma;
      gb += cfg.weight_decay * state_.net.bn_beta;
    }
    nesterov(state_.net.bn_gamma, state_.vel_bn_gamma, gg);
    nesterov(state_.net.bn_beta, state_.vel_bn_beta, gb);
  }
  if (cfg.loss_kind == LossKind::kCrossEntropy) {
    Matrix gw = head_w_grad + cfg.weight_decay * state_.head_weight;
    Vector gb = head_b_grad;
    if (cfg.weight_decay_all) gb += cfg.weight_decay * state_.head_bias;
    nesterov(state_.head_weight, state_.vel_head_weight, gw);
    nesterov(state_.head_bias, state_.vel_head_bias, gb);
  }
  return metrics;
}

Scalar line_search_best(const std::vector<Scalar>& grid, Scalar objective_at_zero,
                        const std::function<Scalar(Scalar)>& objective_at,
                        Scalar* best_objective) {
  Scalar best_eta = 0;
  Scalar best = objective_at_zero;
  bool any_finite = std::isfinite(objective_at_zero);
  for (Scalar eta : grid) {
    Scalar objective = objective_at(eta);
    if (!std::isfinite(objective)) continue;
    any_finite = true;
    if (!std::isfinite(best) || objective > best) {
      best = objective;
      best_eta = eta;
    }
  }
  if (!any_finite)
    throw NumericError("line search: every candidate objective is non-finite");
  if (best_objective) *best_objective = best;
  return best_eta;
}

GmmStepMetrics Trainer::train_step_gmm() {
  if (!state_.initialized) throw ConsistencyError("train_step_gmm: untrained state");
  const TrainConfig& cfg = state_.config;

  BatchSample batch;
  for (std::size_t pos : gmm_sample_) {
    batch.indices.push_back(pos);
    batch.labels.push_back(images_[train_idx_[pos]].label);
  }
  Matrix inputs = batch_inputs(batch);
  NetParams probe = state_.net;
  probe.dropout_rate = 0;
  ForwardTrace trace;
  Matrix hidden = forward(probe, inputs, Mode::kTrain, 0, &trace);

  Matrix d_hidden;
  Scalar objective0 = objective_from_hidden(hidden, batch.labels, nullptr, &d_hidden);
  if (!std::isfinite(objective0))
    throw NumericError("divergence: non-finite objective in GMM update at epoch " +
                       std::to_string(state_.epoch));
  NetGradients grads = backward(probe, trace, d_hidden);  // ascent direction

  // Accumulate the objective gradient on every channel's GMM parameters.
  std::vector<FvGmmGradient> deltas(state_.gmm.size());
  for (std::size_t ch = 0; ch < state_.gmm.size(); ++ch) {
    deltas[ch].d_log_weights = Vector::Zero(state_.gmm[ch].components());
    deltas[ch].d_means =
        Matrix::Zero(state_.gmm[ch].components(), state_.gmm[ch].dim());
    deltas[ch].d_log_vars = deltas[ch].d_means;
  }
  std::vector<std::vector<FvGmmGradient>> per_image(gmm_sample_.size());
  parallel_for(gmm_sample_.size(), cfg.threads, [&](std::size_t i) {
    Index offset = 0;
    std::vector<FvGmmGradient> local;
    for (std::size_t ch = 0; ch < state_.gmm.size(); ++ch) {
      Index len = 2 * state_.gmm[ch].components() * state_.gmm[ch].dim();
      Vector upstream = grads.input.row(static_cast<Index>(i)).segment(offset, len);
      local.push_back(fv_grad_gmm(
          state_.gmm[ch], projected_[gmm_sample_[i]][ch], upstream,
          cfg.gamma_threshold, cfg.subsample_fraction,
          seed_stream(state_.seed, 0x66D, static_cast<std::uint64_t>(state_.epoch),
                      i, ch)));
      offset += len;
    }
    per_image[i] = std::move(local);
  });
  for (std::size_t i = 0; i < per_image.size(); ++i)
    for (std::size_t ch = 0; ch < state_.gmm.size(); ++ch) {
      deltas[ch].d_log_weights += per_image[i][ch].d_log_weights;
      deltas[ch].d_means += per_image[i][ch].d_means;
      deltas[ch].d_log_vars += per_image[i][ch].d_log_vars;
    }

  auto make_candidate = [&](Scalar eta) {
    std::vector<GmmModel> candidate = state_.gmm;
    for (std::size_t ch = 0; ch < candidate.size(); ++ch) {
      candidate[ch].log_weights_unnorm += eta * deltas[ch].d_log_weights;
      candidate[ch].means += eta * deltas[ch].d_means;
      candidate[ch].log_vars += eta * deltas[ch].d_log_vars;
      candidate[ch].clamp_variances();
    }
    return candidate;
  };

  GmmStepMetrics metrics;
  metrics.objective_eta0 = objective0;
  metrics.eta = line_search_best(
      cfg.line_search_grid, objective0,
      [&](Scalar eta) { return candidate_objective(make_candidate(eta)); },
      &metrics.objective_adopted);
  if (metrics.eta > 0) {
    state_.gmm = make_candidate(metrics.eta);
    invalidate_fv_cache();
    metrics.updated = true;
  }
  return metrics;
}

void Trainer::run() {
  initialize();
  const TrainConfig& cfg = state_.config;
  std::vector<int> train_labels;
  for (std::size_t i : train_idx_) train_labels.push_back(images_[i].label);

  while (state_.epoch < cfg.epochs) {
    int epoch = state_.epoch;
    std::size_t batches = std::max<std::size_t>(
        1, train_idx_.size() / static_cast<std::size_t>(cfg.batch_size));
    for (std::size_t b = 0; b < batches; ++b) {
      BatchSample batch = sample_batch(
          train_labels, cfg.batch_size, cfg.min_per_class,
          seed_stream(state_.seed, 0xBA7C, static_cast<std::uint64_t>(epoch), b));
      train_step_theta(batch,
                       seed_stream(state_.seed, 0x57E9,
                                   static_cast<std::uint64_t>(epoch), b));
    }

    LogRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = learning_rate_at(cfg, epoch);
    if ((epoch + 1) % cfg.gmm_update_period_epochs == 0) {
      GmmStepMetrics gm = train_step_gmm();
      rec.eta = gm.eta;
      rec.gmm_objective_eta0 = gm.objective_eta0;
      rec.gmm_objective_adopted = gm.objective_adopted;
    }
    std::vector<Scalar> eigs;
    Scalar objective = sample_objective(&eigs);
    rec.loss = cfg.loss_kind == LossKind::kCrossEntropy ? -objective : objective;
    rec.eigenvalues = std::move(eigs);
    state_.log.push_back(std::move(rec));
    state_.epoch = epoch + 1;

    if (cfg.early_stop &&
        static_cast<int>(state_.log.size()) > cfg.early_stop_window) {
      std::size_t last = state_.log.size() - 1;
      Scalar recent = state_.log[last].loss;
      Scalar past = state_.log[last - static_cast<std::size_t>(cfg.early_stop_window)].loss;
      if (std::abs(recent - past) < cfg.early_stop_tol) break;
    }
  }
}

Matrix Trainer::embed(const std::vector<std::size_t>& image_indices) {
  if (!state_.initialized) throw ConsistencyError("embed: untrained state");
  Matrix inputs(static_cast<Index>(image_indices.size()), state_.fv_dim());
  std::vector<Vector> rows(image_indices.size());
  parallel_for(image_indices.size(), state_.config.threads, [&](std::size_t i) {
    rows[i] = encode_image_fv(image_indices[i], state_.gmm);
  });
  for (std::size_t i = 0; i < image_indices.size(); ++i)
    inputs.row(static_cast<Index>(i)) = rows[i].transpose();
  Matrix hidden = forward(state_.net, inputs, Mode::kEval, 0);
  l2_normalize_rows(hidden);
  return hidden;
}

TrainState fit(const TrainConfig& config, const Manifest& manifest) {
  std::vector<ImageRecord> images = load_images(manifest, config.channels);
  Trainer trainer(config, images);
  trainer.run();
  return trainer.state();
}

}  // namespace deepfv
