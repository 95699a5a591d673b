#ifndef DEEPFV_TRAINER_HPP_
#define DEEPFV_TRAINER_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "deepfv/dataset.hpp"
#include "deepfv/gmm.hpp"
#include "deepfv/net.hpp"
#include "deepfv/types.hpp"

namespace deepfv {

// One named slice of the raw descriptor columns, with its own PCA and GMM.
struct ChannelConfig {
  std::string name;
  Index raw_dim = 0;  // columns consumed from the descriptor file
  Index pca_dim = 0;
  Index gmm_k = 256;
};

enum class LossKind { kLda, kCrossEntropy };

struct TrainConfig {
  Index batch_size = 128;
  int min_per_class = 2;
  Scalar lr_init = 0.05;
  Scalar momentum = 0.9;
  Scalar weight_decay = 1e-4;
  bool weight_decay_all = false;  // also decay biases and batch-norm scales
  int lr_halving_period_epochs = 50;
  int epochs = 100;
  Scalar lambda_reg = 1e-3;
  Scalar epsilon_offset = 1.0;
  int gmm_update_period_epochs = 5;
  std::vector<Scalar> line_search_grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  Scalar gamma_threshold = 1e-5;
  Scalar subsample_fraction = 0.10;
  LossKind loss_kind = LossKind::kLda;
  std::uint64_t seed = 0;

  std::vector<ChannelConfig> channels;
  std::vector<Index> widths = {4096, 1024, 1024};
  Scalar dropout_rate = 0.2;
  bool bn_enabled = true;
  Index gmm_sample_size = 256;  // held-in sample for G-updates and logging
  int em_max_iters = 100;
  Scalar em_tol = 1e-6;
  bool early_stop = false;
  Scalar early_stop_tol = 1e-5;
  int early_stop_window = 10;
  int threads = 1;

  void validate() const;
};

// lr(epoch) = lr_init * 2^(-floor(epoch / period)), epoch counted from 0.
Scalar learning_rate_at(const TrainConfig& config, int epoch);

struct LogRecord {
  int epoch = 0;  // 0 = state before any update
  Scalar loss = 0;
  Scalar lr = 0;
  std::vector<Scalar> eigenvalues;
  std::optional<Scalar> eta;  // line-search step adopted this epoch, if any
  // Diagnostics kept in memory and in checkpoints, not in the NDJSON log.
  Scalar gmm_objective_eta0 = 0;
  Scalar gmm_objective_adopted = 0;
};

std::string log_record_to_json(const LogRecord& rec);

struct TrainState {
  TrainConfig config;
  std::vector<PcaModel> pca;  // per channel
  std::vector<GmmModel> gmm;  // per channel
  NetParams net;
  // Classifier head, used only with the cross-entropy loss.
  Matrix head_weight;  // C x d_out
  Vector head_bias;    // C
  std::vector<int> class_labels;  // train label per head row / class index

  // Nesterov momentum buffers, aligned with the parameters they damp.
  std::vector<NetLayer> vel_layers;
  Vector vel_bn_gamma, vel_bn_beta;
  Matrix vel_head_weight;
  Vector vel_head_bias;

  int epoch = 0;  // completed training epochs
  std::uint64_t seed = 0;
  bool initialized = false;
  std::vector<LogRecord> log;

  Index fv_dim() const;  // concatenated Fisher vector length
};

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

// One image loaded in memory, descriptor columns already split per channel.
struct ImageRecord {
  std::string id;
  int label = 0;
  int camera = 0;
  Split split = Split::kTrain;
  std::vector<Matrix> channels;
};

std::vector<ImageRecord> load_images(const Manifest& manifest,
                                     const std::vector<ChannelConfig>& channels);

struct BatchSample {
  std::vector<std::size_t> indices;  // into the sampled pool
  std::vector<int> labels;
};

// Class-balanced batch: every sampled class appears at least `min_per_class`
// times. Deterministic under the seed.
BatchSample sample_batch(const std::vector<int>& labels, Index batch_size,
                         int min_per_class, std::uint64_t seed);

// Manifest-level convenience: samples from one split and reports image ids.
std::pair<std::vector<std::string>, std::vector<int>> sample_batch(
    const Manifest& manifest, Split split, Index batch_size, int min_per_class,
    std::uint64_t seed);

// Grid search over candidate steps, eta = 0 always included; returns the step
// whose objective is best, preferring the smaller step on ties (so a flat
// objective means "no update"). Non-finite candidates are skipped; if every
// value including eta = 0 is non-finite this throws.
Scalar line_search_best(const std::vector<Scalar>& grid, Scalar objective_at_zero,
                        const std::function<Scalar(Scalar)>& objective_at,
                        Scalar* best_objective = nullptr);

struct ThetaStepMetrics {
  Scalar objective = 0;  // mean active eigenvalue (LDA) or -loss (CE)
  std::vector<Scalar> eigenvalues;
};

struct GmmStepMetrics {
  Scalar eta = 0;
  Scalar objective_eta0 = 0;
  Scalar objective_adopted = 0;
  bool updated = false;
};

// Drives Algorithm-style alternating training: per-epoch SGD (Nesterov) on
// the supervised layers against the negated objective, and periodic
// line-searched gradient steps on the log-reparametrized GMM parameters.
// Fisher vectors are cached per image and invalidated only by GMM updates.
class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<ImageRecord> images);
  Trainer(TrainState state, std::vector<ImageRecord> images);  // resume

  // PCA + EM + network setup. No-op when resuming an initialized state.
  void initialize();

  ThetaStepMetrics train_step_theta(const BatchSample& batch,
                                    std::uint64_t step_seed);
  GmmStepMetrics train_step_gmm();

  // Trains up to config.epochs (no-op if already there).
  void run();

  // Objective on the fixed held-in sample, deterministic forward.
  Scalar sample_objective(std::vector<Scalar>* eigenvalues = nullptr);

  // Eval-mode embeddings (rows L2-normalized) for arbitrary images.
  Matrix embed(const std::vector<std::size_t>& image_indices);

  const TrainState& state() const { return state_; }
  TrainState& mutable_state() { return state_; }
  const std::vector<ImageRecord>& images() const { return images_; }
  const std::vector<std::size_t>& train_indices() const { return train_idx_; }
  const std::vector<std::size_t>& test_indices() const { return test_idx_; }

 private:
  Vector encode_image_fv(std::size_t image_index,
                         const std::vector<GmmModel>& gmms) const;
  const Vector& cached_fv(std::size_t train_pos);
  Matrix batch_inputs(const BatchSample& batch);
  Scalar objective_from_hidden(const MatrixRef& hidden,
                               const std::vector<int>& labels,
                               std::vector<Scalar>* eigenvalues,
                               Matrix* grad_hidden);
  Scalar candidate_objective(const std::vector<GmmModel>& gmms);
  void invalidate_fv_cache();
  void project_all();
  void pick_gmm_sample();

  TrainState state_;
  std::vector<ImageRecord> images_;
  std::vector<std::size_t> train_idx_, test_idx_;
  // Per train image: projected channels and the cached concatenated FV.
  std::vector<std::vector<Matrix>> projected_;  // indexed like train_idx_
  std::vector<Vector> fv_cache_;
  std::vector<bool> fv_valid_;
  std::vector<std::size_t> gmm_sample_;  // train positions, fixed at init
};

// End-to-end: load images, initialize, train, return the final state with its
// full log.
TrainState fit(const TrainConfig& config, const Manifest& manifest);

// TrainConfig <-> flat JSON (used by the config file and the checkpoint).
std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

}  // namespace deepfv

#endif  // DEEPFV_TRAINER_HPP_
