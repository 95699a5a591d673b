#ifndef DEEPFV_NET_HPP_
#define DEEPFV_NET_HPP_

#include <cstdint>
#include <vector>

#include "deepfv/types.hpp"

namespace deepfv {

// Fully connected stack: x_l = relu(W_l x_{l-1} + b_l), inverted dropout on
// every hidden activation except the last, batch normalization after the
// last layer. Parameters live in plain dense matrices so the optimizer can
// treat them uniformly.
struct NetLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct NetParams {
  std::vector<NetLayer> layers;
  bool bn_enabled = true;
  Vector bn_gamma, bn_beta;            // last-layer width
  Vector bn_running_mean, bn_running_var;
  Scalar bn_momentum = 0.9;            // running = momentum*running + (1-momentum)*batch
  Scalar bn_epsilon = 1e-5;
  Scalar dropout_rate = 0.0;

  Index in_dim() const { return layers.front().weight.cols(); }
  Index out_dim() const { return layers.back().weight.rows(); }
  void validate() const;
};

// He-scaled uniform weights, zero biases, identity batch norm.
NetParams net_init(Index in_dim, const std::vector<Index>& widths,
                   Scalar dropout_rate, bool bn_enabled, std::uint64_t seed);

enum class Mode { kTrain, kEval };

// Everything the backward pass needs about one forward evaluation.
struct ForwardTrace {
  Mode mode = Mode::kTrain;
  Matrix input;                       // N x in_dim
  std::vector<Matrix> pre_acts;       // per layer, N x out_l
  std::vector<Matrix> post_acts;      // per layer, after relu (+ dropout)
  std::vector<Matrix> dropout_masks;  // kept entries 1, dropped 0 (train only)
  // Batch-norm intermediates (train mode).
  Vector bn_batch_mean, bn_batch_var;  // biased variance
  Matrix bn_normalized;                // x_hat
};

// Train mode draws dropout masks from the seed only (not from the values), so
// finite differencing a seeded forward is well defined; it also updates the
// running batch-norm statistics in place. Eval mode is deterministic and uses
// the running statistics.
Matrix forward(NetParams& params, const MatrixRef& batch, Mode mode,
               std::uint64_t seed, ForwardTrace* trace = nullptr);

struct NetGradients {
  std::vector<NetLayer> layers;  // same shapes as params.layers
  Vector bn_gamma, bn_beta;
  Matrix input;  // N x in_dim
};

// Exact gradients of the traced computation, including through the batch-norm
// batch statistics and the stored dropout masks.
NetGradients backward(const NetParams& params, const ForwardTrace& trace,
                      const MatrixRef& upstream);

struct CrossEntropyResult {
  Scalar loss = 0;
  Matrix grad;  // N x C, gradient of the mean loss w.r.t. the logits
};

// Mean over the batch of -log softmax(logits)[label].
CrossEntropyResult cross_entropy_loss(const MatrixRef& logits,
                                      const std::vector<int>& labels);

}  // namespace deepfv

#endif  // DEEPFV_NET_HPP_
