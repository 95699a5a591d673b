#include "deepfv/net.hpp"

#include <cmath>

#include "deepfv/rng.hpp"

namespace deepfv {

void NetParams::validate() const {
  if (layers.empty()) throw ConsistencyError("NetParams: no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].bias.size() != layers[l].weight.rows())
      throw ConsistencyError("NetParams: bias/weight mismatch in layer " +
                             std::to_string(l));
    if (l > 0 && layers[l].weight.cols() != layers[l - 1].weight.rows())
      throw ConsistencyError("NetParams: layer dims do not chain at layer " +
                             std::to_string(l));
    if (!all_finite(layers[l].weight) || !all_finite(layers[l].bias))
      throw NumericError("NetParams: non-finite parameters");
  }
  if (bn_enabled) {
    Index w = layers.back().weight.rows();
    if (bn_gamma.size() != w || bn_beta.size() != w ||
        bn_running_mean.size() != w || bn_running_var.size() != w)
      throw ConsistencyError("NetParams: batch-norm width mismatch");
    if ((bn_running_var.array() <= 0).any())
      throw NumericError("NetParams: running variance must stay positive");
  }
  if (!(dropout_rate >= 0 && dropout_rate < 1))
    throw ConsistencyError("NetParams: dropout rate must be in [0,1)");
}

NetParams net_init(Index in_dim, const std::vector<Index>& widths,
                   Scalar dropout_rate, bool bn_enabled, std::uint64_t seed) {
  if (widths.empty()) throw DataError("net_init: need at least one layer");
  NetParams params;
  params.dropout_rate = dropout_rate;
  params.bn_enabled = bn_enabled;
  Rng rng(seed_stream(seed, 0x4E31));
  Index in = in_dim;
  for (Index w : widths) {
    NetLayer layer;
    layer.weight.resize(w, in);
    Scalar bound = std::sqrt(6.0 / static_cast<Scalar>(in));
    for (Index i = 0; i < w; ++i)
      for (Index j = 0; j < in; ++j)
        layer.weight(i, j) = rng.uniform(-bound, bound);
    layer.bias = Vector::Zero(w);
    params.layers.push_back(std::move(layer));
    in = w;
  }
  Index last = widths.back();
  params.bn_gamma = Vector::Ones(last);
  params.bn_beta = Vector::Zero(last);
  params.bn_running_mean = Vector::Zero(last);
  params.bn_running_var = Vector::Ones(last);
  return params;
}

Matrix forward(NetParams& params, const MatrixRef& batch, Mode mode,
               std::uint64_t seed, ForwardTrace* trace) {
  params.validate();
  if (batch.cols() != params.in_dim())
    throw DimensionError("forward: batch width " + std::to_string(batch.cols()) +
                         " does not match net input " +
                         std::to_string(params.in_dim()));
  const Index n = batch.rows();
  if (mode == Mode::kTrain && n < 2)
    throw DataError("forward: train mode needs a batch of at least 2");

  const std::size_t num_layers = params.layers.size();
  ForwardTrace local;
  ForwardTrace& t = trace ? *trace : local;
  t.mode = mode;
  t.input = batch;
  t.pre_acts.assign(num_layers, Matrix());
  t.post_acts.assign(num_layers, Matrix());
  t.dropout_masks.assign(num_layers, Matrix());

  Rng drop_rng(seed_stream(seed, 0xD409));
  Matrix x = batch;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const NetLayer& layer = params.layers[l];
    Matrix z = (x * layer.weight.transpose()).rowwise() + layer.bias.transpose();
    t.pre_acts[l] = z;
    Matrix a = z.cwiseMax(Scalar(0));
    bool apply_dropout = mode == Mode::kTrain && params.dropout_rate > 0 &&
                         l + 1 < num_layers;
    if (apply_dropout) {
      Matrix mask(a.rows(), a.cols());
      for (Index i = 0; i < mask.rows(); ++i)
        for (Index j = 0; j < mask.cols(); ++j)
          mask(i, j) = drop_rng.uniform() >= params.dropout_rate ? 1.0 : 0.0;
      t.dropout_masks[l] = mask;
      a = a.cwiseProduct(mask) / (1 - params.dropout_rate);
    }
    t.post_acts[l] = a;
    x = a;
  }

  if (!params.bn_enabled) return x;

  if (mode == Mode::kTrain) {
    Vector mean = x.colwise().mean();
    Matrix centered = x.rowwise() - mean.transpose();
    Vector var = centered.array().square().colwise().mean();  // biased
    t.bn_batch_mean = mean;
    t.bn_batch_var = var;
    Matrix x_hat = centered.array().rowwise() /
                   (var.array() + params.bn_epsilon).sqrt().transpose();
    t.bn_normalized = x_hat;
    // Unbiased variance feeds the running estimate.
    Vector var_unbiased = var * (static_cast<Scalar>(n) / static_cast<Scalar>(n - 1));
    params.bn_running_mean =
        params.bn_momentum * params.bn_running_mean + (1 - params.bn_momentum) * mean;
    params.bn_running_var = params.bn_momentum * params.bn_running_var +
                            (1 - params.bn_momentum) * var_unbiased;
    return (x_hat.array().rowwise() * params.bn_gamma.transpose().array())
               .rowwise() +
           params.bn_beta.transpose().array();
  }

  Matrix x_hat =
      (x.rowwise() - params.bn_running_mean.transpose()).array().rowwise() /
      (params.bn_running_var.array() + params.bn_epsilon).sqrt().transpose();
  return (x_hat.array().rowwise() * params.bn_gamma.transpose().array())
             .rowwise() +
         params.bn_beta.transpose().array();
}

NetGradients backward(const NetParams& params, const ForwardTrace& trace,
                      const MatrixRef& upstream) {
  const std::size_t num_layers = params.layers.size();
  if (trace.pre_acts.size() != num_layers)
    throw ConsistencyError("backward: trace does not match params");
  const Index n = trace.input.rows();
  if (upstream.rows() != n || upstream.cols() != params.out_dim())
    throw ConsistencyError("backward: upstream shape does not match trace");

  NetGradients grads;
  grads.layers.resize(num_layers);

  Matrix d = upstream;
  if (params.bn_enabled) {
    if (trace.mode == Mode::kTrain) {
      if (trace.bn_normalized.rows() != n)
        throw ConsistencyError("backward: trace lacks batch-norm intermediates");
      const Matrix& x_hat = trace.bn_normalized;
      grads.bn_gamma = (d.array() * x_hat.array()).colwise().sum();
      grads.bn_beta = d.colwise().sum();
      Vector inv_std =
          (trace.bn_batch_var.array() + params.bn_epsilon).rsqrt();
      Matrix d_xhat = d.array().rowwise() * params.bn_gamma.transpose().array();
      // Through the batch statistics (biased variance, divisor N):
      // dx = inv_std/N * (N d_xhat - sum(d_xhat) - x_hat * sum(d_xhat*x_hat)).
      Vector sum_dxhat = d_xhat.colwise().sum();
      Vector sum_dxhat_xhat = (d_xhat.array() * x_hat.array()).colwise().sum();
      Matrix dx = (d_xhat * static_cast<Scalar>(n)).rowwise() -
                  sum_dxhat.transpose();
      dx -= (x_hat.array().rowwise() * sum_dxhat_xhat.transpose().array()).matrix();
      d = (dx.array().rowwise() *
           (inv_std.transpose().array() / static_cast<Scalar>(n)))
              .matrix();
    } else {
      grads.bn_gamma =
          (d.array() *
           ((trace.post_acts.back().rowwise() -
             params.bn_running_mean.transpose())
                .array()
                .rowwise() /
            (params.bn_running_var.array() + params.bn_epsilon)
                .sqrt()
                .transpose()))
              .colwise()
              .sum();
      grads.bn_beta = d.colwise().sum();
      d = d.array().rowwise() *
          (params.bn_gamma.array() /
           (params.bn_running_var.array() + params.bn_epsilon).sqrt())
              .transpose();
    }
  } else {
    grads.bn_gamma = Vector();
    grads.bn_beta = Vector();
  }

  for (std::size_t l = num_layers; l-- > 0;) {
    if (trace.dropout_masks[l].size() > 0)
      d = d.cwiseProduct(trace.dropout_masks[l]) / (1 - params.dropout_rate);
    d = (trace.pre_acts[l].array() > 0).select(d, Matrix::Zero(d.rows(), d.cols()));
    const Matrix& layer_in = l == 0 ? trace.input : trace.post_acts[l - 1];
    grads.layers[l].weight = d.transpose() * layer_in;
    grads.layers[l].bias = d.colwise().sum();
    d = d * params.layers[l].weight;
  }
  grads.input = d;
  return grads;
}

CrossEntropyResult cross_entropy_loss(const MatrixRef& logits,
                                      const std::vector<int>& labels) {
  const Index n = logits.rows();
  const Index c = logits.cols();
  if (static_cast<Index>(labels.size()) != n)
    throw DimensionError("cross_entropy_loss: label count does not match batch");
  CrossEntropyResult out;
  out.grad.resize(n, c);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c)
      throw DataError("cross_entropy_loss: label " + std::to_string(y) +
                      " out of range [0," + std::to_string(c) + ")");
    Scalar mx = logits.row(i).maxCoeff();
    Vector shifted = logits.row(i).transpose().array() - mx;
    Scalar lse = std::log(shifted.array().exp().sum());
    total += -(shifted(y) - lse);
    out.grad.row(i) =
        ((shifted.array() - lse).exp() / static_cast<Scalar>(n)).transpose();
    out.grad(i, y) -= 1.0 / static_cast<Scalar>(n);
  }
  out.loss = total / static_cast<Scalar>(n);
  return out;
}

}  // namespace deepfv
