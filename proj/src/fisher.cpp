#include "deepfv/fisher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deepfv/rng.hpp"

namespace deepfv {

FisherVector fv_encode(const GmmModel& model, const MatrixRef& descriptors) {
  const Index k = model.components();
  const Index d = model.dim();
  const Index m = descriptors.rows();
  if (descriptors.cols() != d)
    throw DimensionError("fv_encode: descriptor dim " +
                         std::to_string(descriptors.cols()) +
                         " does not match model dim " + std::to_string(d));
  if (m < 1) throw DataError("fv_encode: empty descriptor set");

  Matrix gamma = posteriors_batch(model, descriptors);  // M x K
  Matrix sigma = model.stddevs();
  Vector pi = model.weights();

  FisherVector fv;
  fv.values = Vector::Zero(2 * k * d);
  fv.normalized = false;
  for (Index c = 0; c < k; ++c) {
    Matrix alpha = (descriptors.rowwise() - model.means.row(c)).array().rowwise() /
                   sigma.row(c).array();  // M x D
    Vector phi =
        (alpha.array().colwise() * gamma.col(c).array()).colwise().sum() /
        (static_cast<Scalar>(m) * std::sqrt(pi(c)));
    Vector psi = ((alpha.array().square() - 1).colwise() * gamma.col(c).array())
                     .colwise()
                     .sum() /
                 (static_cast<Scalar>(m) * std::sqrt(2 * pi(c)));
    fv.values.segment(c * d, d) = phi;
    fv.values.segment(k * d + c * d, d) = psi;
  }
  return fv;
}

FisherVector fv_normalize(const FisherVector& fv, bool* zero_input) {
  if (fv.normalized)
    throw ConsistencyError("fv_normalize: input is already normalized");
  if (zero_input) *zero_input = false;
  Scalar l1 = fv.values.lpNorm<1>();
  FisherVector out;
  out.normalized = true;
  if (l1 == 0) {
    out.values = Vector::Zero(fv.values.size());
    if (zero_input) *zero_input = true;
    return out;
  }
  Scalar scale = 1.0 / std::sqrt(l1);
  out.values = fv.values.array().sign() * fv.values.array().abs().sqrt() * scale;
  return out;
}

FisherVector fv_encode_image(const std::vector<GmmModel>& models,
                             const std::vector<Matrix>& channels) {
  if (models.size() != channels.size())
    throw DimensionError("fv_encode_image: channel count does not match model count");
  Index total = 0;
  for (const auto& model : models) total += 2 * model.components() * model.dim();
  FisherVector out;
  out.values.resize(total);
  out.normalized = true;
  Index offset = 0;
  for (std::size_t ch = 0; ch < models.size(); ++ch) {
    FisherVector fv = fv_normalize(fv_encode(models[ch], channels[ch]));
    out.values.segment(offset, fv.values.size()) = fv.values;
    offset += fv.values.size();
  }
  return out;
}

FvGmmGradient fv_grad_gmm(const GmmModel& model, const MatrixRef& descriptors,
                          const VectorRef& upstream, Scalar gamma_threshold,
                          Scalar subsample_fraction, std::uint64_t seed) {
  const Index k = model.components();
  const Index d = model.dim();
  const Index m = descriptors.rows();
  if (descriptors.cols() != d)
    throw DimensionError("fv_grad_gmm: descriptor dim does not match model");
  if (upstream.size() != 2 * k * d)
    throw DimensionError("fv_grad_gmm: upstream length " +
                         std::to_string(upstream.size()) + " != 2KD = " +
                         std::to_string(2 * k * d));
  if (!(subsample_fraction > 0 && subsample_fraction <= 1))
    throw DataError("fv_grad_gmm: subsample_fraction must be in (0, 1]");

  // The normalization chain needs the full aggregated (unnormalized) vector;
  // only the parameter gradient itself is subsample-estimated.
  Vector agg = fv_encode(model, descriptors).values;
  Scalar l1 = agg.lpNorm<1>();

  // Pull the upstream back through
  //   norm(v)_d = sign(v_d) sqrt(|v_d|) / sqrt(||v||_1):
  //   d norm_d = norm_d * (dv_d / (2 v_d) - sum_e sign(v_e) dv_e / (2 l1)).
  Vector u_raw = Vector::Zero(2 * k * d);
  if (l1 > 0) {
    Scalar inv_sqrt_l1 = 1.0 / std::sqrt(l1);
    Scalar cross = 0;  // sum_d upstream_d * norm_d
    for (Index i = 0; i < agg.size(); ++i)
      if (agg(i) != 0)
        cross += upstream(i) * std::copysign(std::sqrt(std::abs(agg(i))), agg(i)) *
                 inv_sqrt_l1;
    for (Index i = 0; i < agg.size(); ++i) {
      if (agg(i) == 0) continue;  // kink of sign(v)sqrt|v|; measure-zero
      Scalar norm_i = std::copysign(std::sqrt(std::abs(agg(i))), agg(i)) * inv_sqrt_l1;
      u_raw(i) = upstream(i) * norm_i / (2 * agg(i)) -
                 std::copysign(1.0, agg(i)) * cross / (2 * l1);
    }
  }

  // Seeded subsample without replacement; the average over the subset is the
  // rescaled estimate of the average over all descriptors.
  std::vector<Index> selected(static_cast<std::size_t>(m));
  std::iota(selected.begin(), selected.end(), Index{0});
  if (subsample_fraction < 1) {
    Rng rng(seed_stream(seed, 0x5AB5));
    rng.shuffle(selected);
    std::size_t keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::lround(subsample_fraction * static_cast<double>(m))));
    selected.resize(std::min(selected.size(), keep));
    std::sort(selected.begin(), selected.end());
  }

  Vector pi = model.weights();
  Matrix sigma = model.stddevs();
  Vector inv_sqrt_pi = pi.array().rsqrt();
  Vector inv_sqrt_2pi = (2 * pi.array()).rsqrt();

  // Upstream split into the phi and psi blocks, as K x D grids.
  Matrix u_phi(k, d), u_psi(k, d);
  for (Index c = 0; c < k; ++c) {
    u_phi.row(c) = u_raw.segment(c * d, d).transpose();
    u_psi.row(c) = u_raw.segment(k * d + c * d, d).transpose();
  }

  FvGmmGradient grad;
  grad.d_log_weights = Vector::Zero(k);
  grad.d_means = Matrix::Zero(k, d);
  grad.d_log_vars = Matrix::Zero(k, d);

  Matrix alpha(k, d);
  for (Index row : selected) {
    Vector gamma = posteriors(model, descriptors.row(row).transpose());
    // gamma_act carries the acceleration contract: Fisher-vector rows whose
    // posterior is at or below the threshold contribute nothing.
    Vector gamma_act =
        (gamma.array() > gamma_threshold).select(gamma, Vector::Zero(k));
    for (Index c = 0; c < k; ++c)
      alpha.row(c) = (descriptors.row(row) - model.means.row(c)).array() /
                     sigma.row(c).array();

    Matrix phi = (alpha.array().colwise() *
                  (gamma_act.array() * inv_sqrt_pi.array()))
                     .matrix();
    Matrix psi = ((alpha.array().square() - 1).colwise() *
                  (gamma_act.array() * inv_sqrt_2pi.array()))
                     .matrix();

    Vector t_phi = (u_phi.array() * phi.array()).rowwise().sum();
    Vector t_psi = (u_psi.array() * psi.array()).rowwise().sum();
    Vector t = t_phi + t_psi;
    Scalar t_sum = t.sum();

    // Unnormalized-weight gradient, chained onto log pi~:
    //   d/d log pi~_k = pi_k * sum_k' T_k' (pi_k + delta_kk' - 2 gamma_k) / (2 pi_k).
    grad.d_log_weights.array() +=
        ((pi.array() - 2 * gamma.array()) * t_sum + t.array()) / 2;

    for (Index c = 0; c < k; ++c) {
      Scalar couple = t(c) - gamma(c) * t_sum;
      grad.d_means.row(c).array() +=
          alpha.row(c).array() / sigma.row(c).array() * couple -
          gamma_act(c) / sigma.row(c).array() *
              (u_phi.row(c).array() * inv_sqrt_pi(c) +
               2 * u_psi.row(c).array() * alpha.row(c).array() * inv_sqrt_2pi(c));
      // d/d log sigma^2 = (sigma / 2) * d/d sigma.
      grad.d_log_vars.row(c).array() +=
          (alpha.row(c).array().square() - 1) / 2 * couple -
          (u_phi.row(c).array() * phi.row(c).array() +
           2 * u_psi.row(c).array() * gamma_act(c) *
               alpha.row(c).array().square() * inv_sqrt_2pi(c)) /
              2;
    }
  }

  Scalar inv = 1.0 / static_cast<Scalar>(selected.size());
  grad.d_log_weights *= inv;
  grad.d_means *= inv;
  grad.d_log_vars *= inv;
  return grad;
}

}  // namespace deepfv
