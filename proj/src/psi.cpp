//
//  psi.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/psi.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <random>
#include <vector>

#include "drgp/simd.hpp"

namespace drgp {

// ---------------------------------------------------------------------------
// Validation

void VariationalParams::validate_weights(Index M) const {
    require(weight_mean.size() == M, "variational params: weight_mean must have size M");
    require(weight_cov.rows() == M && weight_cov.cols() == M,
            "variational params: weight_cov must be M x M");
    require((weight_cov - weight_cov.transpose()).lpNorm<Eigen::Infinity>() <=
                1e-12 * (1.0 + weight_cov.lpNorm<Eigen::Infinity>()),
            "variational params: weight_cov must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(weight_cov);
    require_domain(es.eigenvalues().minCoeff() >= -1e-10 * (1.0 + weight_cov.trace()),
                   "variational params: weight_cov must be PSD");
}

void VariationalParams::validate_spectral(const SpectralLayerHyper& hyper) const {
    require(spectral_means.rows() == hyper.num_features &&
                spectral_means.cols() == hyper.input_dim(),
            "variational params: spectral_means must be M x Q");
    require(spectral_vars.rows() == hyper.num_features &&
                spectral_vars.cols() == hyper.input_dim(),
            "variational params: spectral_vars must be M x Q");
    require_domain((spectral_vars.array() > 0.0).all(),
                   "variational params: spectral_vars must be strictly positive");
}

void VariationalParams::validate_latents() const {
    require(latent_means.size() == latent_vars.size(),
            "variational params: latent mean/var size mismatch");
    require_domain((latent_vars.array() > 0.0).all(),
                   "variational params: latent_vars must be strictly positive");
}

void StateInputs::validate() const {
    require(mean.rows() == var.rows() && mean.cols() == var.cols(),
            "state inputs: mean/var shape mismatch");
    require_domain((var.array() >= 0.0).all(), "state inputs: negative variance");
}

// ---------------------------------------------------------------------------
// Frequency distributions and window assembly

FrequencyDist frequencies_fixed(const SpectralPoints& points,
                                const SpectralLayerHyper& hyper) {
    points.validate_against(hyper);
    return {frequency_matrix(points.Z, hyper),
            Matrix::Zero(hyper.num_features, hyper.input_dim())};
}

FrequencyDist frequencies_variational(const Matrix& alpha, const Matrix& beta,
                                      const SpectralLayerHyper& hyper) {
    require(alpha.rows() == hyper.num_features && alpha.cols() == hyper.input_dim(),
            "frequencies: alpha must be M x Q");
    require(beta.rows() == alpha.rows() && beta.cols() == alpha.cols(),
            "frequencies: beta must be M x Q");
    require_domain((beta.array() > 0.0).all(), "frequencies: beta must be positive");
    FrequencyDist f;
    f.mean = frequency_matrix(alpha, hyper);
    f.var = beta.array().rowwise() /
            hyper.lengthscales.array().square().transpose();
    return f;
}

StateInputs lagged_inputs(const Vector& latent_means, const Vector& latent_vars,
                          Index hidden_lags, const std::optional<Matrix>& exogenous,
                          Index exo_lags) {
    require(latent_means.size() == latent_vars.size(), "lagged_inputs: size mismatch");
    require(hidden_lags >= 0 && exo_lags >= 0, "lagged_inputs: negative lag count");
    require(hidden_lags + exo_lags > 0, "lagged_inputs: empty window");
    const Index K = latent_means.size();
    const Index Qx = exogenous ? exogenous->cols() : 0;
    if (exo_lags > 0) {
        require(exogenous.has_value(), "lagged_inputs: exo_lags without exogenous data");
        require(exogenous->rows() == K, "lagged_inputs: exogenous row count mismatch");
    }

    StateInputs si;
    si.mean = Matrix::Zero(K, hidden_lags + exo_lags * Qx);
    si.var = Matrix::Zero(K, si.mean.cols());
    for (Index k = 0; k < K; ++k) {
        for (Index j = 1; j <= hidden_lags; ++j) {
            if (k - j < 0) continue;  // zero padding before the first state
            si.mean(k, j - 1) = latent_means[k - j];
            si.var(k, j - 1) = latent_vars[k - j];
        }
        for (Index j = 1; j <= exo_lags; ++j) {
            if (k - j < 0) continue;
            si.mean.row(k).segment(hidden_lags + (j - 1) * Qx, Qx) = exogenous->row(k - j);
        }
    }
    return si;
}

// ---------------------------------------------------------------------------
// Damped-cosine core
//
// For independent w_q ~ N(wbar_q, wvar_q),
//   E[ exp(-1/2 sum_q svar_q w_q^2) cos(sum_q w_q mu_q + c) ]
//     = exp(L) cos(P),
//   L = -1/2 log prod_q t_q - 1/2 sum_q (svar_q wbar_q^2 + wvar_q mu_q^2)/t_q,
//   P = sum_q wbar_q mu_q / t_q + c,        t_q = 1 + svar_q wvar_q.
// One log per evaluation; products of t_q stay far from overflow at Q <= 64.

namespace {

struct LogAmpPhase {
    double log_amp;
    double phase;
};

inline LogAmpPhase dce_parts(const double* wbar, const double* wvar, const double* svar,
                             const double* mu, double c, Index Q) {
    double tprod = 1.0, quad = 0.0, phase = c;
    for (Index q = 0; q < Q; ++q) {
        const double t = 1.0 + svar[q] * wvar[q];
        tprod *= t;
        quad += (svar[q] * wbar[q] * wbar[q] + wvar[q] * mu[q] * mu[q]) / t;
        phase += wbar[q] * mu[q] / t;
    }
    return {-0.5 * std::log(tprod) - 0.5 * quad, phase};
}

// Adjoint of dce_parts. dL and dP are gradients of the objective with respect
// to the accumulated log-amplitude and phase; contributions are added to the
// g* arrays (any of which may be null).
inline void dce_adjoint(const double* wbar, const double* wvar, const double* svar,
                        const double* mu, Index Q, double dL, double dP, double* g_wbar,
                        double* g_wvar, double* g_svar, double* g_mu) {
    for (Index q = 0; q < Q; ++q) {
        const double t = 1.0 + svar[q] * wvar[q];
        const double inv_t = 1.0 / t;
        const double N = svar[q] * wbar[q] * wbar[q] + wvar[q] * mu[q] * mu[q];
        if (g_wbar)
            g_wbar[q] += dL * (-svar[q] * wbar[q] * inv_t) + dP * (mu[q] * inv_t);
        if (g_wvar)
            g_wvar[q] += dL * 0.5 * inv_t * (-svar[q] - mu[q] * mu[q] + N * svar[q] * inv_t) +
                         dP * (-wbar[q] * mu[q] * svar[q] * inv_t * inv_t);
        if (g_svar)
            g_svar[q] += dL * 0.5 * inv_t * (-wvar[q] - wbar[q] * wbar[q] + N * wvar[q] * inv_t) +
                         dP * (-wbar[q] * mu[q] * wvar[q] * inv_t * inv_t);
        if (g_mu) g_mu[q] += dL * (-wvar[q] * mu[q] * inv_t) + dP * (wbar[q] * inv_t);
    }
}

// Reduction of E[exp(-1/2 sum svar d_q^2) cos(...)] for the two-frequency
// argument g^T w_m + sign * g'^T w_m' with w_m, w_m' independent. Per
// dimension, with A/B the two frequency variances and abar/bbar the means:
//   V = A + B, dbar = abar + sign*bbar, gamma = (gA + g'B)/V,
//   extra damping  -1/2 AB (g-g')^2 / V,
//   phase offset    g*abar + sign*g'*bbar - gamma*dbar,
// after which the term is dce(dbar, V, svar, gamma, c + offsets).
struct PairDim {
    double V, dbar, gamma, cross, offset;
};

inline PairDim pair_transform(double abar, double A, double bbar, double B, double svar,
                              double g, double gp, double sign) {
    PairDim p;
    p.V = A + B;
    p.dbar = abar + sign * bbar;
    if (p.V > 0.0) {
        p.gamma = (g * A + gp * B) / p.V;
        const double diff = g - gp;
        p.cross = A * B * diff * diff / p.V;
    } else {
        p.gamma = 0.0;
        p.cross = 0.0;
    }
    p.offset = g * abar + sign * gp * bbar - p.gamma * p.dbar;
    (void)svar;
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// psi1

namespace {

void check_psi_args(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                    const StateInputs& inputs) {
    hyper.validate();
    inputs.validate();
    require(freq.mean.rows() == hyper.num_features && freq.mean.cols() == hyper.input_dim(),
            "psi: frequency mean must be M x Q");
    require(freq.var.rows() == freq.mean.rows() && freq.var.cols() == freq.mean.cols(),
            "psi: frequency var must be M x Q");
    require_domain((freq.var.array() >= 0.0).all(), "psi: negative frequency variance");
    require(inputs.dim() == hyper.input_dim(), "psi: input window dimension mismatch");
}

}  // namespace

Matrix psi1(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
            const StateInputs& inputs) {
    check_psi_args(freq, hyper, inputs);
    const Index K = inputs.num_states(), M = hyper.num_features, Q = hyper.input_dim();

    Matrix log_amp(K, M), phase(K, M);
    std::vector<double> mu(Q);
    for (Index k = 0; k < K; ++k) {
        const double* imean = inputs.mean.row(k).data();
        const double* ivar = inputs.var.row(k).data();
        for (Index m = 0; m < M; ++m) {
            for (Index q = 0; q < Q; ++q) mu[q] = imean[q] - hyper.shifts(m, q);
            const auto lp = dce_parts(freq.mean.row(m).data(), freq.var.row(m).data(),
                                      ivar, mu.data(), hyper.phases[m], Q);
            log_amp(k, m) = lp.log_amp;
            phase(k, m) = lp.phase;
        }
    }
    Matrix out(K, M);
    simd::active().exp_cos(log_amp.data(), phase.data(), out.data(),
                           static_cast<std::size_t>(out.size()));
    return hyper.feature_scale() * out;
}

// ---------------------------------------------------------------------------
// psi2

namespace {

// Fills the two damped-cosine terms of one second-moment entry (m, mp) for
// state k. For m == mp the product-to-sum constant 1 occupies the second
// slot as exp(0)cos(0).
inline void psi2_entry_parts(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                             const double* imean, const double* ivar, Index m, Index mp,
                             Index Q, LogAmpPhase* term_minus, LogAmpPhase* term_plus,
                             std::vector<double>& buf) {
    if (m == mp) {
        double* mu2 = buf.data();
        double* svar4 = buf.data() + Q;
        for (Index q = 0; q < Q; ++q) {
            mu2[q] = 2.0 * (imean[q] - hyper.shifts(m, q));
            svar4[q] = 4.0 * ivar[q];
        }
        *term_minus = dce_parts(freq.mean.row(m).data(), freq.var.row(m).data(), svar4,
                                mu2, 2.0 * hyper.phases[m], Q);
        *term_plus = {0.0, 0.0};
        return;
    }

    double* dbar = buf.data();
    double* V = buf.data() + Q;
    double* gamma = buf.data() + 2 * Q;
    const double* am = freq.mean.row(m).data();
    const double* av = freq.var.row(m).data();
    const double* bm = freq.mean.row(mp).data();
    const double* bv = freq.var.row(mp).data();

    for (double sign : {-1.0, 1.0}) {
        double cross_sum = 0.0, offset_sum = 0.0;
        for (Index q = 0; q < Q; ++q) {
            const double g = imean[q] - hyper.shifts(m, q);
            const double gp = imean[q] - hyper.shifts(mp, q);
            const PairDim p = pair_transform(am[q], av[q], bm[q], bv[q], ivar[q], g, gp, sign);
            dbar[q] = p.dbar;
            V[q] = p.V;
            gamma[q] = p.gamma;
            cross_sum += p.cross;
            offset_sum += p.offset;
        }
        const double c = hyper.phases[m] + sign * hyper.phases[mp] + offset_sum;
        LogAmpPhase lp = dce_parts(dbar, V, ivar, gamma, c, Q);
        lp.log_amp -= 0.5 * cross_sum;
        (sign < 0 ? *term_minus : *term_plus) = lp;
    }
}

}  // namespace

Matrix psi2_state(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                  const StateInputs& inputs, Index k) {
    check_psi_args(freq, hyper, inputs);
    require(k >= 0 && k < inputs.num_states(), "psi2_state: state index out of range");
    const Index M = hyper.num_features, Q = hyper.input_dim();
    const Index P = M * (M + 1) / 2;

    std::vector<double> log_amp(2 * P), phase(2 * P), values(2 * P), buf(3 * Q);
    const double* imean = inputs.mean.row(k).data();
    const double* ivar = inputs.var.row(k).data();
    Index idx = 0;
    for (Index m = 0; m < M; ++m) {
        for (Index mp = m; mp < M; ++mp, ++idx) {
            LogAmpPhase tm, tp;
            psi2_entry_parts(freq, hyper, imean, ivar, m, mp, Q, &tm, &tp, buf);
            log_amp[2 * idx] = tm.log_amp;
            phase[2 * idx] = tm.phase;
            log_amp[2 * idx + 1] = tp.log_amp;
            phase[2 * idx + 1] = tp.phase;
        }
    }
    simd::active().exp_cos(log_amp.data(), phase.data(), values.data(), values.size());

    const double scale = hyper.sigma_power * hyper.sigma_power / static_cast<double>(M);
    Matrix out(M, M);
    idx = 0;
    for (Index m = 0; m < M; ++m) {
        for (Index mp = m; mp < M; ++mp, ++idx) {
            const double v = scale * (values[2 * idx] + values[2 * idx + 1]);
            out(m, mp) = v;
            out(mp, m) = v;
        }
    }
    return out;
}

Matrix psi2(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
            const StateInputs& inputs) {
    check_psi_args(freq, hyper, inputs);
    const Index K = inputs.num_states(), M = hyper.num_features, Q = hyper.input_dim();
    const Index P = M * (M + 1) / 2;
    const double scale = hyper.sigma_power * hyper.sigma_power / static_cast<double>(M);

    std::vector<double> log_amp(2 * P), phase(2 * P), values(2 * P), buf(3 * Q);
    std::vector<double> accum(P, 0.0);
    for (Index k = 0; k < K; ++k) {
        const double* imean = inputs.mean.row(k).data();
        const double* ivar = inputs.var.row(k).data();
        Index idx = 0;
        for (Index m = 0; m < M; ++m) {
            for (Index mp = m; mp < M; ++mp, ++idx) {
                LogAmpPhase tm, tp;
                psi2_entry_parts(freq, hyper, imean, ivar, m, mp, Q, &tm, &tp, buf);
                log_amp[2 * idx] = tm.log_amp;
                phase[2 * idx] = tm.phase;
                log_amp[2 * idx + 1] = tp.log_amp;
                phase[2 * idx + 1] = tp.phase;
            }
        }
        simd::active().exp_cos(log_amp.data(), phase.data(), values.data(), values.size());
        for (Index i = 0; i < P; ++i) accum[i] += values[2 * i] + values[2 * i + 1];
    }

    Matrix out(M, M);
    Index idx = 0;
    for (Index m = 0; m < M; ++m) {
        for (Index mp = m; mp < M; ++mp, ++idx) {
            out(m, mp) = scale * accum[idx];
            out(mp, m) = scale * accum[idx];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// psi_cross_vss

Matrix psi_cross_vss(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                     const StateInputs& inputs, Index k, Index khat) {
    check_psi_args(freq, hyper, inputs);
    require(k >= 0 && k < inputs.num_states() && khat >= 0 && khat < inputs.num_states(),
            "psi_cross: state index out of range");
    require_domain(k != khat, "psi_cross: k == khat; use the single-state second moment");
    const Index M = hyper.num_features, Q = hyper.input_dim();

    const Matrix p1 = psi1(freq, hyper, inputs);
    Matrix out = p1.row(k).transpose() * p1.row(khat);

    // Shared z_m couples the diagonal; the joint expectation has summed input
    // variances, difference of means for the cos(A_k - A_khat) term and sum
    // of means (less both shifts) for the cos(A_k + A_khat) term.
    std::vector<double> svar(Q), mu_minus(Q), mu_plus(Q);
    std::vector<double> log_amp(2 * M), phase(2 * M), values(2 * M);
    for (Index m = 0; m < M; ++m) {
        for (Index q = 0; q < Q; ++q) {
            svar[q] = inputs.var(k, q) + inputs.var(khat, q);
            mu_minus[q] = inputs.mean(k, q) - inputs.mean(khat, q);
            mu_plus[q] = inputs.mean(k, q) + inputs.mean(khat, q) - 2.0 * hyper.shifts(m, q);
        }
        const auto tm = dce_parts(freq.mean.row(m).data(), freq.var.row(m).data(),
                                  svar.data(), mu_minus.data(), 0.0, Q);
        const auto tp = dce_parts(freq.mean.row(m).data(), freq.var.row(m).data(),
                                  svar.data(), mu_plus.data(), 2.0 * hyper.phases[m], Q);
        log_amp[2 * m] = tm.log_amp;
        phase[2 * m] = tm.phase;
        log_amp[2 * m + 1] = tp.log_amp;
        phase[2 * m + 1] = tp.phase;
    }
    simd::active().exp_cos(log_amp.data(), phase.data(), values.data(), values.size());
    const double scale = hyper.sigma_power * hyper.sigma_power / static_cast<double>(M);
    for (Index m = 0; m < M; ++m) out(m, m) = scale * (values[2 * m] + values[2 * m + 1]);
    return out;
}

// ---------------------------------------------------------------------------
// Spec-shaped wrappers

Matrix psi1(SpectralMode mode, const VariationalParams& vp, const SpectralPoints& points,
            const SpectralLayerHyper& hyper, const std::optional<Matrix>& exogenous,
            Index hidden_lags, Index exo_lags) {
    vp.validate_latents();
    FrequencyDist freq = mode == SpectralMode::kVariational
                             ? frequencies_variational(vp.spectral_means, vp.spectral_vars, hyper)
                             : frequencies_fixed(points, hyper);
    return psi1(freq, hyper,
                lagged_inputs(vp.latent_means, vp.latent_vars, hidden_lags, exogenous, exo_lags));
}

Matrix psi2(SpectralMode mode, const VariationalParams& vp, const SpectralPoints& points,
            const SpectralLayerHyper& hyper, const std::optional<Matrix>& exogenous,
            Index hidden_lags, Index exo_lags) {
    vp.validate_latents();
    FrequencyDist freq = mode == SpectralMode::kVariational
                             ? frequencies_variational(vp.spectral_means, vp.spectral_vars, hyper)
                             : frequencies_fixed(points, hyper);
    return psi2(freq, hyper,
                lagged_inputs(vp.latent_means, vp.latent_vars, hidden_lags, exogenous, exo_lags));
}

// ---------------------------------------------------------------------------
// Monte Carlo oracles

namespace {

// Welford accumulation: stable, and exactly zero spread for constant samples.
struct McAccum {
    Matrix mu, m2;
    std::int64_t n = 0;
    explicit McAccum(Index r, Index c) : mu(Matrix::Zero(r, c)), m2(Matrix::Zero(r, c)) {}
    void add(const Matrix& v) {
        ++n;
        const Matrix delta = v - mu;
        mu += delta / static_cast<double>(n);
        m2 += delta.cwiseProduct(v - mu);
    }
    Matrix mean(std::int64_t) const { return mu; }
    Matrix se(std::int64_t) const {
        const double dn = static_cast<double>(n);
        return (m2 / (dn - 1.0) / dn).cwiseMax(0.0).cwiseSqrt();
    }
};

Matrix sample_features(const Matrix& wmean, const Matrix& wsd, const Matrix& imean,
                       const Matrix& isd, const SpectralLayerHyper& hyper,
                       std::mt19937_64& rng, std::normal_distribution<double>& gauss,
                       Matrix& Wbuf, Matrix& Xbuf) {
    for (Index i = 0; i < Wbuf.rows(); ++i)
        for (Index j = 0; j < Wbuf.cols(); ++j)
            Wbuf(i, j) = wmean(i, j) + wsd(i, j) * gauss(rng);
    for (Index i = 0; i < Xbuf.rows(); ++i)
        for (Index j = 0; j < Xbuf.cols(); ++j)
            Xbuf(i, j) = imean(i, j) + isd(i, j) * gauss(rng);
    Matrix args = Xbuf * Wbuf.transpose();
    Vector offset = hyper.phases - (Wbuf.array() * hyper.shifts.array()).rowwise().sum().matrix();
    args.array().rowwise() += offset.transpose().array();
    Matrix phi(args.rows(), args.cols());
    simd::active().cos_scale(args.data(), hyper.feature_scale(), phi.data(),
                             static_cast<std::size_t>(args.size()));
    return phi;
}

}  // namespace

McPsi monte_carlo_psi(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                      const StateInputs& inputs, std::int64_t num_samples,
                      std::uint64_t seed) {
    check_psi_args(freq, hyper, inputs);
    require(num_samples >= 1000, "monte_carlo_psi: num_samples must be >= 1000");
    const Index K = inputs.num_states(), M = hyper.num_features;

    const Matrix wsd = freq.var.cwiseSqrt();
    const Matrix isd = inputs.var.cwiseSqrt();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    McAccum acc1(K, M), acc2(M, M);
    Matrix Wbuf(freq.mean.rows(), freq.mean.cols());
    Matrix Xbuf(inputs.mean.rows(), inputs.mean.cols());
    for (std::int64_t s = 0; s < num_samples; ++s) {
        Matrix phi =
            sample_features(freq.mean, wsd, inputs.mean, isd, hyper, rng, gauss, Wbuf, Xbuf);
        acc1.add(phi);
        Matrix g = phi.transpose() * phi;
        acc2.add(g);
    }
    return {acc1.mean(num_samples), acc1.se(num_samples), acc2.mean(num_samples),
            acc2.se(num_samples)};
}

McCross monte_carlo_psi_cross(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                              const StateInputs& inputs, Index k, Index khat,
                              std::int64_t num_samples, std::uint64_t seed) {
    check_psi_args(freq, hyper, inputs);
    require(num_samples >= 1000, "monte_carlo_psi_cross: num_samples must be >= 1000");
    require_domain(k != khat, "monte_carlo_psi_cross: k == khat");
    const Index M = hyper.num_features, Q = hyper.input_dim();

    const Matrix wsd = freq.var.cwiseSqrt();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    McAccum acc(M, M);
    Matrix Wbuf(M, Q);
    Matrix Xbuf(2, Q);
    Matrix two_mean(2, Q), two_sd(2, Q);
    two_mean.row(0) = inputs.mean.row(k);
    two_mean.row(1) = inputs.mean.row(khat);
    two_sd.row(0) = inputs.var.row(k).cwiseSqrt();
    two_sd.row(1) = inputs.var.row(khat).cwiseSqrt();
    for (std::int64_t s = 0; s < num_samples; ++s) {
        Matrix phi = sample_features(freq.mean, wsd, two_mean, two_sd, hyper, rng, gauss,
                                     Wbuf, Xbuf);
        Matrix g = phi.row(0).transpose() * phi.row(1);
        acc.add(g);
    }
    return {acc.mean(num_samples), acc.se(num_samples)};
}

// ---------------------------------------------------------------------------
// Reverse mode

PsiBackward psi_backward(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                         const StateInputs& inputs, const Matrix* grad_psi1,
                         const Matrix* grad_psi2) {
    check_psi_args(freq, hyper, inputs);
    const Index K = inputs.num_states(), M = hyper.num_features, Q = hyper.input_dim();
    if (grad_psi1)
        require(grad_psi1->rows() == K && grad_psi1->cols() == M,
                "psi_backward: grad_psi1 must be K x M");
    if (grad_psi2)
        require(grad_psi2->rows() == M && grad_psi2->cols() == M,
                "psi_backward: grad_psi2 must be M x M");

    PsiBackward g;
    g.freq_mean = Matrix::Zero(M, Q);
    g.freq_var = Matrix::Zero(M, Q);
    g.input_mean = Matrix::Zero(K, Q);
    g.input_var = Matrix::Zero(K, Q);
    g.shifts = Matrix::Zero(M, Q);
    g.phases = Vector::Zero(M);

    std::vector<double> mu(Q), svar4(Q), mu2(Q);
    std::vector<double> dbar(Q), V(Q), gam(Q), crossq(Q), gq(Q), gpq(Q);
    std::vector<double> gd(Q), gV(Q), gs(Q), ggam(Q);

    const double scale1 = hyper.feature_scale();
    const double scale2 = hyper.sigma_power * hyper.sigma_power / static_cast<double>(M);

    for (Index k = 0; k < K; ++k) {
        const double* imean = inputs.mean.row(k).data();
        const double* ivar = inputs.var.row(k).data();

        if (grad_psi1) {
            for (Index m = 0; m < M; ++m) {
                const double up = (*grad_psi1)(k, m) * scale1;
                if (up == 0.0) continue;
                const double* wb = freq.mean.row(m).data();
                const double* wv = freq.var.row(m).data();
                for (Index q = 0; q < Q; ++q) mu[q] = imean[q] - hyper.shifts(m, q);
                const auto lp = dce_parts(wb, wv, ivar, mu.data(), hyper.phases[m], Q);
                const double v = std::exp(lp.log_amp);
                const double dL = up * v * std::cos(lp.phase);
                const double dP = -up * v * std::sin(lp.phase);

                std::fill(gd.begin(), gd.end(), 0.0);  // reused as g_mu
                dce_adjoint(wb, wv, ivar, mu.data(), Q, dL, dP,
                            g.freq_mean.row(m).data(), g.freq_var.row(m).data(),
                            g.input_var.row(k).data(), gd.data());
                for (Index q = 0; q < Q; ++q) {
                    g.input_mean(k, q) += gd[q];
                    g.shifts(m, q) -= gd[q];
                }
                g.phases[m] += dP;
            }
        }

        if (!grad_psi2) continue;
        for (Index m = 0; m < M; ++m) {
            for (Index mp = m; mp < M; ++mp) {
                double up = (*grad_psi2)(m, mp);
                if (mp != m) up += (*grad_psi2)(mp, m);
                up *= scale2;
                if (up == 0.0) continue;

                if (m == mp) {
                    const double* wb = freq.mean.row(m).data();
                    const double* wv = freq.var.row(m).data();
                    for (Index q = 0; q < Q; ++q) {
                        mu2[q] = 2.0 * (imean[q] - hyper.shifts(m, q));
                        svar4[q] = 4.0 * ivar[q];
                    }
                    const auto lp = dce_parts(wb, wv, svar4.data(), mu2.data(),
                                              2.0 * hyper.phases[m], Q);
                    const double v = std::exp(lp.log_amp);
                    const double dL = up * v * std::cos(lp.phase);
                    const double dP = -up * v * std::sin(lp.phase);

                    std::fill(gd.begin(), gd.end(), 0.0);  // g_mu2
                    std::fill(gs.begin(), gs.end(), 0.0);  // g_svar4
                    dce_adjoint(wb, wv, svar4.data(), mu2.data(), Q, dL, dP,
                                g.freq_mean.row(m).data(), g.freq_var.row(m).data(),
                                gs.data(), gd.data());
                    for (Index q = 0; q < Q; ++q) {
                        g.input_var(k, q) += 4.0 * gs[q];
                        g.input_mean(k, q) += 2.0 * gd[q];
                        g.shifts(m, q) -= 2.0 * gd[q];
                    }
                    g.phases[m] += 2.0 * dP;
                    continue;
                }

                const double* am = freq.mean.row(m).data();
                const double* av = freq.var.row(m).data();
                const double* bm = freq.mean.row(mp).data();
                const double* bv = freq.var.row(mp).data();
                for (double sign : {-1.0, 1.0}) {
                    double cross_sum = 0.0, offset_sum = 0.0;
                    for (Index q = 0; q < Q; ++q) {
                        gq[q] = imean[q] - hyper.shifts(m, q);
                        gpq[q] = imean[q] - hyper.shifts(mp, q);
                        const PairDim p =
                            pair_transform(am[q], av[q], bm[q], bv[q], ivar[q], gq[q], gpq[q], sign);
                        dbar[q] = p.dbar;
                        V[q] = p.V;
                        gam[q] = p.gamma;
                        crossq[q] = p.cross;
                        cross_sum += p.cross;
                        offset_sum += p.offset;
                    }
                    const double c = hyper.phases[m] + sign * hyper.phases[mp] + offset_sum;
                    const auto lp = dce_parts(dbar.data(), V.data(), ivar, gam.data(), c, Q);
                    const double E = std::exp(lp.log_amp - 0.5 * cross_sum);
                    const double T = E * std::cos(lp.phase);
                    const double dL = up * T;
                    const double dP = -up * E * std::sin(lp.phase);

                    std::fill(gd.begin(), gd.end(), 0.0);
                    std::fill(gV.begin(), gV.end(), 0.0);
                    std::fill(gs.begin(), gs.end(), 0.0);
                    std::fill(ggam.begin(), ggam.end(), 0.0);
                    dce_adjoint(dbar.data(), V.data(), ivar, gam.data(), Q, dL, dP, gd.data(),
                                gV.data(), gs.data(), ggam.data());

                    for (Index q = 0; q < Q; ++q) {
                        const double A = av[q], B = bv[q];
                        const double gg = gq[q], ggp = gpq[q];
                        // Phase offset contributions (weight dP each).
                        double grad_a = gd[q] + dP * (gg - gam[q]);
                        double grad_b = sign * gd[q] + dP * sign * (ggp - gam[q]);
                        double grad_g = dP * am[q];
                        double grad_gp = dP * sign * bm[q];
                        double grad_gamma = ggam[q] - dP * dbar[q];
                        double grad_A = gV[q];
                        double grad_B = gV[q];
                        if (V[q] > 0.0) {
                            const double invV = 1.0 / V[q];
                            grad_A += grad_gamma * (gg - gam[q]) * invV;
                            grad_B += grad_gamma * (ggp - gam[q]) * invV;
                            grad_g += grad_gamma * A * invV;
                            grad_gp += grad_gamma * B * invV;
                            const double dcross = -0.5 * dL;  // log-amp carries -cross/2
                            const double diff = gg - ggp;
                            grad_A += dcross * diff * diff * B * B * invV * invV;
                            grad_B += dcross * diff * diff * A * A * invV * invV;
                            grad_g += dcross * 2.0 * A * B * diff * invV;
                            grad_gp -= dcross * 2.0 * A * B * diff * invV;
                        }
                        g.freq_mean(m, q) += grad_a;
                        g.freq_mean(mp, q) += grad_b;
                        g.freq_var(m, q) += grad_A;
                        g.freq_var(mp, q) += grad_B;
                        g.input_var(k, q) += gs[q];
                        g.input_mean(k, q) += grad_g + grad_gp;
                        g.shifts(m, q) -= grad_g;
                        g.shifts(mp, q) -= grad_gp;
                    }
                    g.phases[m] += dP;
                    g.phases[mp] += sign * dP;
                }
            }
        }
    }
    return g;
}

}  // namespace drgp
