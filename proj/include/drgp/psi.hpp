//
//  psi.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <cstdint>
#include <optional>

#include "drgp/common.hpp"
#include "drgp/spectral.hpp"

namespace drgp {

// Whether spectral points are fixed samples (SS) or carry a Gaussian
// variational distribution (VSS).
enum class SpectralMode { kFixed, kVariational };

// Variational family for one layer: Gaussian weights a ~ N(m, s), Gaussian
// spectral points z_m ~ N(alpha_m, diag(beta_m)) in VSS mode, and Gaussian
// latent states h_k ~ N(mu_k, lambda_k) with diagonal covariance.
struct VariationalParams {
    Vector weight_mean;     // m, size M
    Matrix weight_cov;      // s, M x M, symmetric PSD
    Matrix spectral_means;  // alpha, M x Q
    Matrix spectral_vars;   // beta, M x Q, entries > 0
    Vector latent_means;    // mu, size K
    Vector latent_vars;     // lambda_h, size K, entries > 0

    void validate_weights(Index M) const;
    void validate_spectral(const SpectralLayerHyper& hyper) const;
    void validate_latents() const;
};

// Per-state Gaussian input windows with diagonal covariance. Exogenous and
// zero-padded coordinates carry zero variance.
struct StateInputs {
    Matrix mean;  // K x Q
    Matrix var;   // K x Q, entries >= 0

    Index num_states() const { return mean.rows(); }
    Index dim() const { return mean.cols(); }
    void validate() const;
};

// Gaussian distribution over feature frequencies w_m; rows are per-feature.
// Fixed (SS) points have zero variance.
struct FrequencyDist {
    Matrix mean;  // M x Q
    Matrix var;   // M x Q, entries >= 0
};

FrequencyDist frequencies_fixed(const SpectralPoints& points,
                                const SpectralLayerHyper& hyper);
FrequencyDist frequencies_variational(const Matrix& alpha, const Matrix& beta,
                                      const SpectralLayerHyper& hyper);

// Lagged window assembly for a first-layer style input: state k holds
// [mu_{k-1}, ..., mu_{k-hidden_lags}, exo_{k-1}, ..., exo_{k-exo_lags}] with
// zero mean/variance padding for indices before the first state.
StateInputs lagged_inputs(const Vector& latent_means, const Vector& latent_vars,
                          Index hidden_lags, const std::optional<Matrix>& exogenous,
                          Index exo_lags);

// E_q[Phi]: entry (k, m) is the expectation of the feature under the input
// window of state k and the frequency distribution of feature m.
Matrix psi1(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
            const StateInputs& inputs);

// E_q[Phi^T Phi] summed over states.
Matrix psi2(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
            const StateInputs& inputs);

// Single-state second moment E_q[phi(x_k) phi(x_k)^T].
Matrix psi2_state(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                  const StateInputs& inputs, Index k);

// Cross-state second moment E_q[phi(x_k) phi(x_khat)^T] for k != khat, with
// the spectral distribution shared between the two factors and the two state
// windows treated as independent under q (the module receives only per-state
// marginals, so overlap between nearby lag windows is not representable
// here; the Monte Carlo oracle samples under the same convention).
// Off-diagonal entries factorize into psi1 products; the diagonal carries
// the shared-z correction. k == khat is a domain error: use psi2_state.
Matrix psi_cross_vss(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                     const StateInputs& inputs, Index k, Index khat);

// Spec-shaped convenience wrappers assembling first-layer windows from the
// variational parameters; lag counts are explicit because they are not
// recoverable from shapes alone.
Matrix psi1(SpectralMode mode, const VariationalParams& vp, const SpectralPoints& points,
            const SpectralLayerHyper& hyper, const std::optional<Matrix>& exogenous,
            Index hidden_lags, Index exo_lags);
Matrix psi2(SpectralMode mode, const VariationalParams& vp, const SpectralPoints& points,
            const SpectralLayerHyper& hyper, const std::optional<Matrix>& exogenous,
            Index hidden_lags, Index exo_lags);

// Monte Carlo estimates of the same expectations with per-entry standard
// errors; deterministic for a given seed. num_samples >= 1000.
struct McPsi {
    Matrix psi1, psi1_se;  // K x M
    Matrix psi2, psi2_se;  // M x M
};
McPsi monte_carlo_psi(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                      const StateInputs& inputs, std::int64_t num_samples,
                      std::uint64_t seed);

struct McCross {
    Matrix value, se;  // M x M
};
McCross monte_carlo_psi_cross(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                              const StateInputs& inputs, Index k, Index khat,
                              std::int64_t num_samples, std::uint64_t seed);

// Reverse-mode accumulation for the analytic statistics. Given upstream
// gradients with respect to psi1 and psi2 entries, accumulates gradients
// into the frequency distribution, the input windows, the shifts and the
// phases. Gradients with respect to sigma_power are pure scale factors and
// are handled by the caller.
struct PsiBackward {
    Matrix freq_mean;   // M x Q
    Matrix freq_var;    // M x Q
    Matrix input_mean;  // K x Q
    Matrix input_var;   // K x Q
    Matrix shifts;      // M x Q
    Vector phases;      // M
};

PsiBackward psi_backward(const FrequencyDist& freq, const SpectralLayerHyper& hyper,
                         const StateInputs& inputs, const Matrix* grad_psi1,
                         const Matrix* grad_psi2);

}  // namespace drgp
