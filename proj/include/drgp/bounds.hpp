//
//  bounds.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <optional>
#include <vector>

#include "drgp/common.hpp"
#include "drgp/model.hpp"

namespace drgp {

// Quadratic form q(x) = x^T E x + e^T x + e0 evaluated on a centered
// Gaussian vector x ~ N(0, Sigma). E and Sigma must be symmetric and Sigma
// positive semidefinite.
struct QuadraticForm {
    Matrix E;
    Vector e;
    double e0 = 0.0;
    Matrix Sigma;

    Index dim() const { return E.rows(); }
    void validate() const;
};

// Log moment generating function log E[exp(lambda q(x))]. Finite exactly
// when every eigenvalue nu of Sigma^{1/2} E Sigma^{1/2} satisfies
// 1 - 2 lambda nu > 0; otherwise the expectation diverges and the call
// raises a domain error.
double qfg_mgf(const QuadraticForm& form, double lambda);

// Noise-free output covariance across states together with the per-state
// predictive variances (noise included) for one layer.
struct LayerVarCov {
    double sum_var = 0.0;  // sum over states of the predictive variance
    Vector var_per_state;  // K entries, summing to sum_var
    Matrix cov;            // K x K covariance of the layer outputs
};

// Exact second-moment statistics of every layer's outputs under the
// variational posterior. Cross-state entries treat the per-state input
// windows as independent while sharing the spectral points, matching the
// convention of the psi statistics.
std::vector<LayerVarCov> variance_cov_inputs(const DeepModel& model, const Dataset& data);

// Largest absolute difference of consecutive entries. Needs at least two
// entries; a shorter sequence has no consecutive pair and raises a domain
// error.
double lipschitz_estimate(const Vector& sequence);

// Per-layer inputs to the explicit bound evaluators.
struct LayerBoundStats {
    double sum_var = 0.0;        // predictive variance summed over states
    Vector var_per_state;        // per-state split of sum_var
    Matrix cov;                  // K x K output covariance, PSD
    double sigma_noise = 1.0;    // layer noise scale, > 0
    double lipschitz = 0.0;      // largest consecutive jump of the prediction
    double delta = 1.0;          // input-space bound divisor, > 0
    double latent_var_sum = 0.0; // total variational state variance, 0 at the output
};

// Everything the bound formulas consume, decoupled from the model so the
// evaluators stay pure functions over immutable inputs.
struct BoundInputs {
    std::vector<LayerBoundStats> layers;
    double kl = 0.0;             // KL(Q || P) of the variational posterior
    double tau = 0.5;            // configured confidence level snapshot
    double big_lipschitz = 1.0;  // product of the per-layer Lipschitz constants
    Index input_dim = 1;         // first-layer input dimension

    Index num_states() const;
    void validate() const;
};

// Assembly settings for bound_inputs_from_model. delta defaults to each
// layer's input dimension when unset; an override must list one value per
// layer.
struct BoundConfig {
    double tau = 0.5;
    std::optional<std::vector<double>> delta;
};

// Collects variance/covariance statistics, Lipschitz estimates from the
// predicted sequences, the posterior KL and the configured divisors into
// one immutable evaluation input.
BoundInputs bound_inputs_from_model(const DeepModel& model, const Dataset& data,
                                    const BoundConfig& config);

// The three rows of the rate function, each summed over layers, exposed
// separately so curve records can show which row drives the value. The
// variance row is nonnegative, the determinant row nonpositive, and the
// smoothness row nonnegative.
struct RateTerms {
    double variance_row = 0.0;    // lambda sum_var / (2 sigma^2)
    double logdet_row = 0.0;      // -(N/2) log det(I + lambda Cov / (N sigma^2))
    double smoothness_row = 0.0;  // (N/2) v^T Cov (I + lambda Cov / (N sigma^2))^{-1} v

    double total() const { return variance_row + logdet_row + smoothness_row; }
};
RateTerms capital_L_terms(const BoundInputs& inputs, double lambda, Index num_samples);

// The rate function over all layers at inverse temperature lambda and
// sample count N:
//   sum_l [ lambda sum_var_l / (2 sigma_l^2)
//           - (N/2) log det(I + lambda Cov_l / (N sigma_l^2))
//           + (N/2) v_l^T Cov_l (I + lambda Cov_l / (N sigma_l^2))^{-1} v_l ]
// with v_l the constant vector (1/N)(S_l/delta_l)(lambda/sigma_l^2).
// Nonnegative for every input produced by this module.
double capital_L(const BoundInputs& inputs, double lambda, Index num_samples);

// Same rate function restricted to a single state: the state's summand of
// sum_var and the matching diagonal entry of cov stand in for the full
// statistics.
double capital_L_single_state(const BoundInputs& inputs, Index state, double lambda,
                              Index num_samples);

// High-probability upper bound on the expected out-of-sample negative log
// likelihood at the lambda = N rule, from the training objective value
// objective (the evidence lower bound of the trained model) and confidence
// level tau.
double empirical_risk_bound(const BoundInputs& inputs, double objective, double tau,
                            Index num_samples);
double empirical_risk_bound(const DeepModel& model, const Dataset& data, double tau,
                            Index num_samples);

// High-probability upper bound on the generalization gap at the
// lambda = sqrt(N) rule; decays to the rate function's asymptote as the
// sample count grows.
double consistency_gap_bound(const BoundInputs& inputs, double tau, Index num_samples);
double consistency_gap_bound(const DeepModel& model, const Dataset& data, double tau,
                             Index num_samples);

// Sample-size-free offset of the oracle bound: the total variational state
// variance plus the noise-free predictive variance of every layer, scaled
// by twice the layer noise variance. The output layer contributes no state
// variance term by construction.
double oracle_variance_term(const BoundInputs& inputs);

// High-probability upper bound on the excess risk over the best parameter
// choice at the lambda = sqrt(N) rule; converges to oracle_variance_term
// plus the rate asymptote.
double oracle_risk_bound(const BoundInputs& inputs, double tau, Index num_samples);
double oracle_risk_bound(const DeepModel& model, const Dataset& data, double tau,
                         Index num_samples);

// Upper bound on the number of epsilon-balls needed to cover the image of
// the unit input box under a big_lipschitz-Lipschitz predictor:
// (epsilon_prime / big_lipschitz)^(-input_dim).
double covering_count(double big_lipschitz, double epsilon_prime, Index input_dim);

// Gap bound that charges the state count to the input dimension through a
// covering argument: the union over per-state events replaces log(K) with
// input_dim * log(big_lipschitz / epsilon_prime), the per-state rate enters
// at lambda' = lambda K, and the worst state's rate fixes the transformed
// confidence level. Raises a domain error when a log argument degenerates
// to zero or below.
double covering_extension(const BoundInputs& inputs, double epsilon_prime,
                          double big_lipschitz, Index input_dim, double tau_prime,
                          double lambda, Index num_samples);

// Turns a one-sided bound family into a bound on the absolute deviation by
// spending half the failure probability on each tail.
template <typename BoundAtTau>
double two_sided(BoundAtTau&& bound_at, double tau) {
    require(tau > 0.0 && tau <= 1.0, "two_sided: tau must lie in (0, 1]");
    return bound_at(tau / 2.0);
}

}  // namespace drgp
