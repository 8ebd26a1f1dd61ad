//
//  model.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <string>
#include <vector>

#include "drgp/common.hpp"
#include "drgp/psi.hpp"
#include "drgp/spectral.hpp"

namespace drgp {

// One layer of the deep recurrent model: kernel hyperparameters, spectral
// points (sampled in fixed mode, prior means of q(z) in variational mode),
// and the layer's variational posterior factors.
//
// Latent fields (latent_means / latent_vars) live on hidden layers only;
// the output layer reads the last hidden layer's latents and must keep its
// own latent fields empty.
struct ModelLayer {
    SpectralLayerHyper hyper;
    SpectralPoints points;
    VariationalParams var;
};

// Deep recurrent GP with L hidden layers plus one output layer.
//
// Layer inputs follow the recurrent window convention with zero padding for
// indices before the start of the sequence (1-indexed layer number l):
//   l = 1:        [h^1_{k-1} .. h^1_{k-Hh},  x_{k-1} .. x_{k-Hx}]
//   l = 2 .. L:   [h^l_{k-1} .. h^l_{k-Hh},  h^{l-1}_k .. h^{l-1}_{k-Hh+1}]
//   l = L+1:      [h^L_k .. h^L_{k-Hh+1}]
struct DeepModel {
    std::vector<ModelLayer> layers;  // size L + 1
    Index num_states = 0;            // K
    Index latent_horizon = 1;        // Hh
    Index exo_horizon = 1;           // Hx
    Index exo_dim = 1;               // Qx
    SpectralMode mode = SpectralMode::kFixed;

    Index depth() const { return static_cast<Index>(layers.size()) - 1; }
    Index layer_input_dim(Index layer) const;
    bool is_output_layer(Index layer) const { return layer == depth(); }
    void validate() const;
};

// Observed data: exogenous inputs (one row per state) and one scalar output
// per state. Multi-stream outputs are out of scope; the training objective
// and the bound experiments all run the single-output protocol where the
// sample count equals the number of states.
struct Dataset {
    Matrix exogenous;  // K x Qx
    Vector outputs;    // K
    void validate() const;
};

// Per-channel affine normalization applied to a dataset before training.
struct Normalizer {
    Vector exo_mean, exo_scale;  // Qx
    double out_mean = 0.0, out_scale = 1.0;
};

// Z-scores every exogenous channel and the output channel in place and
// returns the transform. Constant channels keep scale 1 so the transform
// stays invertible.
Normalizer normalize_dataset(Dataset& data);

// Gaussian window of inputs for one layer, assembled from the variational
// latents and the exogenous data per the recurrence above. Exogenous entries
// and zero-padded entries carry variance zero.
StateInputs build_inputs(const DeepModel& model, const Dataset& data, Index layer);

// Frequency distribution seen by one layer (point frequencies in fixed mode,
// q(z) pushed through the frequency map in variational mode).
FrequencyDist layer_frequencies(const DeepModel& model, Index layer);

// Both spectral moment matrices of one layer under the current posterior.
struct LayerPsi {
    Matrix psi1;  // K x M
    Matrix psi2;  // M x M, summed over states
};
LayerPsi layer_psi(const DeepModel& model, const Dataset& data, Index layer);

// Mean and variance of the layer's predictive marginal at one state:
//   mean = psi1_k m
//   var  = sigma_noise^2 + m' (psi2_k - psi1_k' psi1_k) m + tr(psi2_k s)
struct Gaussian1 {
    double mean = 0.0;
    double variance = 0.0;
};
Gaussian1 predictive_posterior(const DeepModel& model, const Dataset& data, Index layer,
                               Index state);

// Expected negative log likelihood of the full generative chain under the
// variational posterior, summed over layers and states. Hidden layers score
// their own latent means as regression targets; the output layer scores y.
double expected_nll(const DeepModel& model, const Dataset& data);

// Kullback-Leibler divergence KL(q || p) summed over every variational
// factor: weight posteriors per layer, spectral posteriors in variational
// mode, and latent posteriors on hidden layers. All priors are standard
// normal. Throws std::domain_error when a weight covariance is not positive
// definite.
double kl_q_p(const DeepModel& model);

// Evidence lower bound and its two halves. The identity
//   data_term + kl == -bound
// holds to round-off by construction; tests recompute it from the parts.
struct BoundParts {
    double data_term = 0.0;  // N * E_q[per-sample nll] == expected_nll
    double kl = 0.0;
    double bound = 0.0;  // -(data_term + kl)
};
BoundParts variational_bound(const DeepModel& model, const Dataset& data);

// Closed-form optimum of one layer's weight posterior with everything else
// held fixed:
//   A  = psi2 + sigma_noise^2 I
//   m* = A^-1 psi1' target
//   s* = sigma_noise^2 A^-1
struct WeightPosterior {
    Vector mean;
    Matrix cov;
};
WeightPosterior optimal_weight_posterior(const Matrix& psi1, const Matrix& psi2,
                                         const Vector& target, double sigma_noise);

// Applies optimal_weight_posterior to every layer in place.
void refresh_weight_posteriors(DeepModel& model, const Dataset& data);

// Flat parameter vector for optimization and finite-difference checks.
// Positive quantities (lengthscales, sigmas, variances) are packed in log
// space; weight covariances are excluded (they are refreshed in closed form,
// not driven by gradients).
Vector pack_parameters(const DeepModel& model);
DeepModel unpack_parameters(const DeepModel& prototype, const Vector& packed);

// Gradient of the evidence lower bound with respect to pack_parameters
// coordinates, computed by reverse accumulation through the spectral
// moments.
Vector bound_gradient(const DeepModel& model, const Dataset& data);

struct TrainConfig {
    int iterations = 2000;
    double learning_rate = 1e-2;
    int refresh_every = 10;  // closed-form (m, s) refresh cadence
    bool verbose = false;
};

struct TrainResult {
    DeepModel model;
    std::vector<double> bound_trace;  // bound after each iteration
    double initial_bound = 0.0;
    double final_bound = 0.0;
};

// Maximizes the evidence lower bound with Adam on the packed parameters,
// interleaved with closed-form weight refreshes. Keeps the best iterate, so
// the returned bound never falls below the initial one. Throws
// std::runtime_error with a term breakdown if the objective turns non-finite.
TrainResult train(const DeepModel& model, const Dataset& data, const TrainConfig& config);

// Fresh model with standard-normal spectral points and variational means,
// unit variances, uniform phases, and noise scales tied to the output
// spread. Deterministic in the seed.
DeepModel make_initial_model(Index num_states, Index depth, Index num_features,
                             Index latent_horizon, Index exo_horizon, Index exo_dim,
                             SpectralMode mode, const Dataset& data, unsigned seed);

// Draws sample paths from the per-state predictive marginals of the output
// layer: column i is the predictive mean vector plus elementwise Gaussian
// noise with the per-state predictive standard deviation. Deterministic in
// the seed.
Matrix generate_quasi_real(const DeepModel& model, const Dataset& data, Index num_samples,
                           unsigned seed);

}  // namespace drgp
