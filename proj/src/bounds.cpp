//
//  bounds.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/bounds.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <string>

#include "drgp/psi.hpp"

namespace drgp {

namespace {

void require_symmetric(const Matrix& m, const char* name) {
    require(m.rows() == m.cols(), std::string(name) + ": matrix must be square");
    const double scale = 1.0 + m.cwiseAbs().maxCoeff();
    require((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * scale,
            std::string(name) + ": matrix must be symmetric");
}

}  // namespace

void QuadraticForm::validate() const {
    require(E.size() > 0, "quadratic form: E must be nonempty");
    require_symmetric(E, "quadratic form E");
    require_symmetric(Sigma, "quadratic form Sigma");
    require(Sigma.rows() == E.rows(), "quadratic form: Sigma must match E in size");
    require(e.size() == E.rows(), "quadratic form: e must match E in size");
}

double qfg_mgf(const QuadraticForm& form, double lambda) {
    form.validate();
    require(lambda > 0.0, "qfg_mgf: lambda must be positive");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sigma_eig{Eigen::MatrixXd(form.Sigma)};
    const double sigma_scale = 1.0 + sigma_eig.eigenvalues().cwiseAbs().maxCoeff();
    require(sigma_eig.eigenvalues().minCoeff() >= -1e-9 * sigma_scale,
            "qfg_mgf: Sigma must be positive semidefinite");
    // Tiny negative eigenvalues of a numerically PSD Sigma clamp to zero.
    const Eigen::VectorXd sigma_vals = sigma_eig.eigenvalues().cwiseMax(0.0);
    const Eigen::MatrixXd half = sigma_eig.eigenvectors() *
                                 sigma_vals.cwiseSqrt().asDiagonal() *
                                 sigma_eig.eigenvectors().transpose();

    // Sigma^{1/2} E Sigma^{1/2} shares its spectrum with E Sigma but is
    // symmetric, so one eigendecomposition serves the determinant, the
    // existence check and the linear solve below.
    Eigen::MatrixXd coupled = half * form.E * half;
    coupled = 0.5 * (coupled + coupled.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> coupled_eig(coupled);
    const Eigen::VectorXd nu = coupled_eig.eigenvalues();

    const Eigen::ArrayXd factors = 1.0 - 2.0 * lambda * nu.array();
    require_domain(factors.minCoeff() > 0.0,
                   "qfg_mgf: moment generating function undefined, "
                   "I - 2 lambda E Sigma has a nonpositive eigenvalue");

    const Eigen::VectorXd rotated = coupled_eig.eigenvectors().transpose() * (half * form.e);
    const double quad =
        0.5 * lambda * lambda * (rotated.array().square() / factors).sum();
    return lambda * form.e0 - 0.5 * factors.log().sum() + quad;
}

std::vector<LayerVarCov> variance_cov_inputs(const DeepModel& model, const Dataset& data) {
    model.validate();
    data.validate();
    require(data.outputs.size() == model.num_states,
            "variance_cov_inputs: dataset state count must match the model");

    std::vector<LayerVarCov> out;
    out.reserve(static_cast<std::size_t>(model.depth()) + 1);
    for (Index l = 0; l <= model.depth(); ++l) {
        const ModelLayer& ml = model.layers[static_cast<std::size_t>(l)];
        const FrequencyDist freq = layer_frequencies(model, l);
        const StateInputs inputs = build_inputs(model, data, l);
        const Matrix p1 = psi1(freq, ml.hyper, inputs);
        const Vector& m = ml.var.weight_mean;
        const Matrix& s = ml.var.weight_cov;
        const double noise_var = ml.hyper.sigma_noise * ml.hyper.sigma_noise;
        const Index num_states = inputs.num_states();

        LayerVarCov entry;
        entry.var_per_state = Vector(num_states);
        entry.cov = Matrix::Zero(num_states, num_states);

        Vector mean = p1 * m;
        for (Index k = 0; k < num_states; ++k) {
            const Matrix p2k = psi2_state(freq, ml.hyper, inputs, k);
            const double noise_free = m.dot(p2k * m) - mean[k] * mean[k] +
                                      p2k.cwiseProduct(s).sum();
            entry.var_per_state[k] = noise_free + noise_var;
            entry.cov(k, k) = noise_free;
        }

        if (model.mode == SpectralMode::kFixed) {
            // Fixed spectral points leave the weights as the only source of
            // cross-state coupling.
            entry.cov = p1 * s * p1.transpose();
        } else {
            for (Index k = 0; k < num_states; ++k) {
                for (Index khat = k + 1; khat < num_states; ++khat) {
                    const Matrix cross = psi_cross_vss(freq, ml.hyper, inputs, k, khat);
                    const double value = m.dot(cross * m) - mean[k] * mean[khat] +
                                         cross.cwiseProduct(s).sum();
                    entry.cov(k, khat) = value;
                    entry.cov(khat, k) = value;
                }
            }
        }
        entry.sum_var = entry.var_per_state.sum();
        out.push_back(std::move(entry));
    }
    return out;
}

double lipschitz_estimate(const Vector& sequence) {
    require_domain(sequence.size() >= 2,
                   "lipschitz_estimate: need at least two consecutive entries");
    return (sequence.tail(sequence.size() - 1) - sequence.head(sequence.size() - 1))
        .cwiseAbs()
        .maxCoeff();
}

Index BoundInputs::num_states() const {
    return layers.empty() ? 0 : layers.front().var_per_state.size();
}

void BoundInputs::validate() const {
    require(!layers.empty(), "bound inputs: need at least one layer");
    require(tau > 0.0 && tau <= 1.0, "bound inputs: tau must lie in (0, 1]");
    require(input_dim >= 1, "bound inputs: input dimension must be at least 1");
    const Index states = num_states();
    require(states >= 1, "bound inputs: need at least one state");
    for (const LayerBoundStats& st : layers) {
        require(st.sigma_noise > 0.0, "bound inputs: noise scale must be positive");
        require(st.delta > 0.0, "bound inputs: delta must be positive");
        require(st.lipschitz >= 0.0, "bound inputs: Lipschitz constant must be nonnegative");
        require(st.latent_var_sum >= 0.0,
                "bound inputs: latent variance sum must be nonnegative");
        require(st.var_per_state.size() == states,
                "bound inputs: per-state variances must agree on the state count");
        require(st.var_per_state.minCoeff() >= 0.0,
                "bound inputs: variances must be nonnegative");
        require(std::abs(st.sum_var - st.var_per_state.sum()) <=
                    1e-9 * (1.0 + std::abs(st.sum_var)),
                "bound inputs: sum_var must equal the per-state total");
        require(st.cov.rows() == states && st.cov.cols() == states,
                "bound inputs: covariance must be K x K");
        require_symmetric(st.cov, "bound inputs covariance");
    }
}

BoundInputs bound_inputs_from_model(const DeepModel& model, const Dataset& data,
                                    const BoundConfig& config) {
    require(config.tau > 0.0 && config.tau <= 1.0,
            "bound inputs: tau must lie in (0, 1]");
    const Index num_layers = model.depth() + 1;
    if (config.delta) {
        require(static_cast<Index>(config.delta->size()) == num_layers,
                "bound inputs: delta override must list one value per layer");
    }

    std::vector<LayerVarCov> stats = variance_cov_inputs(model, data);
    BoundInputs inputs;
    inputs.layers.resize(static_cast<std::size_t>(num_layers));
    inputs.kl = kl_q_p(model);
    inputs.tau = config.tau;
    inputs.input_dim = model.layer_input_dim(0);
    inputs.big_lipschitz = 1.0;
    for (Index l = 0; l < num_layers; ++l) {
        const ModelLayer& ml = model.layers[static_cast<std::size_t>(l)];
        LayerBoundStats& st = inputs.layers[static_cast<std::size_t>(l)];
        LayerVarCov& vc = stats[static_cast<std::size_t>(l)];
        st.sum_var = vc.sum_var;
        st.var_per_state = std::move(vc.var_per_state);
        st.cov = std::move(vc.cov);
        st.sigma_noise = ml.hyper.sigma_noise;
        st.delta = config.delta ? (*config.delta)[static_cast<std::size_t>(l)]
                                : static_cast<double>(model.layer_input_dim(l));
        // The predicted sequence is the layer's posterior mean at every
        // state; its largest consecutive jump drives the smoothness terms.
        const LayerPsi psi = layer_psi(model, data, l);
        st.lipschitz = lipschitz_estimate(psi.psi1 * ml.var.weight_mean);
        st.latent_var_sum =
            model.is_output_layer(l) ? 0.0 : ml.var.latent_vars.sum();
        inputs.big_lipschitz *= st.lipschitz;
    }
    inputs.validate();
    return inputs;
}

RateTerms capital_L_terms(const BoundInputs& inputs, double lambda, Index num_samples) {
    inputs.validate();
    require(lambda > 0.0, "capital_L: lambda must be positive");
    require(num_samples >= 1, "capital_L: need at least one sample");

    const double n = static_cast<double>(num_samples);
    const Index states = inputs.num_states();
    RateTerms terms;
    for (const LayerBoundStats& st : inputs.layers) {
        const double noise_var = st.sigma_noise * st.sigma_noise;
        const double scale = lambda / (n * noise_var);
        terms.variance_row += lambda * st.sum_var / (2.0 * noise_var);

        const Matrix shifted = Matrix::Identity(states, states) + scale * st.cov;
        Eigen::LLT<Eigen::MatrixXd> llt{Eigen::MatrixXd(shifted)};
        require_domain(llt.info() == Eigen::Success,
                       "capital_L: matrix is not positive definite");
        terms.logdet_row -= 0.5 * n *
                            2.0 *
                            Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();

        const double v_entry = lambda * st.lipschitz / (n * st.delta * noise_var);
        const Vector v = Vector::Constant(states, v_entry);
        terms.smoothness_row += 0.5 * n * v.dot(st.cov * llt.solve(Eigen::VectorXd(v)));
    }
    return terms;
}

double capital_L(const BoundInputs& inputs, double lambda, Index num_samples) {
    return capital_L_terms(inputs, lambda, num_samples).total();
}

double capital_L_single_state(const BoundInputs& inputs, Index state, double lambda,
                              Index num_samples) {
    inputs.validate();
    require(lambda > 0.0, "capital_L: lambda must be positive");
    require(num_samples >= 1, "capital_L: need at least one sample");
    require(state >= 0 && state < inputs.num_states(),
            "capital_L: state index out of range");

    const double n = static_cast<double>(num_samples);
    double total = 0.0;
    for (const LayerBoundStats& st : inputs.layers) {
        const double noise_var = st.sigma_noise * st.sigma_noise;
        const double cov_kk = st.cov(state, state);
        const double shifted = 1.0 + lambda * cov_kk / (n * noise_var);
        require_domain(shifted > 0.0, "capital_L: matrix is not positive definite");
        total += lambda * st.var_per_state[state] / (2.0 * noise_var);
        total -= 0.5 * n * std::log(shifted);
        const double v_entry = lambda * st.lipschitz / (n * st.delta * noise_var);
        total += 0.5 * n * v_entry * v_entry * cov_kk / shifted;
    }
    return total;
}

double empirical_risk_bound(const BoundInputs& inputs, double objective, double tau,
                            Index num_samples) {
    require(tau > 0.0 && tau <= 1.0, "empirical_risk_bound: tau must lie in (0, 1]");
    const double n = static_cast<double>(num_samples);
    return capital_L(inputs, n, num_samples) / n - objective / n - std::log(tau) / n;
}

double empirical_risk_bound(const DeepModel& model, const Dataset& data, double tau,
                            Index num_samples) {
    const BoundInputs inputs = bound_inputs_from_model(model, data, BoundConfig{tau, {}});
    return empirical_risk_bound(inputs, variational_bound(model, data).bound, tau,
                                num_samples);
}

double consistency_gap_bound(const BoundInputs& inputs, double tau, Index num_samples) {
    require(tau > 0.0 && tau <= 1.0, "consistency_gap_bound: tau must lie in (0, 1]");
    const double root_n = std::sqrt(static_cast<double>(num_samples));
    return (inputs.kl - std::log(tau) + capital_L(inputs, root_n, num_samples)) / root_n;
}

double consistency_gap_bound(const DeepModel& model, const Dataset& data, double tau,
                             Index num_samples) {
    return consistency_gap_bound(bound_inputs_from_model(model, data, BoundConfig{tau, {}}),
                                 tau, num_samples);
}

double oracle_variance_term(const BoundInputs& inputs) {
    inputs.validate();
    const Index states = inputs.num_states();
    double total = 0.0;
    for (const LayerBoundStats& st : inputs.layers) {
        const double noise_var = st.sigma_noise * st.sigma_noise;
        // sum_var carries the noise once per state; removing it leaves the
        // noise-free predictive variance the oracle offset wants.
        const double noise_free = st.sum_var - static_cast<double>(states) * noise_var;
        total += (st.latent_var_sum + noise_free) / (2.0 * noise_var);
    }
    return total;
}

double oracle_risk_bound(const BoundInputs& inputs, double tau, Index num_samples) {
    require(tau > 0.0 && tau <= 1.0, "oracle_risk_bound: tau must lie in (0, 1]");
    const double root_n = std::sqrt(static_cast<double>(num_samples));
    return oracle_variance_term(inputs) +
           (inputs.kl - std::log(tau) + capital_L(inputs, root_n, num_samples)) / root_n;
}

double oracle_risk_bound(const DeepModel& model, const Dataset& data, double tau,
                         Index num_samples) {
    return oracle_risk_bound(bound_inputs_from_model(model, data, BoundConfig{tau, {}}),
                             tau, num_samples);
}

double covering_count(double big_lipschitz, double epsilon_prime, Index input_dim) {
    require(big_lipschitz > 0.0, "covering_count: Lipschitz constant must be positive");
    require(epsilon_prime > 0.0 && epsilon_prime <= 1.0,
            "covering_count: epsilon must lie in (0, 1]");
    require(input_dim >= 0, "covering_count: input dimension must be nonnegative");
    return std::pow(epsilon_prime / big_lipschitz, -static_cast<double>(input_dim));
}

double covering_extension(const BoundInputs& inputs, double epsilon_prime,
                          double big_lipschitz, Index input_dim, double tau_prime,
                          double lambda, Index num_samples) {
    inputs.validate();
    require(big_lipschitz > 0.0, "covering_extension: Lipschitz constant must be positive");
    require(epsilon_prime > 0.0 && epsilon_prime <= 1.0,
            "covering_extension: epsilon must lie in (0, 1]");
    require(input_dim >= 0, "covering_extension: input dimension must be nonnegative");
    require(tau_prime > 0.0 && tau_prime <= 1.0,
            "covering_extension: tau must lie in (0, 1]");
    require(lambda > 0.0, "covering_extension: lambda must be positive");

    const Index states = inputs.num_states();
    const double lambda_per_state = lambda * static_cast<double>(states);

    // The union step holds simultaneously for every state when the worst
    // per-state rate stands in for the generic one.
    double worst_single = -std::numeric_limits<double>::infinity();
    for (Index k = 0; k < states; ++k) {
        worst_single = std::max(
            worst_single, capital_L_single_state(inputs, k, lambda_per_state, num_samples));
    }
    const double full_rate =
        capital_L(inputs, lambda_per_state / static_cast<double>(states), num_samples);
    require_domain(full_rate > 0.0 && worst_single > 0.0,
                   "covering_extension: rate ratio has a nonpositive log argument");

    const double covering_term =
        static_cast<double>(input_dim) * std::log(big_lipschitz / epsilon_prime);
    const double numerator = inputs.kl + covering_term - std::log(tau_prime) +
                             std::log(full_rate / worst_single) +
                             capital_L(inputs, lambda, num_samples);
    return numerator / lambda;
}

}  // namespace drgp
