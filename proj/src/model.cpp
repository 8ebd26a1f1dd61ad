//
//  model.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/model.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <random>
#include <sstream>

#include "drgp/optim.hpp"

namespace drgp {

namespace {

// One latent-sourced input column: which layer's latents it reads and at
// which lag. Exogenous columns (first layer only) are appended after these.
struct LatentColumn {
    Index src_layer;
    Index lag;
};

std::vector<LatentColumn> latent_column_layout(const DeepModel& model, Index layer) {
    const Index L = model.depth();
    const Index Hh = model.latent_horizon;
    std::vector<LatentColumn> cols;
    if (layer < L) {
        for (Index j = 1; j <= Hh; ++j) cols.push_back({layer, j});
    }
    if (layer > 0) {
        for (Index j = 0; j < Hh; ++j) cols.push_back({layer - 1, j});
    }
    return cols;
}

const Vector& layer_target(const DeepModel& model, const Dataset& data, Index layer) {
    return model.is_output_layer(layer) ? data.outputs : model.layers[layer].var.latent_means;
}

// Everything the bound and its gradient need from one layer's forward pass.
struct LayerForward {
    StateInputs inputs;
    FrequencyDist freq;
    Matrix psi1;  // K x M
    Matrix psi2;  // M x M
};

LayerForward layer_forward(const DeepModel& model, const Dataset& data, Index layer) {
    LayerForward f;
    f.inputs = build_inputs(model, data, layer);
    f.freq = layer_frequencies(model, layer);
    const auto& hyper = model.layers[layer].hyper;
    f.psi1 = psi1(f.freq, hyper, f.inputs);
    f.psi2 = psi2(f.freq, hyper, f.inputs);
    return f;
}

// Expected squared-error bracket of one layer:
//   m' (psi2 - psi1' psi1) m + tr(psi2 s) + |t - psi1 m|^2 + sum(target_var)
// The last term is the variance of the regression target itself: hidden
// layers score their own random latents h_k ~ N(mu_k, lambda_k), and h_k is
// independent of its lagged window under the mean-field posterior, so the
// Gaussian expectation of (h_k - f_k)^2 carries lambda_k on top of the
// mean-target residual. Observed outputs have zero target variance.
double layer_bracket(const LayerForward& f, const Vector& m, const Matrix& s,
                     const Vector& target, double target_var_sum) {
    const Vector p1m = f.psi1 * m;
    const double quad = m.dot(f.psi2 * m) - p1m.squaredNorm() + f.psi2.cwiseProduct(s).sum();
    const double fit = (target - p1m).squaredNorm();
    return quad + fit + target_var_sum;
}

double layer_target_var_sum(const DeepModel& model, Index layer) {
    return model.is_output_layer(layer) ? 0.0
                                        : model.layers[layer].var.latent_vars.sum();
}

double gaussian_kl_diag(double mean, double var) {
    return 0.5 * (var + mean * mean - 1.0 - std::log(var));
}

double weight_kl(const Vector& m, const Matrix& s) {
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    require_domain(llt.info() == Eigen::Success,
                   "kl_q_p: weight covariance is not positive definite");
    const double logdet =
        2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return 0.5 * (s.trace() + m.squaredNorm() - static_cast<double>(m.size()) - logdet);
}

// Flat-parameter layout. Positive quantities live in log space; weight
// covariances are refreshed in closed form and never packed.
enum class SlotKind {
    kLogLengthscales,
    kSpectralMean,
    kShifts,
    kPhases,
    kLogSigmaPower,
    kLogSigmaNoise,
    kPointsZ,
    kSpectralAlpha,
    kLogSpectralBeta,
    kWeightMean,
    kLatentMean,
    kLogLatentVar,
};

struct Slot {
    SlotKind kind;
    Index layer;
    Index offset;
    Index count;
};

struct Layout {
    std::vector<Slot> slots;
    Index total = 0;
};

Layout make_layout(const DeepModel& model) {
    Layout layout;
    auto push = [&layout](SlotKind kind, Index layer, Index count) {
        layout.slots.push_back({kind, layer, layout.total, count});
        layout.total += count;
    };
    for (Index l = 0; l < static_cast<Index>(model.layers.size()); ++l) {
        const auto& ml = model.layers[l];
        const Index M = ml.hyper.num_features;
        const Index Q = ml.hyper.input_dim();
        push(SlotKind::kLogLengthscales, l, Q);
        push(SlotKind::kSpectralMean, l, Q);
        push(SlotKind::kShifts, l, M * Q);
        push(SlotKind::kPhases, l, M);
        push(SlotKind::kLogSigmaPower, l, 1);
        push(SlotKind::kLogSigmaNoise, l, 1);
        if (model.mode == SpectralMode::kFixed) {
            push(SlotKind::kPointsZ, l, M * Q);
        } else {
            push(SlotKind::kSpectralAlpha, l, M * Q);
            push(SlotKind::kLogSpectralBeta, l, M * Q);
        }
        push(SlotKind::kWeightMean, l, M);
        if (!model.is_output_layer(l)) {
            push(SlotKind::kLatentMean, l, model.num_states);
            push(SlotKind::kLogLatentVar, l, model.num_states);
        }
    }
    return layout;
}

void write_matrix(Vector& packed, Index offset, const Matrix& src) {
    for (Index r = 0, i = offset; r < src.rows(); ++r)
        for (Index c = 0; c < src.cols(); ++c) packed[i++] = src(r, c);
}

void read_matrix(const Vector& packed, Index offset, Matrix& dst) {
    for (Index r = 0, i = offset; r < dst.rows(); ++r)
        for (Index c = 0; c < dst.cols(); ++c) dst(r, c) = packed[i++];
}

double wrap_phase(double b) {
    double w = std::fmod(b, kTwoPi);
    if (w < 0.0) w += kTwoPi;
    return w;
}

}  // namespace

Index DeepModel::layer_input_dim(Index layer) const {
    const Index L = depth();
    if (layer == 0) return latent_horizon + exo_horizon * exo_dim;
    if (layer < L) return 2 * latent_horizon;
    return latent_horizon;
}

void DeepModel::validate() const {
    require(layers.size() >= 2, "DeepModel: needs at least one hidden and one output layer");
    require(num_states >= 1, "DeepModel: num_states must be positive");
    require(latent_horizon >= 1, "DeepModel: latent_horizon must be positive");
    require(exo_horizon >= 1, "DeepModel: exo_horizon must be positive");
    require(exo_dim >= 0, "DeepModel: exo_dim must be non-negative");
    for (Index l = 0; l < static_cast<Index>(layers.size()); ++l) {
        const auto& ml = layers[l];
        ml.hyper.validate();
        require(ml.hyper.input_dim() == layer_input_dim(l),
                "DeepModel: layer input dimension does not match the recurrence layout");
        ml.var.validate_weights(ml.hyper.num_features);
        if (mode == SpectralMode::kFixed) {
            ml.points.validate_against(ml.hyper);
            require(ml.var.spectral_means.size() == 0 && ml.var.spectral_vars.size() == 0,
                    "DeepModel: fixed mode carries no spectral posterior");
        } else {
            ml.var.validate_spectral(ml.hyper);
        }
        if (is_output_layer(l)) {
            require(ml.var.latent_means.size() == 0 && ml.var.latent_vars.size() == 0,
                    "DeepModel: output layer carries no latent states");
        } else {
            require(ml.var.latent_means.size() == num_states,
                    "DeepModel: hidden layer latents must cover every state");
            ml.var.validate_latents();
        }
    }
}

void Dataset::validate() const {
    require(outputs.size() >= 1, "Dataset: needs at least one state");
    require(exogenous.rows() == outputs.size(),
            "Dataset: exogenous rows must match output length");
    require(outputs.allFinite() && exogenous.allFinite(), "Dataset: values must be finite");
}

Normalizer normalize_dataset(Dataset& data) {
    data.validate();
    const double K = static_cast<double>(data.outputs.size());
    Normalizer norm;
    norm.exo_mean = Vector::Zero(data.exogenous.cols());
    norm.exo_scale = Vector::Ones(data.exogenous.cols());
    for (Index q = 0; q < data.exogenous.cols(); ++q) {
        const double mean = data.exogenous.col(q).mean();
        const double sd = std::sqrt((data.exogenous.col(q).array() - mean).square().sum() / K);
        const double scale = sd > 1e-12 ? sd : 1.0;
        norm.exo_mean[q] = mean;
        norm.exo_scale[q] = scale;
        data.exogenous.col(q) = (data.exogenous.col(q).array() - mean) / scale;
    }
    const double mean = data.outputs.mean();
    const double sd = std::sqrt((data.outputs.array() - mean).square().sum() / K);
    norm.out_mean = mean;
    norm.out_scale = sd > 1e-12 ? sd : 1.0;
    data.outputs = (data.outputs.array() - norm.out_mean) / norm.out_scale;
    return norm;
}

StateInputs build_inputs(const DeepModel& model, const Dataset& data, Index layer) {
    require(layer >= 0 && layer < static_cast<Index>(model.layers.size()),
            "build_inputs: layer out of range");
    const Index K = model.num_states;
    const auto cols = latent_column_layout(model, layer);
    const Index latent_width = static_cast<Index>(cols.size());
    const Index exo_width = layer == 0 ? model.exo_horizon * model.exo_dim : 0;
    require(layer != 0 || data.exogenous.cols() == model.exo_dim,
            "build_inputs: exogenous width does not match the model");
    require(data.exogenous.rows() == K, "build_inputs: dataset states do not match the model");

    StateInputs inputs;
    inputs.mean = Matrix::Zero(K, latent_width + exo_width);
    inputs.var = Matrix::Zero(K, latent_width + exo_width);
    for (Index c = 0; c < latent_width; ++c) {
        const auto& vp = model.layers[cols[c].src_layer].var;
        for (Index k = 0; k < K; ++k) {
            const Index src = k - cols[c].lag;
            if (src < 0) continue;  // zero padding before the first state
            inputs.mean(k, c) = vp.latent_means[src];
            inputs.var(k, c) = vp.latent_vars[src];
        }
    }
    if (exo_width > 0) {
        for (Index j = 1; j <= model.exo_horizon; ++j) {
            const Index base = latent_width + (j - 1) * model.exo_dim;
            for (Index k = j; k < K; ++k)
                inputs.mean.row(k).segment(base, model.exo_dim) = data.exogenous.row(k - j);
        }
    }
    return inputs;
}

FrequencyDist layer_frequencies(const DeepModel& model, Index layer) {
    const auto& ml = model.layers[layer];
    return model.mode == SpectralMode::kFixed
               ? frequencies_fixed(ml.points, ml.hyper)
               : frequencies_variational(ml.var.spectral_means, ml.var.spectral_vars, ml.hyper);
}

LayerPsi layer_psi(const DeepModel& model, const Dataset& data, Index layer) {
    const LayerForward f = layer_forward(model, data, layer);
    return {f.psi1, f.psi2};
}

Gaussian1 predictive_posterior(const DeepModel& model, const Dataset& data, Index layer,
                               Index state) {
    require(state >= 0 && state < model.num_states, "predictive_posterior: state out of range");
    const auto& ml = model.layers[layer];
    const StateInputs inputs = build_inputs(model, data, layer);
    const FrequencyDist freq = layer_frequencies(model, layer);
    const Vector row = psi1(freq, ml.hyper, inputs).row(state).transpose();
    const Matrix p2k = psi2_state(freq, ml.hyper, inputs, state);
    const Vector& m = ml.var.weight_mean;
    Gaussian1 out;
    out.mean = row.dot(m);
    const double sn = ml.hyper.sigma_noise;
    out.variance = sn * sn + m.dot(p2k * m) - out.mean * out.mean +
                   p2k.cwiseProduct(ml.var.weight_cov).sum();
    return out;
}

double expected_nll(const DeepModel& model, const Dataset& data) {
    const double K = static_cast<double>(model.num_states);
    double total = 0.0;
    for (Index l = 0; l < static_cast<Index>(model.layers.size()); ++l) {
        const LayerForward f = layer_forward(model, data, l);
        const auto& ml = model.layers[l];
        const double s2 = ml.hyper.sigma_noise * ml.hyper.sigma_noise;
        total += layer_bracket(f, ml.var.weight_mean, ml.var.weight_cov,
                               layer_target(model, data, l), layer_target_var_sum(model, l)) /
                     (2.0 * s2) +
                 0.5 * K * std::log(kTwoPi * s2);
    }
    return total;
}

double kl_q_p(const DeepModel& model) {
    double total = 0.0;
    for (Index l = 0; l < static_cast<Index>(model.layers.size()); ++l) {
        const auto& vp = model.layers[l].var;
        total += weight_kl(vp.weight_mean, vp.weight_cov);
        if (model.mode == SpectralMode::kVariational) {
            for (Index m = 0; m < vp.spectral_means.rows(); ++m)
                for (Index q = 0; q < vp.spectral_means.cols(); ++q)
                    total += gaussian_kl_diag(vp.spectral_means(m, q), vp.spectral_vars(m, q));
        }
        if (!model.is_output_layer(l)) {
            for (Index k = 0; k < vp.latent_means.size(); ++k)
                total += gaussian_kl_diag(vp.latent_means[k], vp.latent_vars[k]);
        }
    }
    return total;
}

BoundParts variational_bound(const DeepModel& model, const Dataset& data) {
    BoundParts parts;
    parts.data_term = expected_nll(model, data);
    parts.kl = kl_q_p(model);
    parts.bound = -(parts.data_term + parts.kl);
    return parts;
}

WeightPosterior optimal_weight_posterior(const Matrix& psi1, const Matrix& psi2,
                                         const Vector& target, double sigma_noise) {
    require(psi2.rows() == psi2.cols() && psi2.rows() == psi1.cols(),
            "optimal_weight_posterior: moment shapes disagree");
    require(psi1.rows() == target.size(), "optimal_weight_posterior: target length mismatch");
    require_domain(sigma_noise > 0.0, "optimal_weight_posterior: noise scale must be positive");
    const double s2 = sigma_noise * sigma_noise;
    Matrix A = psi2;
    A.diagonal().array() += s2;
    Eigen::LLT<Eigen::MatrixXd> llt{Eigen::MatrixXd(A)};
    require_domain(llt.info() == Eigen::Success,
                   "optimal_weight_posterior: normal matrix is not positive definite");
    WeightPosterior out;
    out.mean = llt.solve(psi1.transpose() * target);
    Matrix cov = s2 * llt.solve(Eigen::MatrixXd::Identity(A.rows(), A.cols()));
    out.cov = 0.5 * (cov + cov.transpose());
    return out;
}

void refresh_weight_posteriors(DeepModel& model, const Dataset& data) {
    for (Index l = 0; l < static_cast<Index>(model.layers.size()); ++l) {
        const LayerPsi p = layer_psi(model, data, l);
        WeightPosterior wp = optimal_weight_posterior(p.psi1, p.psi2,
                                                      layer_target(model, data, l),
                                                      model.layers[l].hyper.sigma_noise);
        model.layers[l].var.weight_mean = std::move(wp.mean);
        model.layers[l].var.weight_cov = std::move(wp.cov);
    }
}

Vector pack_parameters(const DeepModel& model) {
    const Layout layout = make_layout(model);
    Vector packed(layout.total);
    for (const Slot& slot : layout.slots) {
        const auto& ml = model.layers[slot.layer];
        switch (slot.kind) {
            case SlotKind::kLogLengthscales:
                packed.segment(slot.offset, slot.count) =
                    ml.hyper.lengthscales.array().log().matrix();
                break;
            case SlotKind::kSpectralMean:
                packed.segment(slot.offset, slot.count) = ml.hyper.spectral_mean;
                break;
            case SlotKind::kShifts:
                write_matrix(packed, slot.offset, ml.hyper.shifts);
                break;
            case SlotKind::kPhases:
                packed.segment(slot.offset, slot.count) = ml.hyper.phases;
                break;
            case SlotKind::kLogSigmaPower:
                packed[slot.offset] = std::log(ml.hyper.sigma_power);
                break;
            case SlotKind::kLogSigmaNoise:
                packed[slot.offset] = std::log(ml.hyper.sigma_noise);
                break;
            case SlotKind::kPointsZ:
                write_matrix(packed, slot.offset, ml.points.Z);
                break;
            case SlotKind::kSpectralAlpha:
                write_matrix(packed, slot.offset, ml.var.spectral_means);
                break;
            case SlotKind::kLogSpectralBeta: {
                Matrix logbeta = ml.var.spectral_vars.array().log().matrix();
                write_matrix(packed, slot.offset, logbeta);
                break;
            }
            case SlotKind::kWeightMean:
                packed.segment(slot.offset, slot.count) = ml.var.weight_mean;
                break;
            case SlotKind::kLatentMean:
                packed.segment(slot.offset, slot.count) = ml.var.latent_means;
                break;
            case SlotKind::kLogLatentVar:
                packed.segment(slot.offset, slot.count) =
                    ml.var.latent_vars.array().log().matrix();
                break;
        }
    }
    return packed;
}

DeepModel unpack_parameters(const DeepModel& prototype, const Vector& packed) {
    const Layout layout = make_layout(prototype);
    require(packed.size() == layout.total, "unpack_parameters: packed length mismatch");
    DeepModel model = prototype;
    for (const Slot& slot : layout.slots) {
        auto& ml = model.layers[slot.layer];
        switch (slot.kind) {
            case SlotKind::kLogLengthscales:
                ml.hyper.lengthscales =
                    packed.segment(slot.offset, slot.count).array().exp().matrix();
                break;
            case SlotKind::kSpectralMean:
                ml.hyper.spectral_mean = packed.segment(slot.offset, slot.count);
                break;
            case SlotKind::kShifts:
                read_matrix(packed, slot.offset, ml.hyper.shifts);
                break;
            case SlotKind::kPhases:
                ml.hyper.phases = packed.segment(slot.offset, slot.count);
                for (Index i = 0; i < ml.hyper.phases.size(); ++i)
                    ml.hyper.phases[i] = wrap_phase(ml.hyper.phases[i]);
                break;
            case SlotKind::kLogSigmaPower:
                ml.hyper.sigma_power = std::exp(packed[slot.offset]);
                break;
            case SlotKind::kLogSigmaNoise:
                ml.hyper.sigma_noise = std::exp(packed[slot.offset]);
                break;
            case SlotKind::kPointsZ:
                read_matrix(packed, slot.offset, ml.points.Z);
                break;
            case SlotKind::kSpectralAlpha:
                read_matrix(packed, slot.offset, ml.var.spectral_means);
                break;
            case SlotKind::kLogSpectralBeta:
                read_matrix(packed, slot.offset, ml.var.spectral_vars);
                ml.var.spectral_vars = ml.var.spectral_vars.array().exp().matrix();
                break;
            case SlotKind::kWeightMean:
                ml.var.weight_mean = packed.segment(slot.offset, slot.count);
                break;
            case SlotKind::kLatentMean:
                ml.var.latent_means = packed.segment(slot.offset, slot.count);
                break;
            case SlotKind::kLogLatentVar:
                ml.var.latent_vars =
                    packed.segment(slot.offset, slot.count).array().exp().matrix();
                break;
        }
    }
    return model;
}

Vector bound_gradient(const DeepModel& model, const Dataset& data) {
    const Layout layout = make_layout(model);
    const Index num_layers = static_cast<Index>(model.layers.size());
    const Index K = model.num_states;

    // Gradients of (expected_nll + kl) with respect to raw parameters,
    // accumulated per layer and converted to packed (log-space) coordinates
    // at the end. Latent gradients collect contributions from every layer
    // whose windows read them, so they live outside the per-layer loop.
    std::vector<Vector> grad_mu(num_layers), grad_lambda(num_layers);
    for (Index l = 0; l + 1 < num_layers; ++l) {
        grad_mu[l] = Vector::Zero(K);
        grad_lambda[l] = Vector::Zero(K);
    }

    struct LayerGrads {
        Vector log_lengthscales, spectral_mean, phases, weight_mean;
        Matrix shifts, points, alpha, log_beta;
        double log_sigma_power = 0.0, log_sigma_noise = 0.0;
    };
    std::vector<LayerGrads> lg(num_layers);

    for (Index l = 0; l < num_layers; ++l) {
        const auto& ml = model.layers[l];
        const auto& hyper = ml.hyper;
        const Index M = hyper.num_features;
        const Index Q = hyper.input_dim();
        const LayerForward f = layer_forward(model, data, l);
        const Vector& m = ml.var.weight_mean;
        const Matrix& s = ml.var.weight_cov;
        const Vector& t = layer_target(model, data, l);
        const double s2 = hyper.sigma_noise * hyper.sigma_noise;

        // Upstream adjoints of the layer nll in the expanded form
        //   [m' psi2 m + tr(psi2 s) + |t|^2 - 2 t' psi1 m] / (2 s2) + const.
        Matrix g1 = (-1.0 / s2) * (t * m.transpose());
        Matrix g2 = (m * m.transpose() + s) / (2.0 * s2);
        const PsiBackward pb = psi_backward(f.freq, hyper, f.inputs, &g1, &g2);

        LayerGrads& g = lg[l];
        g.log_sigma_power =
            g1.cwiseProduct(f.psi1).sum() + 2.0 * g2.cwiseProduct(f.psi2).sum();
        g.log_sigma_noise =
            -layer_bracket(f, m, s, t, layer_target_var_sum(model, l)) / s2 +
            static_cast<double>(K);
        g.weight_mean = (f.psi2 * m - f.psi1.transpose() * t) / s2 + m;  // + KL route
        g.shifts = pb.shifts;
        g.phases = pb.phases;

        // Frequency-map chain: w = z / l + 2 pi p with z either the fixed
        // points or the spectral posterior mean; frequency variance is
        // beta / l^2 in variational mode.
        g.log_lengthscales = Vector::Zero(Q);
        g.spectral_mean = Vector::Zero(Q);
        const Matrix& z = model.mode == SpectralMode::kFixed ? ml.points.Z
                                                             : ml.var.spectral_means;
        for (Index q = 0; q < Q; ++q) {
            const double lq = hyper.lengthscales[q];
            double dlog = 0.0, dp = 0.0;
            for (Index i = 0; i < M; ++i) {
                dlog += pb.freq_mean(i, q) * (-z(i, q) / lq);
                dp += pb.freq_mean(i, q);
            }
            if (model.mode == SpectralMode::kVariational) {
                for (Index i = 0; i < M; ++i)
                    dlog += pb.freq_var(i, q) * (-2.0 * ml.var.spectral_vars(i, q) / (lq * lq));
            }
            g.log_lengthscales[q] = dlog;
            g.spectral_mean[q] = kTwoPi * dp;
        }
        if (model.mode == SpectralMode::kFixed) {
            g.points = Matrix::Zero(M, Q);
            for (Index i = 0; i < M; ++i)
                for (Index q = 0; q < Q; ++q)
                    g.points(i, q) = pb.freq_mean(i, q) / hyper.lengthscales[q];
        } else {
            g.alpha = Matrix::Zero(M, Q);
            g.log_beta = Matrix::Zero(M, Q);
            for (Index i = 0; i < M; ++i) {
                for (Index q = 0; q < Q; ++q) {
                    const double lq = hyper.lengthscales[q];
                    const double beta = ml.var.spectral_vars(i, q);
                    g.alpha(i, q) = pb.freq_mean(i, q) / lq + ml.var.spectral_means(i, q);
                    g.log_beta(i, q) =
                        pb.freq_var(i, q) * beta / (lq * lq) + 0.5 * (beta - 1.0);
                }
            }
        }

        // Window adjoints scatter back onto the latent sequences they read.
        const auto cols = latent_column_layout(model, l);
        for (Index c = 0; c < static_cast<Index>(cols.size()); ++c) {
            const Index sl = cols[c].src_layer;
            for (Index k = cols[c].lag; k < K; ++k) {
                grad_mu[sl][k - cols[c].lag] += pb.input_mean(k, c);
                grad_lambda[sl][k - cols[c].lag] += pb.input_var(k, c);
            }
        }

        // Hidden targets are the layer's own random latents: the mean enters
        // the residual, the variance enters the bracket directly.
        if (!model.is_output_layer(l)) {
            grad_mu[l] += (t - f.psi1 * m) / s2;
            grad_lambda[l].array() += 1.0 / (2.0 * s2);
        }
    }

    // Latent KL route, then the log-space chain for the variances.
    for (Index l = 0; l + 1 < num_layers; ++l) {
        const auto& vp = model.layers[l].var;
        grad_mu[l] += vp.latent_means;
        grad_lambda[l] =
            (grad_lambda[l].array() * vp.latent_vars.array() +
             0.5 * (vp.latent_vars.array() - 1.0))
                .matrix();
    }

    // Assemble in packed order; the bound is minus the accumulated objective.
    Vector grad = Vector::Zero(layout.total);
    for (const Slot& slot : layout.slots) {
        const LayerGrads& g = lg[slot.layer];
        switch (slot.kind) {
            case SlotKind::kLogLengthscales:
                grad.segment(slot.offset, slot.count) = g.log_lengthscales;
                break;
            case SlotKind::kSpectralMean:
                grad.segment(slot.offset, slot.count) = g.spectral_mean;
                break;
            case SlotKind::kShifts:
                write_matrix(grad, slot.offset, g.shifts);
                break;
            case SlotKind::kPhases:
                grad.segment(slot.offset, slot.count) = g.phases;
                break;
            case SlotKind::kLogSigmaPower:
                grad[slot.offset] = g.log_sigma_power;
                break;
            case SlotKind::kLogSigmaNoise:
                grad[slot.offset] = g.log_sigma_noise;
                break;
            case SlotKind::kPointsZ:
                write_matrix(grad, slot.offset, g.points);
                break;
            case SlotKind::kSpectralAlpha:
                write_matrix(grad, slot.offset, g.alpha);
                break;
            case SlotKind::kLogSpectralBeta:
                write_matrix(grad, slot.offset, g.log_beta);
                break;
            case SlotKind::kWeightMean:
                grad.segment(slot.offset, slot.count) = g.weight_mean;
                break;
            case SlotKind::kLatentMean:
                grad.segment(slot.offset, slot.count) = grad_mu[slot.layer];
                break;
            case SlotKind::kLogLatentVar:
                grad.segment(slot.offset, slot.count) = grad_lambda[slot.layer];
                break;
        }
    }
    return -grad;
}

TrainResult train(const DeepModel& model, const Dataset& data, const TrainConfig& config) {
    require(config.iterations >= 0, "train: iteration count must be non-negative");
    require(config.learning_rate > 0.0, "train: learning rate must be positive");
    require(config.refresh_every >= 1, "train: refresh cadence must be positive");
    model.validate();
    data.validate();

    TrainResult result;
    result.initial_bound = variational_bound(model, data).bound;
    require_domain(std::isfinite(result.initial_bound),
                   "train: bound is not finite at the initial point");

    // The closed-form (m, s) update is the exact maximizer of the bound in
    // the weight posterior with everything else fixed, so refreshing never
    // lowers the bound; starting with one avoids chasing gradients through
    // an arbitrary weight initialization.
    DeepModel current = model;
    refresh_weight_posteriors(current, data);
    Vector theta = pack_parameters(current);

    DeepModel best = current;
    double best_bound = variational_bound(current, data).bound;

    Adam adam(theta.size(), config.learning_rate);
    result.bound_trace.reserve(static_cast<std::size_t>(config.iterations));
    for (int it = 1; it <= config.iterations; ++it) {
        BoundParts parts;
        // A diverging step can push scale parameters outside their domain
        // (exp overflow to 0 or inf); surface that the same way as a
        // non-finite bound instead of leaking a precondition error.
        try {
            theta += adam.step(bound_gradient(current, data));
            current = unpack_parameters(current, theta);
            if (it % config.refresh_every == 0) {
                refresh_weight_posteriors(current, data);
                theta = pack_parameters(current);  // keep the packed state in sync
            }
            parts = variational_bound(current, data);
        } catch (const std::exception& e) {
            std::ostringstream msg;
            msg << "train: optimization left the valid domain at iteration " << it << " ("
                << e.what() << ")";
            throw std::runtime_error(msg.str());
        }
        if (!std::isfinite(parts.bound)) {
            std::ostringstream msg;
            msg << "train: bound turned non-finite at iteration " << it
                << " (data_term=" << parts.data_term << ", kl=" << parts.kl << ")";
            throw std::runtime_error(msg.str());
        }
        result.bound_trace.push_back(parts.bound);
        if (parts.bound > best_bound) {
            best_bound = parts.bound;
            best = current;
        }
    }
    result.model = std::move(best);
    result.final_bound = best_bound;
    return result;
}

DeepModel make_initial_model(Index num_states, Index depth, Index num_features,
                             Index latent_horizon, Index exo_horizon, Index exo_dim,
                             SpectralMode mode, const Dataset& data, unsigned seed) {
    require(depth >= 1, "make_initial_model: depth must be at least 1");
    require(num_features >= 1, "make_initial_model: needs at least one feature");
    data.validate();
    require(data.outputs.size() == num_states,
            "make_initial_model: dataset states do not match num_states");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uphase(0.0, kTwoPi);

    const double out_mean = data.outputs.mean();
    const double out_sd = std::sqrt((data.outputs.array() - out_mean).square().sum() /
                                    static_cast<double>(data.outputs.size()));
    const double sigma_noise = 0.1 * (out_sd > 1e-12 ? out_sd : 1.0);

    DeepModel model;
    model.num_states = num_states;
    model.latent_horizon = latent_horizon;
    model.exo_horizon = exo_horizon;
    model.exo_dim = exo_dim;
    model.mode = mode;
    model.layers.resize(static_cast<std::size_t>(depth) + 1);
    for (Index l = 0; l <= depth; ++l) {
        auto& ml = model.layers[l];
        const Index Q = model.layer_input_dim(l);
        ml.hyper.num_features = num_features;
        ml.hyper.sigma_power = 1.0;
        ml.hyper.sigma_noise = sigma_noise;
        ml.hyper.lengthscales = Vector::Ones(Q);
        ml.hyper.spectral_mean = Vector::Zero(Q);
        ml.hyper.shifts = Matrix::Zero(num_features, Q);
        ml.hyper.phases = Vector(num_features);
        for (Index i = 0; i < num_features; ++i) ml.hyper.phases[i] = uphase(rng);

        Matrix z(num_features, Q);
        for (Index i = 0; i < num_features; ++i)
            for (Index q = 0; q < Q; ++q) z(i, q) = normal(rng);
        if (mode == SpectralMode::kFixed) {
            ml.points.Z = z;
        } else {
            ml.var.spectral_means = z;
            ml.var.spectral_vars = Matrix::Ones(num_features, Q);
        }

        ml.var.weight_mean = Vector(num_features);
        for (Index i = 0; i < num_features; ++i) ml.var.weight_mean[i] = normal(rng);
        ml.var.weight_cov = Matrix::Identity(num_features, num_features);

        if (l < depth) {
            ml.var.latent_means = Vector(num_states);
            for (Index k = 0; k < num_states; ++k) ml.var.latent_means[k] = normal(rng);
            ml.var.latent_vars = Vector::Ones(num_states);
        }
    }
    model.validate();
    return model;
}

Matrix generate_quasi_real(const DeepModel& model, const Dataset& data, Index num_samples,
                           unsigned seed) {
    require(num_samples >= 1, "generate_quasi_real: needs at least one sample");
    const Index L = model.depth();
    const auto& ml = model.layers[L];
    const StateInputs inputs = build_inputs(model, data, L);
    const FrequencyDist freq = layer_frequencies(model, L);
    const Matrix p1 = psi1(freq, ml.hyper, inputs);
    const Index K = model.num_states;

    Vector mean(K), sd(K);
    const Vector& m = ml.var.weight_mean;
    const double s2 = ml.hyper.sigma_noise * ml.hyper.sigma_noise;
    for (Index k = 0; k < K; ++k) {
        const Matrix p2k = psi2_state(freq, ml.hyper, inputs, k);
        const double mu = p1.row(k).dot(m);
        const double var = s2 + m.dot(p2k * m) - mu * mu +
                           p2k.cwiseProduct(ml.var.weight_cov).sum();
        mean[k] = mu;
        sd[k] = std::sqrt(std::max(var, 0.0));
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix samples(K, num_samples);
    for (Index i = 0; i < num_samples; ++i)
        for (Index k = 0; k < K; ++k) samples(k, i) = mean[k] + sd[k] * normal(rng);
    return samples;
}

}  // namespace drgp
