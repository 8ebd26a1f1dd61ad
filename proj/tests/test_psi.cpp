//
//  test_psi.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include <Eigen/Eigenvalues>
#include <cmath>
#include <random>

#include "doctest.h"
#include "drgp/psi.hpp"

using drgp::FrequencyDist;
using drgp::Index;
using drgp::Matrix;
using drgp::SpectralLayerHyper;
using drgp::SpectralPoints;
using drgp::StateInputs;
using drgp::Vector;

namespace {

struct Instance {
    SpectralLayerHyper hyper;
    FrequencyDist freq;
    StateInputs inputs;
};

// Random VSS-style instance; variances scaled down so damping stays mild and
// Monte Carlo standard errors stay informative.
Instance random_instance(Index K, Index M, Index Q, unsigned seed, bool zero_freq_var = false,
                         bool zero_input_var = false) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.3, 1.8);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> phase(0.0, drgp::kTwoPi);

    Instance inst;
    auto& h = inst.hyper;
    h.num_features = M;
    h.sigma_power = unit(rng);
    h.sigma_noise = 0.1;
    h.lengthscales = Vector::NullaryExpr(Q, [&](Index) { return unit(rng); });
    h.spectral_mean = Vector::NullaryExpr(Q, [&](Index) { return 0.25 * gauss(rng); });
    h.shifts = Matrix::NullaryExpr(M, Q, [&](Index, Index) { return 0.7 * gauss(rng); });
    h.phases = Vector::NullaryExpr(M, [&](Index) { return phase(rng); });

    Matrix alpha = Matrix::NullaryExpr(M, Q, [&](Index, Index) { return gauss(rng); });
    Matrix beta = Matrix::NullaryExpr(M, Q, [&](Index, Index) { return 0.2 * unit(rng); });
    inst.freq = drgp::frequencies_variational(alpha, beta, h);
    if (zero_freq_var) inst.freq.var.setZero();

    inst.inputs.mean = Matrix::NullaryExpr(K, Q, [&](Index, Index) { return gauss(rng); });
    inst.inputs.var = Matrix::NullaryExpr(K, Q, [&](Index, Index) { return 0.3 * unit(rng); });
    if (zero_input_var) inst.inputs.var.setZero();
    return inst;
}

Matrix features_at_means(const Instance& inst) {
    // With all variances zero the statistics must collapse to plain features
    // of the mean windows under the mean frequencies.
    const Index K = inst.inputs.num_states(), M = inst.hyper.num_features;
    Matrix phi(K, M);
    for (Index k = 0; k < K; ++k)
        for (Index m = 0; m < M; ++m) {
            double arg = inst.hyper.phases[m];
            for (Index q = 0; q < inst.inputs.dim(); ++q)
                arg += inst.freq.mean(m, q) *
                       (inst.inputs.mean(k, q) - inst.hyper.shifts(m, q));
            phi(k, m) = inst.hyper.feature_scale() * std::cos(arg);
        }
    return phi;
}

}  // namespace

TEST_SUITE_BEGIN("psi");

TEST_CASE("zero-variance limit collapses to plain features") {
    Instance inst = random_instance(4, 5, 3, 101);
    inst.freq.var.setConstant(1e-12);
    inst.inputs.var.setConstant(1e-12);
    const Matrix phi = features_at_means(inst);

    Matrix p1 = drgp::psi1(inst.freq, inst.hyper, inst.inputs);
    CHECK((p1 - phi).lpNorm<Eigen::Infinity>() < 1e-6);

    Matrix p2 = drgp::psi2(inst.freq, inst.hyper, inst.inputs);
    CHECK((p2 - phi.transpose() * phi).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("entry magnitudes respect the damped-cosine bound") {
    for (unsigned seed : {7u, 8u, 9u}) {
        Instance inst = random_instance(5, 6, 2, seed);
        Matrix p1 = drgp::psi1(inst.freq, inst.hyper, inst.inputs);
        CHECK(p1.array().abs().maxCoeff() <= inst.hyper.feature_scale() * (1.0 + 1e-12));

        Matrix p2 = drgp::psi2(inst.freq, inst.hyper, inst.inputs);
        const double cap = 2.0 * inst.hyper.sigma_power * inst.hyper.sigma_power *
                           static_cast<double>(inst.inputs.num_states());
        CHECK(p2.trace() <= cap * (1.0 + 1e-12));
    }
}

TEST_CASE("analytic statistics match the Monte Carlo oracle") {
    // Small instances with 1e6 samples; agreement within 4 standard errors.
    // The acceptance suite runs the wide 20-instance sweep; this is the
    // fast per-build check.
    for (unsigned seed : {11u, 12u}) {
        Instance inst = random_instance(3, 4, 2, seed);
        auto mc = drgp::monte_carlo_psi(inst.freq, inst.hyper, inst.inputs, 1000000, seed);

        Matrix p1 = drgp::psi1(inst.freq, inst.hyper, inst.inputs);
        Matrix z1 = (p1 - mc.psi1).cwiseQuotient(mc.psi1_se.cwiseMax(1e-12));
        CAPTURE(seed);
        CHECK(z1.array().abs().maxCoeff() < 4.0);

        Matrix p2 = drgp::psi2(inst.freq, inst.hyper, inst.inputs);
        Matrix z2 = (p2 - mc.psi2).cwiseQuotient(mc.psi2_se.cwiseMax(1e-12));
        CHECK(z2.array().abs().maxCoeff() < 4.0);
    }
}

TEST_CASE("cross statistics match the Monte Carlo oracle") {
    Instance inst = random_instance(3, 2, 1, 21);
    Matrix cross = drgp::psi_cross_vss(inst.freq, inst.hyper, inst.inputs, 0, 2);
    auto mc = drgp::monte_carlo_psi_cross(inst.freq, inst.hyper, inst.inputs, 0, 2, 1000000, 99);
    Matrix z = (cross - mc.value).cwiseQuotient(mc.se.cwiseMax(1e-12));
    CHECK(z.array().abs().maxCoeff() < 4.0);
}

TEST_CASE("cross statistics transpose symmetry") {
    Instance inst = random_instance(4, 3, 2, 31);
    Matrix a = drgp::psi_cross_vss(inst.freq, inst.hyper, inst.inputs, 1, 3);
    Matrix b = drgp::psi_cross_vss(inst.freq, inst.hyper, inst.inputs, 3, 1);
    CHECK((a - b.transpose()).lpNorm<Eigen::Infinity>() < 1e-14);
    CHECK_THROWS_AS((void)drgp::psi_cross_vss(inst.freq, inst.hyper, inst.inputs, 2, 2),
                    std::domain_error);
}

TEST_CASE("cross diagonal at equal states reduces to the single-state form") {
    // Two distinct states with identical means and variances: the diagonal of
    // the cross matrix must equal the doubled-variance damped-cosine pair,
    // transcribed here independently.
    Instance inst = random_instance(2, 3, 2, 41);
    inst.inputs.mean.row(1) = inst.inputs.mean.row(0);
    inst.inputs.var.row(1) = inst.inputs.var.row(0);
    Matrix cross = drgp::psi_cross_vss(inst.freq, inst.hyper, inst.inputs, 0, 1);

    const Index Q = 2;
    const double s2 = inst.hyper.sigma_power * inst.hyper.sigma_power /
                      static_cast<double>(inst.hyper.num_features);
    for (Index m = 0; m < inst.hyper.num_features; ++m) {
        auto term = [&](double mu_scale, double shift_scale, double c) {
            double tprod = 1.0, quad = 0.0, phase = c;
            for (Index q = 0; q < Q; ++q) {
                const double sv = 2.0 * inst.inputs.var(0, q);
                const double wv = inst.freq.var(m, q);
                const double wb = inst.freq.mean(m, q);
                const double mu =
                    mu_scale * inst.inputs.mean(0, q) - shift_scale * inst.hyper.shifts(m, q);
                const double t = 1.0 + sv * wv;
                tprod *= t;
                quad += (sv * wb * wb + wv * mu * mu) / t;
                phase += wb * mu / t;
            }
            return std::exp(-0.5 * std::log(tprod) - 0.5 * quad) * std::cos(phase);
        };
        const double expected =
            s2 * (term(0.0, 0.0, 0.0) + term(2.0, 2.0, 2.0 * inst.hyper.phases[m]));
        CHECK(cross(m, m) == doctest::Approx(expected).epsilon(1e-8));
    }
}

TEST_CASE("feature covariance is PSD") {
    for (unsigned seed : {51u, 52u, 53u, 54u}) {
        Instance inst = random_instance(6, 5, 3, seed);
        Matrix p1 = drgp::psi1(inst.freq, inst.hyper, inst.inputs);
        Matrix p2 = drgp::psi2(inst.freq, inst.hyper, inst.inputs);
        Matrix covlike = p2 - p1.transpose() * p1;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(covlike);
        CHECK(es.eigenvalues().minCoeff() >= -1e-10 * p2.trace());
    }
}

TEST_CASE("scaling latent variances only dampens") {
    // With zero spectral variance the statistic is exp(-w^T S w / 2) times a
    // fixed cosine; growing S can only shrink magnitudes.
    Instance inst = random_instance(4, 5, 2, 61, /*zero_freq_var=*/true);
    Matrix p1 = drgp::psi1(inst.freq, inst.hyper, inst.inputs);
    StateInputs wider = inst.inputs;
    wider.var *= 3.0;
    Matrix p1w = drgp::psi1(inst.freq, inst.hyper, wider);
    CHECK(((p1.array().abs() - p1w.array().abs()) >= -1e-14).all());
}

TEST_CASE("monte carlo oracle contracts") {
    Instance inst = random_instance(3, 4, 2, 71, true, true);
    // Zero variances: the estimator is deterministic and exact.
    auto mc = drgp::monte_carlo_psi(inst.freq, inst.hyper, inst.inputs, 1000, 5);
    CHECK((mc.psi1 - features_at_means(inst)).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK(mc.psi1_se.lpNorm<Eigen::Infinity>() < 1e-12);

    Instance noisy = random_instance(3, 4, 2, 72);
    auto a = drgp::monte_carlo_psi(noisy.freq, noisy.hyper, noisy.inputs, 4000, 9);
    auto b = drgp::monte_carlo_psi(noisy.freq, noisy.hyper, noisy.inputs, 4000, 9);
    CHECK((a.psi1 - b.psi1).lpNorm<Eigen::Infinity>() == 0.0);
    auto c = drgp::monte_carlo_psi(noisy.freq, noisy.hyper, noisy.inputs, 4000, 10);
    CHECK((a.psi1 - c.psi1).lpNorm<Eigen::Infinity>() > 0.0);

    // CLT scaling: quadrupling the sample count halves the mean SE (+-20%).
    auto d = drgp::monte_carlo_psi(noisy.freq, noisy.hyper, noisy.inputs, 16000, 9);
    const double ratio = a.psi1_se.mean() / d.psi1_se.mean();
    CHECK(ratio > 2.0 * 0.8);
    CHECK(ratio < 2.0 * 1.2);

    CHECK_THROWS_AS(
        (void)drgp::monte_carlo_psi(noisy.freq, noisy.hyper, noisy.inputs, 999, 1),
        std::invalid_argument);
}

TEST_CASE("spec-shaped wrappers assemble first-layer windows") {
    const Index K = 5, M = 3, H = 2;
    std::mt19937_64 rng(81);
    std::normal_distribution<double> gauss(0.0, 1.0);

    SpectralLayerHyper h;
    h.num_features = M;
    h.sigma_power = 1.1;
    h.sigma_noise = 0.1;
    h.lengthscales = Vector::Constant(H + 2, 0.9);
    h.spectral_mean = Vector::Zero(H + 2);
    h.shifts = Matrix::NullaryExpr(M, H + 2, [&](Index, Index) { return gauss(rng); });
    h.phases = Vector::Constant(M, 1.0);

    drgp::VariationalParams vp;
    vp.latent_means = Vector::NullaryExpr(K, [&](Index) { return gauss(rng); });
    vp.latent_vars = Vector::Constant(K, 0.2);
    vp.spectral_means = Matrix::NullaryExpr(M, H + 2, [&](Index, Index) { return gauss(rng); });
    vp.spectral_vars = Matrix::Constant(M, H + 2, 0.15);

    Matrix exo = Matrix::NullaryExpr(K, 2, [&](Index, Index) { return gauss(rng); });

    Matrix p1 = drgp::psi1(drgp::SpectralMode::kVariational, vp, SpectralPoints{}, h,
                           exo, H, 1);

    // Hand-assembled window for state k=3: [mu_2, mu_1, exo_2].
    StateInputs si;
    si.mean = Matrix::Zero(K, H + 2);
    si.var = Matrix::Zero(K, H + 2);
    for (Index k = 0; k < K; ++k) {
        for (Index j = 1; j <= H; ++j)
            if (k - j >= 0) {
                si.mean(k, j - 1) = vp.latent_means[k - j];
                si.var(k, j - 1) = vp.latent_vars[k - j];
            }
        if (k - 1 >= 0) si.mean.row(k).segment(H, 2) = exo.row(k - 1);
    }
    FrequencyDist freq = drgp::frequencies_variational(vp.spectral_means, vp.spectral_vars, h);
    Matrix expected = drgp::psi1(freq, h, si);
    CHECK((p1 - expected).lpNorm<Eigen::Infinity>() == 0.0);

    // Zero-padding: state 0 has an all-zero window regardless of latents.
    StateInputs win = drgp::lagged_inputs(vp.latent_means, vp.latent_vars, H, exo, 1);
    CHECK(win.mean.row(0).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(win.var.row(0).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("negative variances are rejected") {
    Instance inst = random_instance(3, 3, 2, 91);
    StateInputs bad = inst.inputs;
    bad.var(1, 1) = -0.5;
    CHECK_THROWS_AS((void)drgp::psi1(inst.freq, inst.hyper, bad), std::domain_error);

    drgp::VariationalParams vp;
    vp.latent_means = Vector::Zero(3);
    vp.latent_vars = Vector::Constant(3, 0.0);  // not strictly positive
    CHECK_THROWS_AS(vp.validate_latents(), std::domain_error);
}

TEST_CASE("reverse mode matches central differences") {
    Instance inst = random_instance(3, 4, 2, 111);
    const Index K = 3, M = 4, Q = 2;
    std::mt19937_64 rng(112);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const Matrix C1 = Matrix::NullaryExpr(K, M, [&](Index, Index) { return gauss(rng); });
    const Matrix C2 = Matrix::NullaryExpr(M, M, [&](Index, Index) { return gauss(rng); });

    auto objective = [&](const Instance& in) {
        return (C1.array() * drgp::psi1(in.freq, in.hyper, in.inputs).array()).sum() +
               (C2.array() * drgp::psi2(in.freq, in.hyper, in.inputs).array()).sum();
    };

    drgp::PsiBackward g = drgp::psi_backward(inst.freq, inst.hyper, inst.inputs, &C1, &C2);

    const double h = 1e-6;
    auto check_grad = [&](double* slot, double analytic) {
        const double saved = *slot;
        *slot = saved + h;
        const double up = objective(inst);
        *slot = saved - h;
        const double dn = objective(inst);
        *slot = saved;
        const double fd = (up - dn) / (2.0 * h);
        CHECK(analytic == doctest::Approx(fd).epsilon(5e-5).scale(1.0));
    };

    for (Index m = 0; m < M; ++m)
        for (Index q = 0; q < Q; ++q) {
            check_grad(&inst.freq.mean(m, q), g.freq_mean(m, q));
            check_grad(&inst.freq.var(m, q), g.freq_var(m, q));
            check_grad(&inst.hyper.shifts(m, q), g.shifts(m, q));
        }
    for (Index k = 0; k < K; ++k)
        for (Index q = 0; q < Q; ++q) {
            check_grad(&inst.inputs.mean(k, q), g.input_mean(k, q));
            check_grad(&inst.inputs.var(k, q), g.input_var(k, q));
        }
    for (Index m = 0; m < M; ++m) check_grad(&inst.hyper.phases[m], g.phases[m]);
}

TEST_SUITE_END();
