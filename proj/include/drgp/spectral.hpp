//
//  spectral.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include "drgp/common.hpp"

namespace drgp {

// Hyperparameters of one trigonometric feature layer.
//
// A feature is sqrt(2 sigma_power^2 / M) * cos(w_m^T (x - u_m) + b_m) with
// frequency w_m = z_m / l + 2*pi*p (elementwise lengthscale division). The
// stored lengthscales are the kernel lengthscales; the 2*pi of the underlying
// period convention is folded into the frequency map here, and spectral_mean
// stores the vector entering the cosine, not its elementwise reciprocal.
struct SpectralLayerHyper {
    Index num_features = 0;  // M
    double sigma_power = 1.0;
    Vector lengthscales;   // size Q, > 0
    Vector spectral_mean;  // size Q, free sign
    Matrix shifts;         // M x Q, rows u_m
    Vector phases;         // size M, in [0, 2*pi)
    double sigma_noise = 1.0;

    Index input_dim() const { return lengthscales.size(); }
    double feature_scale() const;  // sqrt(2 sigma_power^2 / M)

    void validate() const;
};

// Spectral sample points z_m, one row per feature.
struct SpectralPoints {
    Matrix Z;  // M x Q

    void validate_against(const SpectralLayerHyper& hyper) const;
};

// Frequencies w_m = z_m / l + 2*pi*p as rows; shared by features and the
// Gaussian-expectation code.
Matrix frequency_matrix(const Matrix& Z, const SpectralLayerHyper& hyper);

// phi(x, Z): entry m is sqrt(2 sigma_power^2/M) cos(w_m^T (x - u_m) + b_m).
Vector feature_vector(const Vector& x, const SpectralPoints& points,
                      const SpectralLayerHyper& hyper);

// Row k is feature_vector(X.row(k)).
Matrix feature_matrix(const Matrix& X, const SpectralPoints& points,
                      const SpectralLayerHyper& hyper);

// Phi * Phi^T; symmetric PSD by construction, rank <= min(K, M).
Matrix kernel_approx(const Matrix& X, const SpectralPoints& points,
                     const SpectralLayerHyper& hyper);

}  // namespace drgp
