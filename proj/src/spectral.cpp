//
//  spectral.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/spectral.hpp"

#include <cmath>

#include "drgp/simd.hpp"

namespace drgp {

double SpectralLayerHyper::feature_scale() const {
    return std::sqrt(2.0 * sigma_power * sigma_power / static_cast<double>(num_features));
}

void SpectralLayerHyper::validate() const {
    require(num_features >= 1, "spectral hyper: num_features must be >= 1");
    require(sigma_power > 0.0, "spectral hyper: sigma_power must be > 0");
    require(sigma_noise > 0.0, "spectral hyper: sigma_noise must be > 0");
    require(lengthscales.size() >= 1, "spectral hyper: empty lengthscales");
    require((lengthscales.array() > 0.0).all(), "spectral hyper: lengthscales must be > 0");
    require(spectral_mean.size() == lengthscales.size(),
            "spectral hyper: spectral_mean size mismatch");
    require(shifts.rows() == num_features && shifts.cols() == lengthscales.size(),
            "spectral hyper: shifts must be M x Q");
    require(phases.size() == num_features, "spectral hyper: phases size mismatch");
    require((phases.array() >= 0.0).all() && (phases.array() < kTwoPi).all(),
            "spectral hyper: phases must lie in [0, 2*pi)");
}

void SpectralPoints::validate_against(const SpectralLayerHyper& hyper) const {
    require(Z.rows() == hyper.num_features && Z.cols() == hyper.input_dim(),
            "spectral points: Z must be M x Q");
}

Matrix frequency_matrix(const Matrix& Z, const SpectralLayerHyper& hyper) {
    Matrix W = Z.array().rowwise() / hyper.lengthscales.transpose().array();
    W.array().rowwise() += kTwoPi * hyper.spectral_mean.transpose().array();
    return W;
}

namespace {

// arg[k][m] = w_m^T x_k + (b_m - w_m^T u_m), then scale * cos(...).
Matrix features_from_args(const Matrix& X, const SpectralPoints& points,
                          const SpectralLayerHyper& hyper) {
    const Matrix W = frequency_matrix(points.Z, hyper);
    Vector offset = hyper.phases - (W.array() * hyper.shifts.array()).rowwise().sum().matrix();
    Matrix args = X * W.transpose();
    args.array().rowwise() += offset.transpose().array();
    Matrix phi(args.rows(), args.cols());
    simd::active().cos_scale(args.data(), hyper.feature_scale(), phi.data(),
                             static_cast<std::size_t>(args.size()));
    return phi;
}

}  // namespace

Vector feature_vector(const Vector& x, const SpectralPoints& points,
                      const SpectralLayerHyper& hyper) {
    hyper.validate();
    points.validate_against(hyper);
    require(x.size() == hyper.input_dim(), "feature_vector: x has wrong dimension");
    Matrix X = x.transpose();
    return features_from_args(X, points, hyper).row(0);
}

Matrix feature_matrix(const Matrix& X, const SpectralPoints& points,
                      const SpectralLayerHyper& hyper) {
    hyper.validate();
    points.validate_against(hyper);
    require(X.rows() >= 1, "feature_matrix: X must have at least one row");
    require(X.cols() == hyper.input_dim(), "feature_matrix: X has wrong column count");
    return features_from_args(X, points, hyper);
}

Matrix kernel_approx(const Matrix& X, const SpectralPoints& points,
                     const SpectralLayerHyper& hyper) {
    const Matrix phi = feature_matrix(X, points, hyper);
    // Rank-update keeps the result exactly symmetric.
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(phi.rows(), phi.rows());
    gram.selfadjointView<Eigen::Lower>().rankUpdate(Eigen::MatrixXd(phi));
    gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
    return gram;
}

}  // namespace drgp
