//
//  optim.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/optim.hpp"

#include <algorithm>
#include <cmath>

namespace drgp {

Adam::Adam(Index dim, double learning_rate)
    : lr_(learning_rate), m_(Vector::Zero(dim)), v_(Vector::Zero(dim)) {}

Vector Adam::step(const Vector& gradient) {
    require(gradient.size() == m_.size(), "Adam: gradient dimension mismatch");
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * gradient;
    v_ = beta2_ * v_ + (1.0 - beta2_) * gradient.array().square().matrix();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    Vector update(m_.size());
    for (Index i = 0; i < m_.size(); ++i) {
        const double mhat = m_[i] / c1;
        const double vhat = v_[i] / c2;
        update[i] = lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    return update;
}

Vector finite_difference_gradient(const std::function<double(const Vector&)>& f,
                                  const Vector& x, double h) {
    require(h > 0.0, "finite_difference_gradient: step must be positive");
    Vector grad(x.size());
    Vector probe = x;
    for (Index i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        probe[i] = xi + h;
        const double up = f(probe);
        probe[i] = xi - h;
        const double down = f(probe);
        probe[i] = xi;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

double max_relative_error(const Vector& a, const Vector& b) {
    require(a.size() == b.size(), "max_relative_error: dimension mismatch");
    double worst = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        const double scale = std::max(1.0, std::abs(b[i]));
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

}  // namespace drgp
