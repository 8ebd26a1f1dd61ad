//
//  optim.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <functional>

#include "drgp/common.hpp"

namespace drgp {

// Adam ascent state over a flat parameter vector. step() returns the update
// to ADD to the parameters for a gradient of the objective being maximized.
class Adam {
public:
    Adam(Index dim, double learning_rate);

    Vector step(const Vector& gradient);

private:
    double lr_;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long t_ = 0;
    Vector m_;
    Vector v_;
};

// Central finite-difference gradient of a scalar function, one coordinate at
// a time. Used to validate analytic gradients.
Vector finite_difference_gradient(const std::function<double(const Vector&)>& f,
                                  const Vector& x, double h);

// Largest relative gradient discrepancy, with a unit floor on the scale:
//   max_i |a_i - b_i| / max(1, |b_i|)
double max_relative_error(const Vector& a, const Vector& b);

}  // namespace drgp
