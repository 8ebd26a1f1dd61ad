//
//  common.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace drgp {

// Dense row-major storage throughout; sizes are desk-scale (K, M <= 1024).
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// Shape/size violations of an operation's preconditions.
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Mathematical domain violations (non-positive variance, undefined MGF, ...).
inline void require_domain(bool cond, const std::string& msg) {
    if (!cond) throw std::domain_error(msg);
}

}  // namespace drgp
