//
//  simd_scalar.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/simd.hpp"

#include <cmath>

namespace drgp::simd {
namespace {

void cos_array_ref(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::cos(x[i]);
}

void cos_scale_ref(const double* x, double scale, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = scale * std::cos(x[i]);
}

void exp_array_ref(const double* x, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i]);
}

void exp_cos_ref(const double* log_amp, const double* phase, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(log_amp[i]) * std::cos(phase[i]);
}

// Two-level blocked sum keeps the accumulation error O(sqrt(n)) ulp instead
// of O(n); at n = 1e7 a naive running sum loses digits the MC tolerances need.
double mean_exp_scaled_ref(const double* x, double lambda, std::size_t n) {
    constexpr std::size_t kBlock = 4096;
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += kBlock) {
        const std::size_t end = start + kBlock < n ? start + kBlock : n;
        double block = 0.0;
        for (std::size_t i = start; i < end; ++i) block += std::exp(lambda * x[i]);
        total += block;
    }
    return total / static_cast<double>(n);
}

const Kernels kScalar = {
    "scalar",        cos_array_ref, cos_scale_ref,
    exp_array_ref,   exp_cos_ref,   mean_exp_scaled_ref,
};

}  // namespace

const Kernels& scalar_kernels() { return kScalar; }

}  // namespace drgp::simd
