//
//  simd.hpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#pragma once

#include <cstddef>
#include <vector>

namespace drgp::simd {

// Elementwise transcendental kernels used by the feature / expectation /
// Monte Carlo hot loops. Every entry point has a scalar reference
// implementation and may have wider variants; the active set is chosen once
// at startup from CPU capabilities and can be overridden with the
// DRGP_SIMD environment variable ("scalar", "avx2").
struct Kernels {
    const char* name;

    // out[i] = cos(x[i])
    void (*cos_array)(const double* x, double* out, std::size_t n);

    // out[i] = scale * cos(x[i])
    void (*cos_scale)(const double* x, double scale, double* out, std::size_t n);

    // out[i] = exp(x[i])
    void (*exp_array)(const double* x, double* out, std::size_t n);

    // out[i] = exp(log_amp[i]) * cos(phase[i]); the damped-cosine finisher.
    void (*exp_cos)(const double* log_amp, const double* phase, double* out, std::size_t n);

    // mean_i exp(lambda * x[i]), blocked summation.
    double (*mean_exp_scaled)(const double* x, double lambda, std::size_t n);
};

// Kernel set selected for this process. Stable for the process lifetime.
const Kernels& active();

// All kernel sets usable on this CPU (reference first); for equivalence tests.
std::vector<const Kernels*> available();

// Test hook: force a named set regardless of environment. Returns false if
// the name is unknown or unsupported on this CPU.
bool force(const char* name);

const Kernels& scalar_kernels();

#if defined(__x86_64__) || defined(_M_X64)
// Null when the build lacks AVX2 support.
const Kernels* avx2_kernels();
#endif

}  // namespace drgp::simd
