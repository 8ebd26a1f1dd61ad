//
//  simd_avx2.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

// Compiled with -mavx2 -mfma (see CMakeLists); nothing here may be inlined
// into generic TUs. Callers go through the dispatch table only.

#include "drgp/simd.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>
#include <cstdint>
#include <cstring>

namespace drgp::simd {
namespace {

// Polynomial kernels follow the classic Cephes double-precision minimax fits.
// Range reduction is Cody-Waite in three parts, exact while the quadrant
// index stays below 2^26 (|x| up to ~1e7); phases produced by this library
// are far smaller. exp arguments are clamped to [-708, 709] (normal range).

constexpr double kTwoOverPi = 6.36619772367581382433e-01;
constexpr double kPio2A = 1.57079625129699707031e+00;
constexpr double kPio2B = 7.54978941586159635335e-08;
constexpr double kPio2C = 5.39030285815811905290e-15;
// 2^52 + 2^51; adding it moves a small integral double into the low mantissa.
constexpr double kShifter = 6755399441055744.0;

constexpr double kLog2E = 1.44269504088896340736e+00;
constexpr double kLn2Hi = 6.93145751953125e-01;
constexpr double kLn2Lo = 1.42860682030941723212e-06;
constexpr double kExpMax = 709.0;
constexpr double kExpMin = -708.0;

inline __m256d poly_sin(__m256d z, __m256d r) {
    __m256d p = _mm256_set1_pd(1.58962301576546568060e-10);
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(-2.50507477628578072866e-8));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(2.75573136213857245213e-6));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(-1.98412698295895385996e-4));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(8.33333333332211858878e-3));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(-1.66666666666666307295e-1));
    return _mm256_fmadd_pd(_mm256_mul_pd(r, z), p, r);
}

inline __m256d poly_cos(__m256d z) {
    __m256d p = _mm256_set1_pd(-1.13585365213876817300e-11);
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(2.08757008419747316778e-9));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(-2.75573141792967388112e-7));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(2.48015872888517179954e-5));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(-1.38888888888730564116e-3));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(4.16666666666665929218e-2));
    __m256d zz = _mm256_mul_pd(z, z);
    __m256d c = _mm256_fmadd_pd(zz, p, _mm256_set1_pd(1.0));
    return _mm256_fnmadd_pd(z, _mm256_set1_pd(0.5), c);
}

inline __m256d cos4(__m256d x) {
    __m256d q = _mm256_round_pd(_mm256_mul_pd(x, _mm256_set1_pd(kTwoOverPi)),
                                _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256d r = _mm256_fnmadd_pd(q, _mm256_set1_pd(kPio2A), x);
    r = _mm256_fnmadd_pd(q, _mm256_set1_pd(kPio2B), r);
    r = _mm256_fnmadd_pd(q, _mm256_set1_pd(kPio2C), r);

    // Quadrant j = q mod 4 via the shifter trick (2^51 = 0 mod 4).
    __m256i qi = _mm256_castpd_si256(_mm256_add_pd(q, _mm256_set1_pd(kShifter)));
    __m256i j = _mm256_and_si256(qi, _mm256_set1_epi64x(3));

    __m256d z = _mm256_mul_pd(r, r);
    __m256d sr = poly_sin(z, r);
    __m256d cr = poly_cos(z);

    // cos(r + j*pi/2): odd j selects the sine polynomial; j in {1,2} flips sign.
    __m256i odd = _mm256_cmpeq_epi64(_mm256_and_si256(j, _mm256_set1_epi64x(1)),
                                     _mm256_set1_epi64x(1));
    __m256d res = _mm256_blendv_pd(cr, sr, _mm256_castsi256_pd(odd));
    __m256i jp1 = _mm256_add_epi64(j, _mm256_set1_epi64x(1));
    __m256i flip = _mm256_slli_epi64(_mm256_and_si256(jp1, _mm256_set1_epi64x(2)), 62);
    return _mm256_xor_pd(res, _mm256_castsi256_pd(flip));
}

inline __m256d exp4(__m256d x) {
    x = _mm256_min_pd(x, _mm256_set1_pd(kExpMax));
    x = _mm256_max_pd(x, _mm256_set1_pd(kExpMin));

    __m256d n = _mm256_round_pd(_mm256_mul_pd(x, _mm256_set1_pd(kLog2E)),
                                _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256d r = _mm256_fnmadd_pd(n, _mm256_set1_pd(kLn2Hi), x);
    r = _mm256_fnmadd_pd(n, _mm256_set1_pd(kLn2Lo), r);

    __m256d z = _mm256_mul_pd(r, r);
    __m256d p = _mm256_set1_pd(1.26177193074810590878e-4);
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(3.02994407707441961300e-2));
    p = _mm256_fmadd_pd(p, z, _mm256_set1_pd(9.99999999999999999910e-1));
    __m256d px = _mm256_mul_pd(p, r);

    __m256d qp = _mm256_set1_pd(3.00198505138664455042e-6);
    qp = _mm256_fmadd_pd(qp, z, _mm256_set1_pd(2.52448340349684104192e-3));
    qp = _mm256_fmadd_pd(qp, z, _mm256_set1_pd(2.27265548208155028766e-1));
    qp = _mm256_fmadd_pd(qp, z, _mm256_set1_pd(2.00000000000000000005e0));

    __m256d e = _mm256_div_pd(px, _mm256_sub_pd(qp, px));
    e = _mm256_fmadd_pd(e, _mm256_set1_pd(2.0), _mm256_set1_pd(1.0));

    // Scale by 2^n through direct exponent construction; n is in [-1022, 1024].
    __m256i ni = _mm256_castpd_si256(_mm256_add_pd(n, _mm256_set1_pd(kShifter)));
    __m256i mant = _mm256_and_si256(ni, _mm256_set1_epi64x(0xFFFFFFFFFFFFFll));
    __m256i nint = _mm256_sub_epi64(mant, _mm256_set1_epi64x(1ll << 51));
    __m256i bits = _mm256_slli_epi64(_mm256_add_epi64(nint, _mm256_set1_epi64x(1023)), 52);
    return _mm256_mul_pd(e, _mm256_castsi256_pd(bits));
}

// Remainder lanes run through the same vector kernel on a padded buffer so a
// value's result never depends on its position in the array.
template <class F>
inline void apply_tail(F&& vec_op, const double* x, double* out, std::size_t n) {
    alignas(32) double buf[4] = {0.0, 0.0, 0.0, 0.0};
    std::memcpy(buf, x, n * sizeof(double));
    __m256d r = vec_op(_mm256_load_pd(buf));
    _mm256_store_pd(buf, r);
    std::memcpy(out, buf, n * sizeof(double));
}

void cos_array_avx2(const double* x, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, cos4(_mm256_loadu_pd(x + i)));
    if (i < n) apply_tail([](__m256d v) { return cos4(v); }, x + i, out + i, n - i);
}

void cos_scale_avx2(const double* x, double scale, double* out, std::size_t n) {
    // The polynomial can overshoot |cos| = 1 by an ulp; clamp so scaled
    // features never exceed the documented bound.
    const __m256d s = _mm256_set1_pd(scale);
    const __m256d hi = _mm256_set1_pd(std::fabs(scale));
    const __m256d lo = _mm256_set1_pd(-std::fabs(scale));
    auto op = [&](__m256d v) {
        return _mm256_max_pd(lo, _mm256_min_pd(hi, _mm256_mul_pd(s, cos4(v))));
    };
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, op(_mm256_loadu_pd(x + i)));
    if (i < n) apply_tail(op, x + i, out + i, n - i);
}

void exp_array_avx2(const double* x, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, exp4(_mm256_loadu_pd(x + i)));
    if (i < n) apply_tail([](__m256d v) { return exp4(v); }, x + i, out + i, n - i);
}

void exp_cos_avx2(const double* log_amp, const double* phase, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d a = exp4(_mm256_loadu_pd(log_amp + i));
        __m256d c = cos4(_mm256_loadu_pd(phase + i));
        _mm256_storeu_pd(out + i, _mm256_mul_pd(a, c));
    }
    for (; i < n; ++i) {
        alignas(32) double ba[4] = {log_amp[i], 0, 0, 0};
        alignas(32) double bp[4] = {phase[i], 0, 0, 0};
        __m256d a = exp4(_mm256_load_pd(ba));
        __m256d c = cos4(_mm256_load_pd(bp));
        _mm256_store_pd(ba, _mm256_mul_pd(a, c));
        out[i] = ba[0];
    }
}

double mean_exp_scaled_avx2(const double* x, double lambda, std::size_t n) {
    constexpr std::size_t kBlock = 4096;
    const __m256d lam = _mm256_set1_pd(lambda);
    double total = 0.0;
    std::size_t i = 0;
    while (i < n) {
        const std::size_t end = i + kBlock < n ? i + kBlock : n;
        __m256d acc = _mm256_setzero_pd();
        for (; i + 4 <= end; i += 4)
            acc = _mm256_add_pd(acc, exp4(_mm256_mul_pd(lam, _mm256_loadu_pd(x + i))));
        alignas(32) double lanes[4];
        _mm256_store_pd(lanes, acc);
        double block = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
        for (; i < end; ++i) {
            alignas(32) double b[4] = {lambda * x[i], 0, 0, 0};
            __m256d e = exp4(_mm256_load_pd(b));
            _mm256_store_pd(b, e);
            block += b[0];
        }
        total += block;
    }
    return total / static_cast<double>(n);
}

const Kernels kAvx2 = {
    "avx2",         cos_array_avx2, cos_scale_avx2,
    exp_array_avx2, exp_cos_avx2,   mean_exp_scaled_avx2,
};

}  // namespace

const Kernels* avx2_kernels() { return &kAvx2; }

}  // namespace drgp::simd

#elif defined(__x86_64__) || defined(_M_X64)

namespace drgp::simd {
const Kernels* avx2_kernels() { return nullptr; }
}  // namespace drgp::simd

#endif
