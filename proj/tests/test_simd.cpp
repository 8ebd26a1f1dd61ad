//
//  test_simd.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "doctest.h"
#include "drgp/simd.hpp"

using drgp::simd::Kernels;

namespace {

std::vector<double> random_args(std::size_t n, double lo, double hi, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

}  // namespace

TEST_SUITE_BEGIN("simd");

TEST_CASE("reference kernels match libm") {
    const Kernels& ref = drgp::simd::scalar_kernels();
    auto xs = random_args(257, -50.0, 50.0, 11);
    std::vector<double> out(xs.size());
    ref.cos_array(xs.data(), out.data(), xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) CHECK(out[i] == std::cos(xs[i]));
    ref.exp_array(xs.data(), out.data(), xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) CHECK(out[i] == std::exp(xs[i]));
}

TEST_CASE("all kernel variants agree within tolerance") {
    auto variants = drgp::simd::available();
    REQUIRE(!variants.empty());
    const Kernels& ref = *variants.front();

    // Sizes straddle the vector width so remainder lanes are exercised.
    for (std::size_t n : {std::size_t{1}, std::size_t{2}, std::size_t{3}, std::size_t{4},
                          std::size_t{7}, std::size_t{64}, std::size_t{1023}}) {
        auto phase = random_args(n, -2.0e4, 2.0e4, 100 + static_cast<unsigned>(n));
        auto logamp = random_args(n, -60.0, 0.0, 200 + static_cast<unsigned>(n));
        auto exparg = random_args(n, -600.0, 600.0, 300 + static_cast<unsigned>(n));

        std::vector<double> expect(n), got(n), expect2(n), got2(n);
        for (const Kernels* k : variants) {
            CAPTURE(k->name);
            CAPTURE(n);

            ref.cos_array(phase.data(), expect.data(), n);
            k->cos_array(phase.data(), got.data(), n);
            for (std::size_t i = 0; i < n; ++i)
                CHECK(std::fabs(got[i] - expect[i]) <= 1e-13);

            ref.cos_scale(phase.data(), 0.37, expect.data(), n);
            k->cos_scale(phase.data(), 0.37, got.data(), n);
            for (std::size_t i = 0; i < n; ++i) {
                CHECK(std::fabs(got[i] - expect[i]) <= 1e-13);
                CHECK(std::fabs(got[i]) <= 0.37);
            }

            ref.exp_array(exparg.data(), expect.data(), n);
            k->exp_array(exparg.data(), got.data(), n);
            for (std::size_t i = 0; i < n; ++i) {
                const double tol = 1e-13 * std::max(1.0, std::fabs(expect[i]));
                CHECK(std::fabs(got[i] - expect[i]) <= tol);
            }

            ref.exp_cos(logamp.data(), phase.data(), expect2.data(), n);
            k->exp_cos(logamp.data(), phase.data(), got2.data(), n);
            for (std::size_t i = 0; i < n; ++i)
                CHECK(std::fabs(got2[i] - expect2[i]) <= 1e-13);

            const double m_ref = ref.mean_exp_scaled(phase.data(), 1e-4, n);
            const double m_got = k->mean_exp_scaled(phase.data(), 1e-4, n);
            CHECK(std::fabs(m_got - m_ref) <= 1e-12 * std::fabs(m_ref));
        }
    }
}

TEST_CASE("kernels are deterministic across calls") {
    for (const Kernels* k : drgp::simd::available()) {
        CAPTURE(k->name);
        auto xs = random_args(513, -1000.0, 1000.0, 77);
        std::vector<double> a(xs.size()), b(xs.size());
        k->cos_array(xs.data(), a.data(), xs.size());
        k->cos_array(xs.data(), b.data(), xs.size());
        CHECK(std::memcmp(a.data(), b.data(), xs.size() * sizeof(double)) == 0);
        k->exp_array(xs.data(), a.data(), xs.size());
        k->exp_array(xs.data(), b.data(), xs.size());
        CHECK(std::memcmp(a.data(), b.data(), xs.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("active set respects force override") {
    const char* initial = drgp::simd::active().name;
    CHECK(drgp::simd::force("scalar"));
    CHECK(std::strcmp(drgp::simd::active().name, "scalar") == 0);
    CHECK(!drgp::simd::force("no-such-isa"));
    CHECK(std::strcmp(drgp::simd::active().name, "scalar") == 0);
    CHECK(drgp::simd::force(initial));  // restore
}

TEST_CASE("blocked mean matches direct summation") {
    auto xs = random_args(100000, -3.0, 3.0, 12345);
    long double direct = 0.0L;
    for (double x : xs) direct += std::exp(0.25 * x);
    direct /= static_cast<long double>(xs.size());
    for (const Kernels* k : drgp::simd::available()) {
        CAPTURE(k->name);
        const double m = k->mean_exp_scaled(xs.data(), 0.25, xs.size());
        CHECK(std::fabs(m - static_cast<double>(direct)) <=
              1e-12 * static_cast<double>(direct));
    }
}

TEST_SUITE_END();
