//
//  simd_dispatch.cpp
//
//  Distributed under the Apache License, Version 2.0.
//  See the accompanying file LICENSE or http://www.apache.org/licenses/LICENSE-2.0.html
//

#include "drgp/simd.hpp"

#include <cstdlib>
#include <cstring>

namespace drgp::simd {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const Kernels* find(const char* name) {
    if (std::strcmp(name, "scalar") == 0) return &scalar_kernels();
#if defined(__x86_64__) || defined(_M_X64)
    if (std::strcmp(name, "avx2") == 0 && cpu_has_avx2()) return avx2_kernels();
#endif
    return nullptr;
}

const Kernels* select_default() {
    if (const char* env = std::getenv("DRGP_SIMD")) {
        if (const Kernels* k = find(env)) return k;
    }
#if defined(__x86_64__) || defined(_M_X64)
    if (cpu_has_avx2()) {
        if (const Kernels* k = avx2_kernels()) return k;
    }
#endif
    return &scalar_kernels();
}

const Kernels*& active_slot() {
    static const Kernels* slot = select_default();
    return slot;
}

}  // namespace

const Kernels& active() { return *active_slot(); }

std::vector<const Kernels*> available() {
    std::vector<const Kernels*> out{&scalar_kernels()};
#if defined(__x86_64__) || defined(_M_X64)
    if (cpu_has_avx2()) {
        if (const Kernels* k = avx2_kernels()) out.push_back(k);
    }
#endif
    return out;
}

bool force(const char* name) {
    const Kernels* k = find(name);
    if (!k) return false;
    active_slot() = k;
    return true;
}

}  // namespace drgp::simd
