// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace obcache {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Counter-based generator: draw n of stream s under seed k is
//   splitmix64(splitmix64(k ^ splitmix64(s)) + n * 0x9E3779B97F4A7C15)
// so any draw can be reproduced without replaying the ones before it.
// Uniforms take the top 53 bits; normals use the cosine branch of Box-Muller
// on two consecutive uniforms.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept;

    std::uint64_t next_u64() noexcept;
    // [0, 1)
    double uniform() noexcept;
    double normal() noexcept;

    std::uint64_t counter() const noexcept { return m_counter; }

private:
    std::uint64_t m_key;
    std::uint64_t m_counter = 0;
};

}  // namespace obcache
