// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "obcache/matrix.hpp"
#include "obcache/types.hpp"

namespace obcache {

// Per-head key/value store. Each live slot remembers the original position of
// the token it holds; positions are strictly increasing and an evicted
// position never comes back.
class KvCache {
public:
    explicit KvCache(std::size_t head_dim);

    std::size_t head_dim() const noexcept { return m_dim; }
    std::size_t size() const noexcept { return m_positions.size(); }
    bool empty() const noexcept { return m_positions.empty(); }

    const Matrix& keys() const noexcept { return m_keys; }
    const Matrix& values() const noexcept { return m_values; }
    const std::vector<Position>& positions() const noexcept { return m_positions; }

    // Smallest position that append() will accept.
    Position next_position() const noexcept { return m_last_appended ? *m_last_appended + 1 : 0; }
    std::size_t total_appended() const noexcept { return m_appended; }
    std::size_t total_evicted() const noexcept { return m_evicted; }

    void append(std::span<const double> key, std::span<const double> value, Position original_pos);
    void append(std::span<const double> key, std::span<const double> value) {
        append(key, value, next_position());
    }

    // Keeps exactly the listed slots (ascending, unique) and compacts storage.
    // Returns the original positions that were dropped.
    std::vector<Position> retain_slots(std::span<const std::size_t> slots);
    std::vector<Position> apply_eviction(const EvictionDecision& decision);

private:
    std::size_t m_dim;
    Matrix m_keys;
    Matrix m_values;
    std::vector<Position> m_positions;
    std::optional<Position> m_last_appended;
    std::size_t m_appended = 0;
    std::size_t m_evicted = 0;
};

}  // namespace obcache
