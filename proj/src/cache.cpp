// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/cache.hpp"

#include <string>

#include "obcache/error.hpp"

namespace obcache {

KvCache::KvCache(std::size_t head_dim) : m_dim(head_dim), m_keys(0, head_dim), m_values(0, head_dim) {
    if (head_dim == 0) {
        raise(ErrorKind::Shape, "head dimension must be positive");
    }
}

void KvCache::append(std::span<const double> key, std::span<const double> value, Position original_pos) {
    if (key.size() != m_dim || value.size() != m_dim) {
        raise(ErrorKind::Shape, "append expects rows of width " + std::to_string(m_dim));
    }
    if (original_pos < next_position()) {
        raise(ErrorKind::Ordering,
              "position " + std::to_string(original_pos) + " is not after " + std::to_string(next_position() - 1));
    }
    m_keys.append_row(key);
    m_values.append_row(value);
    m_positions.push_back(original_pos);
    m_last_appended = original_pos;
    ++m_appended;
}

std::vector<Position> KvCache::retain_slots(std::span<const std::size_t> slots) {
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (slots[i] >= size()) {
            raise(ErrorKind::Index, "slot " + std::to_string(slots[i]) + " out of " + std::to_string(size()));
        }
        if (i > 0 && slots[i] <= slots[i - 1]) {
            raise(ErrorKind::Index, "retained slots must be strictly increasing");
        }
    }

    std::vector<Position> dropped;
    std::vector<Position> kept_positions;
    kept_positions.reserve(slots.size());
    std::size_t next = 0;
    for (std::size_t slot = 0; slot < size(); ++slot) {
        if (next < slots.size() && slots[next] == slot) {
            kept_positions.push_back(m_positions[slot]);
            ++next;
        } else {
            dropped.push_back(m_positions[slot]);
        }
    }

    m_keys = m_keys.select_rows(slots);
    m_values = m_values.select_rows(slots);
    m_positions = std::move(kept_positions);
    m_evicted += dropped.size();
    return dropped;
}

std::vector<Position> KvCache::apply_eviction(const EvictionDecision& decision) {
    if (decision.retained.size() + decision.evicted.size() != size()) {
        raise(ErrorKind::Index, "decision covers " +
                                    std::to_string(decision.retained.size() + decision.evicted.size()) +
                                    " slots but cache holds " + std::to_string(size()));
    }
    return retain_slots(decision.retained);
}

}  // namespace obcache
