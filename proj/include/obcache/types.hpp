// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace obcache {

// Original token index in the sequence (not a cache slot).
using Position = std::int64_t;

enum class ScorerKind { Value, Key, Joint, AttnL1 };

std::string_view to_string(ScorerKind kind) noexcept;
std::optional<ScorerKind> parse_scorer(std::string_view name) noexcept;

// Per-slot saliency for one head. window_start is the 1-based first query row
// of the perturbation window that produced the scores.
struct SaliencyVector {
    std::vector<double> scores;
    ScorerKind scorer = ScorerKind::AttnL1;
    std::size_t window_start = 1;

    std::size_t size() const noexcept { return scores.size(); }
    double operator[](std::size_t i) const noexcept { return scores[i]; }
};

// Slot indices (0-based offsets into the current cache), both sorted ascending.
struct EvictionDecision {
    std::vector<std::size_t> retained;
    std::vector<std::size_t> evicted;
    SaliencyVector scores_used;
};

}  // namespace obcache
