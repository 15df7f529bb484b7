// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "obcache/attention.hpp"
#include "obcache/cache.hpp"
#include "obcache/saliency.hpp"
#include "obcache/types.hpp"

namespace obcache {

struct PolicyConfig {
    // total retained tokens
    std::size_t budget = 0;
    // always-kept prefix (attention sinks)
    std::size_t sink_count = 0;
    // always-kept suffix
    std::size_t recent_window = 0;
    // 1-based first query row of the perturbation window
    std::size_t window_start = 1;
    // odd max-pool kernel over the score vector; 1 disables pooling
    std::size_t pool_kernel = 1;
    std::size_t pool_stride = 1;
    ScorerKind scorer = ScorerKind::AttnL1;
    // headroom reserved for tokens arriving before the next eviction
    std::size_t num_coming = 0;
    // decode only: add each step's scores to a running total (H2O) or rank on
    // the newest step alone (TOVA)
    bool accumulate = true;
    JointClamp joint_clamp = JointClamp::None;

    // Throws a config error when the carve-outs leave no heavy-hitter room or
    // the pooling parameters are invalid.
    void validate() const;

    std::size_t heavy_hitters() const noexcept { return budget - recent_window - sink_count; }
    std::size_t recent_kept() const noexcept { return recent_window > num_coming ? recent_window - num_coming : 0; }
    // Cache length after an eviction: budget minus the incoming-token headroom.
    std::size_t retained_target() const noexcept { return sink_count + heavy_hitters() + recent_kept(); }
};

// Indices of the k largest scores, returned in ascending index order. Ties go
// to the larger index (the more recent token); NaN ranks below everything.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

// Centered sliding-window maximum with truncated windows at the edges. With a
// stride above 1 the pooled value is computed at every stride-th position and
// shared by the positions of that stride block.
SaliencyVector pool_scores(const SaliencyVector& scores, std::size_t kernel, std::size_t stride);

// Heavy-hitter selection with sink and recent carve-outs:
//   cutoff = cache_len - recent_window + num_coming
//   keep [0, sink_count) and [cutoff, cache_len), then the top
//   budget - recent_window - sink_count slots of the remainder by (pooled) score.
// When the cache already fits, everything is retained.
EvictionDecision select_retained(const SaliencyVector& scores, std::size_t cache_len, const PolicyConfig& cfg);

enum class PresetName { H2O, TOVA, SnapKV, OBCacheValue, OBCacheKey, OBCacheJoint };
enum class Phase { Prefill, Decode };

std::string_view to_string(PresetName name) noexcept;
std::optional<PresetName> parse_preset(std::string_view name) noexcept;

// Query rows scored by the prefill H2O/SnapKV presets: 16, or 5% of the
// prompt once that is larger, never more than the prompt itself.
std::size_t prefill_window_rows(std::size_t context);

// Baseline configurations. `context` is the number of query rows available at
// scoring time (the prompt length for prefill). OBCache presets reuse the
// windows of `host` with the scorer replaced.
PolicyConfig preset(PresetName name, Phase phase, std::size_t context, std::size_t budget,
                    PresetName host = PresetName::H2O);

struct DecodeTrace {
    Matrix queries;  // steps x d
    Matrix keys;
    Matrix values;

    std::size_t steps() const noexcept { return queries.rows(); }
    std::size_t head_dim() const noexcept { return queries.cols(); }
};

struct DecodeLogEntry {
    std::size_t step = 0;
    std::size_t cache_len = 0;  // after the append, before eviction
    std::vector<Position> evicted;
    std::vector<Position> retained;
    Vector output;
    std::optional<EvictionDecision> decision;
};

// Token-by-token decoding with per-step eviction: append, attend, score the
// newest query row, optionally accumulate, then evict down to the retained
// target once the cache outgrows it.
class EvictingDecoder {
public:
    EvictingDecoder(const PolicyConfig& cfg, std::size_t head_dim, std::optional<double> scale = std::nullopt);

    DecodeLogEntry step(std::span<const double> query, std::span<const double> key, std::span<const double> value);

    const KvCache& cache() const noexcept { return m_cache; }
    const ScoreAccumulator& accumulator() const noexcept { return m_acc; }
    ScoreAccumulator& accumulator() noexcept { return m_acc; }

private:
    PolicyConfig m_cfg;
    KvCache m_cache;
    ScoreAccumulator m_acc;
    double m_scale;
    std::size_t m_steps = 0;
};

std::vector<DecodeLogEntry> decode_evict_loop(const DecodeTrace& trace, const PolicyConfig& cfg,
                                              ScoreAccumulator& acc, std::optional<double> scale = std::nullopt);

}  // namespace obcache
