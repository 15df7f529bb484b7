// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "obcache/error.hpp"

namespace obcache {

void PolicyConfig::validate() const {
    if (budget == 0) {
        raise(ErrorKind::Config, "budget must be positive");
    }
    if (sink_count + recent_window >= budget) {
        raise(ErrorKind::Config, "sink_count + recent_window (" + std::to_string(sink_count + recent_window) +
                                     ") must be below the budget (" + std::to_string(budget) + ")");
    }
    if (window_start < 1) {
        raise(ErrorKind::Config, "window_start is 1-based");
    }
    if (pool_kernel < 1 || pool_kernel % 2 == 0) {
        raise(ErrorKind::Config, "pool kernel must be odd, got " + std::to_string(pool_kernel));
    }
    if (pool_stride < 1) {
        raise(ErrorKind::Config, "pool stride must be at least 1");
    }
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    if (k > scores.size()) {
        raise(ErrorKind::Metric, "k = " + std::to_string(k) + " exceeds " + std::to_string(scores.size()));
    }
    auto rank = [&](std::size_t i) {
        return std::isnan(scores[i]) ? -std::numeric_limits<double>::infinity() : scores[i];
    };
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t lhs, std::size_t rhs) {
                          const double a = rank(lhs);
                          const double b = rank(rhs);
                          if (a != b) {
                              return a > b;
                          }
                          return lhs > rhs;
                      });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

SaliencyVector pool_scores(const SaliencyVector& scores, std::size_t kernel, std::size_t stride) {
    if (kernel < 1 || kernel % 2 == 0) {
        raise(ErrorKind::Config, "pool kernel must be odd, got " + std::to_string(kernel));
    }
    if (stride < 1) {
        raise(ErrorKind::Config, "pool stride must be at least 1");
    }
    if (kernel == 1 && stride == 1) {
        return scores;
    }
    const std::size_t n = scores.size();
    const std::size_t half = kernel / 2;
    SaliencyVector out{std::vector<double>(n, 0.0), scores.scorer, scores.window_start};
    for (std::size_t center = 0; center < n; center += stride) {
        const std::size_t lo = center >= half ? center - half : 0;
        const std::size_t hi = std::min(n - 1, center + half);
        double peak = scores.scores[lo];
        for (std::size_t j = lo + 1; j <= hi; ++j) {
            peak = std::max(peak, scores.scores[j]);
        }
        for (std::size_t j = center; j < std::min(n, center + stride); ++j) {
            out.scores[j] = peak;
        }
    }
    return out;
}

EvictionDecision select_retained(const SaliencyVector& scores, std::size_t cache_len, const PolicyConfig& cfg) {
    cfg.validate();
    if (scores.size() != cache_len) {
        raise(ErrorKind::Shape, "scores cover " + std::to_string(scores.size()) + " slots, cache holds " +
                                    std::to_string(cache_len));
    }

    EvictionDecision decision;
    decision.scores_used = pool_scores(scores, cfg.pool_kernel, cfg.pool_stride);

    if (cache_len <= cfg.retained_target()) {
        decision.retained.resize(cache_len);
        std::iota(decision.retained.begin(), decision.retained.end(), std::size_t{0});
        return decision;
    }

    // Past the early return the regions are disjoint and the middle holds
    // more than heavy_hitters() candidates.
    const std::size_t cutoff = cache_len - cfg.recent_kept();
    const std::span<const double> middle(decision.scores_used.scores.data() + cfg.sink_count,
                                         cutoff - cfg.sink_count);
    const auto heavy = top_k_indices(middle, cfg.heavy_hitters());

    for (std::size_t slot = 0; slot < cfg.sink_count; ++slot) {
        decision.retained.push_back(slot);
    }
    for (std::size_t offset : heavy) {
        decision.retained.push_back(cfg.sink_count + offset);
    }
    for (std::size_t slot = cutoff; slot < cache_len; ++slot) {
        decision.retained.push_back(slot);
    }

    std::size_t next = 0;
    for (std::size_t slot = 0; slot < cache_len; ++slot) {
        if (next < decision.retained.size() && decision.retained[next] == slot) {
            ++next;
        } else {
            decision.evicted.push_back(slot);
        }
    }
    return decision;
}

std::string_view to_string(PresetName name) noexcept {
    switch (name) {
        case PresetName::H2O: return "h2o";
        case PresetName::TOVA: return "tova";
        case PresetName::SnapKV: return "snapkv";
        case PresetName::OBCacheValue: return "obcache-value";
        case PresetName::OBCacheKey: return "obcache-key";
        case PresetName::OBCacheJoint: return "obcache-joint";
    }
    return "unknown";
}

std::optional<PresetName> parse_preset(std::string_view name) noexcept {
    for (auto p : {PresetName::H2O, PresetName::TOVA, PresetName::SnapKV, PresetName::OBCacheValue,
                   PresetName::OBCacheKey, PresetName::OBCacheJoint}) {
        if (to_string(p) == name) {
            return p;
        }
    }
    return std::nullopt;
}

std::size_t prefill_window_rows(std::size_t context) {
    const auto proportional = static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(context)));
    return std::min(context, std::max<std::size_t>(16, proportional));
}

namespace {

bool is_obcache(PresetName name) {
    return name == PresetName::OBCacheValue || name == PresetName::OBCacheKey || name == PresetName::OBCacheJoint;
}

ScorerKind obcache_scorer(PresetName name) {
    switch (name) {
        case PresetName::OBCacheValue: return ScorerKind::Value;
        case PresetName::OBCacheKey: return ScorerKind::Key;
        default: return ScorerKind::Joint;
    }
}

}  // namespace

PolicyConfig preset(PresetName name, Phase phase, std::size_t context, std::size_t budget, PresetName host) {
    if (is_obcache(name)) {
        if (is_obcache(host)) {
            raise(ErrorKind::Config, "an OBCache preset needs an attention-based host");
        }
        PolicyConfig cfg = preset(host, phase, context, budget);
        cfg.scorer = obcache_scorer(name);
        return cfg;
    }
    if (context == 0) {
        raise(ErrorKind::Config, "preset needs a positive context length");
    }

    PolicyConfig cfg;
    cfg.budget = budget;
    cfg.scorer = ScorerKind::AttnL1;

    if (phase == Phase::Prefill) {
        const std::size_t rows = prefill_window_rows(context);
        switch (name) {
            case PresetName::H2O:
                cfg.window_start = window_start(context, rows);
                cfg.recent_window = rows;
                break;
            case PresetName::TOVA:
                cfg.window_start = context;
                break;
            case PresetName::SnapKV:
                cfg.window_start = window_start(context, rows);
                cfg.recent_window = rows;
                cfg.pool_kernel = 7;
                cfg.pool_stride = 1;
                break;
            default: break;
        }
    } else {
        // Decode scores come from the newest query row only.
        cfg.window_start = 1;
        cfg.sink_count = 4;
        switch (name) {
            case PresetName::H2O:
                cfg.recent_window = budget / 4;
                cfg.accumulate = true;
                break;
            case PresetName::TOVA:
                cfg.recent_window = 0;
                cfg.accumulate = false;
                break;
            case PresetName::SnapKV:
                raise(ErrorKind::Config, "snapkv evicts during prefill only");
            default: break;
        }
    }
    cfg.validate();
    return cfg;
}

EvictingDecoder::EvictingDecoder(const PolicyConfig& cfg, std::size_t head_dim, std::optional<double> scale)
    : m_cfg(cfg), m_cache(head_dim), m_scale(scale.value_or(default_scale(head_dim))) {
    m_cfg.validate();
}

DecodeLogEntry EvictingDecoder::step(std::span<const double> query, std::span<const double> key,
                                     std::span<const double> value) {
    const DecodeStep attended = decode_step(m_cache, query, key, value, m_scale);

    DecodeLogEntry entry;
    entry.step = m_steps++;
    entry.cache_len = m_cache.size();
    entry.output = attended.o;

    const AttentionInstance row = instance_from_step(attended, m_cache, m_scale);
    const SaliencyVector fresh = score(row, m_cfg.scorer, 1, m_cfg.joint_clamp);
    SaliencyVector ranking = fresh;
    if (m_cfg.accumulate) {
        m_acc.accumulate(fresh, m_cache.positions());
        ranking = m_acc.snapshot(m_cache.positions(), m_cfg.scorer);
    }

    if (m_cache.size() > m_cfg.retained_target()) {
        EvictionDecision decision = select_retained(ranking, m_cache.size(), m_cfg);
        entry.evicted = m_cache.apply_eviction(decision);
        if (m_cfg.accumulate) {
            m_acc.retain(m_cache.positions());
        }
        entry.decision = std::move(decision);
    }
    entry.retained = m_cache.positions();
    return entry;
}

std::vector<DecodeLogEntry> decode_evict_loop(const DecodeTrace& trace, const PolicyConfig& cfg,
                                              ScoreAccumulator& acc, std::optional<double> scale) {
    if (trace.keys.rows() != trace.steps() || trace.values.rows() != trace.steps() ||
        trace.keys.cols() != trace.head_dim() || trace.values.cols() != trace.head_dim()) {
        raise(ErrorKind::Shape, "decode trace tensors disagree in shape");
    }
    EvictingDecoder decoder(cfg, trace.head_dim(), scale);
    decoder.accumulator() = acc;
    std::vector<DecodeLogEntry> log;
    log.reserve(trace.steps());
    for (std::size_t t = 0; t < trace.steps(); ++t) {
        log.push_back(decoder.step(trace.queries.row(t), trace.keys.row(t), trace.values.row(t)));
    }
    acc = decoder.accumulator();
    return log;
}

}  // namespace obcache
