// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "obcache/error.hpp"

namespace obcache {

namespace {

void check_window(const AttentionInstance& inst, std::size_t w) {
    if (w < 1 || w > inst.q_len()) {
        raise(ErrorKind::Window,
              "window start " + std::to_string(w) + " outside [1, " + std::to_string(inst.q_len()) + "]");
    }
}

SaliencyVector empty_scores(const AttentionInstance& inst, ScorerKind kind, std::size_t w) {
    return SaliencyVector{std::vector<double>(inst.seq_len(), 0.0), kind, w};
}

}  // namespace

std::size_t window_start(std::size_t q_len, std::size_t rows) {
    if (rows == 0 || rows >= q_len) {
        return 1;
    }
    return q_len - rows + 1;
}

SaliencyVector score_value(const AttentionInstance& inst, std::size_t w) {
    check_window(inst, w);
    auto out = empty_scores(inst, ScorerKind::Value, w);
    for (std::size_t p = 0; p < inst.seq_len(); ++p) {
        double mass = 0.0;
        for (std::size_t i = w - 1; i < inst.q_len(); ++i) {
            mass += inst.a(i, p) * inst.a(i, p);
        }
        out.scores[p] = mass * squared_norm(inst.v.row(p));
    }
    return out;
}

SaliencyVector score_key(const AttentionInstance& inst, std::size_t w) {
    check_window(inst, w);
    auto out = empty_scores(inst, ScorerKind::Key, w);
    for (std::size_t p = 0; p < inst.seq_len(); ++p) {
        const auto vp = inst.v.row(p);
        double acc = 0.0;
        for (std::size_t i = w - 1; i < inst.q_len(); ++i) {
            const double weight = inst.a(i, p);
            if (weight == 0.0) {
                continue;
            }
            const double az = weight * inst.z(i, p);
            acc += az * az * squared_distance(vp, inst.o.row(i));
        }
        out.scores[p] = acc;
    }
    return out;
}

JointTerms joint_terms(const AttentionInstance& inst, std::size_t w) {
    check_window(inst, w);
    JointTerms terms;
    terms.value = score_value(inst, w);
    terms.key = score_key(inst, w);
    terms.cross = empty_scores(inst, ScorerKind::Joint, w);
    for (std::size_t p = 0; p < inst.seq_len(); ++p) {
        const auto vp = inst.v.row(p);
        const double v_norm = squared_norm(vp);
        double acc = 0.0;
        for (std::size_t i = w - 1; i < inst.q_len(); ++i) {
            const double weight = inst.a(i, p);
            if (weight == 0.0) {
                continue;
            }
            acc += weight * weight * inst.z(i, p) * (v_norm - dot(vp, inst.o.row(i)));
        }
        terms.cross.scores[p] = 2.0 * acc;
    }
    terms.total = empty_scores(inst, ScorerKind::Joint, w);
    for (std::size_t p = 0; p < inst.seq_len(); ++p) {
        terms.total.scores[p] = terms.cross.scores[p] + terms.value.scores[p] + terms.key.scores[p];
    }
    return terms;
}

SaliencyVector score_joint(const AttentionInstance& inst, std::size_t w, JointClamp clamp) {
    auto total = joint_terms(inst, w).total;
    if (clamp == JointClamp::ClampNegative) {
        for (double& s : total.scores) {
            s = std::max(s, 0.0);
        }
    }
    return total;
}

SaliencyVector score_attn_l1(const AttentionInstance& inst, std::size_t w) {
    check_window(inst, w);
    auto out = empty_scores(inst, ScorerKind::AttnL1, w);
    for (std::size_t i = w - 1; i < inst.q_len(); ++i) {
        for (std::size_t p = 0; p < inst.seq_len(); ++p) {
            out.scores[p] += std::abs(inst.a(i, p));
        }
    }
    return out;
}

SaliencyVector score(const AttentionInstance& inst, ScorerKind kind, std::size_t w, JointClamp clamp) {
    switch (kind) {
        case ScorerKind::Value: return score_value(inst, w);
        case ScorerKind::Key: return score_key(inst, w);
        case ScorerKind::Joint: return score_joint(inst, w, clamp);
        case ScorerKind::AttnL1: return score_attn_l1(inst, w);
    }
    raise(ErrorKind::Config, "unknown scorer");
}

Matrix reconstruct_logits(const Matrix& a) {
    Matrix z(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ai = a.row(i);
        const double peak = ai.empty() ? 0.0 : *std::max_element(ai.begin(), ai.end());
        if (!(peak > 0.0)) {
            raise(ErrorKind::DegenerateRow, "row " + std::to_string(i) + " has no positive weight");
        }
        const double shift = std::log(peak);
        for (std::size_t j = 0; j < ai.size(); ++j) {
            z(i, j) = ai[j] > 0.0 ? std::log(ai[j]) - shift : kMaskedLogit;
        }
    }
    return z;
}

AttentionInstance with_reconstructed_logits(const AttentionInstance& inst) {
    AttentionInstance out = inst;
    out.z = reconstruct_logits(inst.a);
    return out;
}

SaliencyVector aggregate_group(std::span<const SaliencyVector> per_query_head, std::size_t group_size) {
    if (group_size == 0 || per_query_head.size() != group_size) {
        raise(ErrorKind::Aggregation, "expected " + std::to_string(group_size) + " query heads, got " +
                                          std::to_string(per_query_head.size()));
    }
    const SaliencyVector& first = per_query_head.front();
    SaliencyVector out{std::vector<double>(first.size(), 0.0), first.scorer, first.window_start};
    for (const auto& head : per_query_head) {
        if (head.size() != first.size() || head.scorer != first.scorer || head.window_start != first.window_start) {
            raise(ErrorKind::Aggregation, "query heads disagree on length, scorer or window");
        }
        for (std::size_t p = 0; p < head.size(); ++p) {
            out.scores[p] += head.scores[p];
        }
    }
    return out;
}

void ScoreAccumulator::accumulate(const SaliencyVector& fresh, std::span<const Position> cached,
                                  std::span<const Position> kept) {
    if (fresh.size() != cached.size()) {
        raise(ErrorKind::Accumulator, "fresh scores cover " + std::to_string(fresh.size()) + " slots but " +
                                          std::to_string(cached.size()) + " positions are cached");
    }
    for (std::size_t i = 0; i < cached.size(); ++i) {
        if (i > 0 && cached[i] <= cached[i - 1]) {
            raise(ErrorKind::Accumulator, "cached positions must be strictly increasing");
        }
        if (m_dropped.contains(cached[i])) {
            raise(ErrorKind::Accumulator, "position " + std::to_string(cached[i]) + " was already evicted");
        }
    }
    for (const auto& [pos, total] : m_running) {
        if (!std::binary_search(cached.begin(), cached.end(), pos)) {
            raise(ErrorKind::Accumulator, "tracked position " + std::to_string(pos) + " missing from the cache");
        }
    }
    for (Position pos : kept) {
        if (!std::binary_search(cached.begin(), cached.end(), pos)) {
            raise(ErrorKind::Accumulator, "kept position " + std::to_string(pos) + " is not cached");
        }
    }

    for (std::size_t i = 0; i < cached.size(); ++i) {
        m_running[cached[i]] += fresh.scores[i];
    }
    ++m_steps;
    retain(kept);
}

void ScoreAccumulator::retain(std::span<const Position> kept) {
    for (auto it = m_running.begin(); it != m_running.end();) {
        if (std::find(kept.begin(), kept.end(), it->first) == kept.end()) {
            m_dropped.insert(it->first);
            it = m_running.erase(it);
        } else {
            ++it;
        }
    }
}

SaliencyVector ScoreAccumulator::snapshot(std::span<const Position> cached, ScorerKind scorer) const {
    SaliencyVector out{std::vector<double>(cached.size(), 0.0), scorer, 1};
    for (std::size_t i = 0; i < cached.size(); ++i) {
        const auto it = m_running.find(cached[i]);
        if (it == m_running.end()) {
            raise(ErrorKind::Accumulator, "position " + std::to_string(cached[i]) + " has no running score");
        }
        out.scores[i] = it->second;
    }
    return out;
}

}  // namespace obcache

namespace obcache {

std::string_view to_string(ScorerKind kind) noexcept {
    switch (kind) {
        case ScorerKind::Value: return "value";
        case ScorerKind::Key: return "key";
        case ScorerKind::Joint: return "joint";
        case ScorerKind::AttnL1: return "attn_l1";
    }
    return "unknown";
}

std::optional<ScorerKind> parse_scorer(std::string_view name) noexcept {
    if (name == "value") return ScorerKind::Value;
    if (name == "key") return ScorerKind::Key;
    if (name == "joint") return ScorerKind::Joint;
    if (name == "attn_l1") return ScorerKind::AttnL1;
    return std::nullopt;
}

}  // namespace obcache
