// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <span>

#include "obcache/attention.hpp"
#include "obcache/types.hpp"

namespace obcache {

// The perturbation window is the block of query rows w..q_len (1-based,
// inclusive). window_start(q_len, rows) returns the w that covers the last
// `rows` query rows; rows == 0 means the full history (w = 1).
std::size_t window_start(std::size_t q_len, std::size_t rows);

enum class JointClamp { None, ClampNegative };

// Output-aware saliency. All scorers sum over the query rows of the window and
// skip masked entries.
//
//   value[p] = sum_i A[i,p]^2 * |v_p|^2
//   key[p]   = sum_i (A[i,p] * Z[i,p])^2 * |v_p - o_i|^2
//   cross[p] = 2 * sum_i A[i,p]^2 * Z[i,p] * (|v_p|^2 - <v_p, o_i>)
//   joint[p] = cross[p] + value[p] + key[p]
//   attn[p]  = sum_i |A[i,p]|
SaliencyVector score_value(const AttentionInstance& inst, std::size_t w);
SaliencyVector score_key(const AttentionInstance& inst, std::size_t w);
SaliencyVector score_joint(const AttentionInstance& inst, std::size_t w, JointClamp clamp = JointClamp::None);
SaliencyVector score_attn_l1(const AttentionInstance& inst, std::size_t w);

// The three summands of the joint score, computed independently.
struct JointTerms {
    SaliencyVector cross;
    SaliencyVector value;
    SaliencyVector key;
    SaliencyVector total;
};
JointTerms joint_terms(const AttentionInstance& inst, std::size_t w);

SaliencyVector score(const AttentionInstance& inst, ScorerKind kind, std::size_t w,
                     JointClamp clamp = JointClamp::None);

// Logits recovered from weights alone: log(A) shifted so that the largest
// unmasked logit of every row is 0. Zero weights become masked entries.
Matrix reconstruct_logits(const Matrix& a);

// Copy of `inst` whose logits are replaced by reconstruct_logits(inst.a).
AttentionInstance with_reconstructed_logits(const AttentionInstance& inst);

// Elementwise sum over the query heads that share one KV head.
SaliencyVector aggregate_group(std::span<const SaliencyVector> per_query_head, std::size_t group_size);

// Running per-position score sums for dynamic (decode-time) eviction. Scores
// are added without decay; a position that leaves the cache is forgotten and
// may not return.
class ScoreAccumulator {
public:
    // `fresh` is aligned with `cached` (the current cache's positions, in slot
    // order). Every cached position gains its fresh score, then positions not
    // listed in `kept` are dropped.
    void accumulate(const SaliencyVector& fresh, std::span<const Position> cached, std::span<const Position> kept);
    void accumulate(const SaliencyVector& fresh, std::span<const Position> cached) {
        accumulate(fresh, cached, cached);
    }

    // Drops every tracked position not listed in `kept`.
    void retain(std::span<const Position> kept);

    // Running totals for `cached`, in the same order.
    SaliencyVector snapshot(std::span<const Position> cached, ScorerKind scorer) const;

    const std::map<Position, double>& running() const noexcept { return m_running; }
    std::size_t steps_seen() const noexcept { return m_steps; }

private:
    std::map<Position, double> m_running;
    std::set<Position> m_dropped;
    std::size_t m_steps = 0;
};

}  // namespace obcache
