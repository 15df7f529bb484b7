// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "obcache/attention.hpp"
#include "obcache/types.hpp"

namespace obcache {

enum class PruneKind { Value, Key, Joint };

// ZeroRow sets the pruned row(s) to zero and keeps the token in the softmax;
// a zeroed key therefore still competes with logit 0. RemoveRow deletes the
// token (key and value) from the softmax, which is what eviction does; the
// kind is irrelevant under RemoveRow.
enum class PruneSemantics { ZeroRow, RemoveRow };

struct PruneMode {
    PruneKind kind = PruneKind::Joint;
    PruneSemantics semantics = PruneSemantics::ZeroRow;
};

// sum_{i >= w} |O_hat_i - O_i|^2 with attention recomputed from scratch on the
// perturbed keys/values.
double exact_eviction_error(const AttentionInstance& inst, std::size_t p, PruneMode mode, std::size_t w);
std::vector<double> exact_eviction_errors(const AttentionInstance& inst, PruneMode mode, std::size_t w);

// |o(full cache) - o(cache without p)|^2 for the first decode query, which
// attends to every prefilled token.
double true_eviction_error(const AttentionInstance& prefill, std::span<const double> next_query, std::size_t p);
std::vector<double> true_eviction_errors(const AttentionInstance& prefill, std::span<const double> next_query);

struct TaylorPoint {
    double eps = 0.0;
    double loss = 0.0;   // L(eps): exact proxy loss after scaling the row(s) by (1 - eps)
    double ratio = 0.0;  // L(eps) / eps^2 / closed-form score
};

// Scales the targeted row(s) by (1 - eps), i.e. perturbs them by -eps * row,
// and compares the exact loss against the second-order closed form.
std::vector<TaylorPoint> taylor_residual(const AttentionInstance& inst, std::size_t p, PruneMode mode,
                                         std::size_t w, std::span<const double> eps_list);

// Least-squares slope of log(y) against log(eps).
double fitted_order(std::span<const double> eps, std::span<const double> y);
// Order of the loss itself: ~2 when the first-order terms vanish.
double loss_order(std::span<const TaylorPoint> points);

// |topk(reference) & topk(candidate)| / k under the policy tie rule.
double topk_recall(const SaliencyVector& reference, const SaliencyVector& candidate, std::size_t k);
double topk_recall(std::span<const double> reference, std::span<const double> candidate, std::size_t k);

// The candidate always keeps the last `reserve` positions and fills the rest
// of its k picks by score; the reference is the plain top-k.
std::vector<std::size_t> reserved_selection(std::span<const double> candidate, std::size_t k, std::size_t reserve);
double topk_recall_reserved(std::span<const double> reference, std::span<const double> candidate, std::size_t k,
                            std::size_t reserve);

struct GapSummary {
    double mean = 0.0;
    double max = 0.0;
    double median = 0.0;
    std::size_t count = 0;
};

// Distribution of |RemoveRow - ZeroRow| errors (joint kind) over all positions.
GapSummary semantics_gap(const AttentionInstance& inst, std::size_t w);

struct RecallEntry {
    std::string scorer;
    std::size_t window_rows = 0;  // 0 = full history
    std::size_t k = 0;
    std::size_t recent_reserve = 0;
    double mean_recall = 0.0;
    std::vector<double> per_instance;
};

struct OracleReport {
    std::vector<std::vector<double>> exact_errors;  // instances x s, joint/zero-row proxy
    std::vector<std::vector<double>> true_errors;   // instances x s
    std::map<std::string, double> recall_at_k;      // scorer -> mean recall at the headline setting
    std::vector<TaylorPoint> taylor_ratios;
    std::vector<RecallEntry> grid;
    GapSummary gap;
};

}  // namespace obcache
