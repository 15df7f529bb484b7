// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "obcache/error.hpp"
#include "obcache/policy.hpp"

namespace obcache {

namespace {

void check_position(const AttentionInstance& inst, std::size_t p) {
    if (p >= inst.seq_len()) {
        raise(ErrorKind::Index, "position " + std::to_string(p) + " outside cache of " +
                                    std::to_string(inst.seq_len()));
    }
}

void check_window(const AttentionInstance& inst, std::size_t w) {
    if (w < 1 || w > inst.q_len()) {
        raise(ErrorKind::Window,
              "window start " + std::to_string(w) + " outside [1, " + std::to_string(inst.q_len()) + "]");
    }
}

// Output of one query against an explicit key/value set whose rows sit at the
// given absolute positions. Plain loops; shares nothing with the kernels.
Vector attend(std::span<const double> query, const Matrix& keys, const Matrix& values,
              std::span<const std::size_t> positions, double scale, bool causal, std::size_t query_pos) {
    std::vector<double> logits;
    std::vector<std::size_t> live;
    for (std::size_t j = 0; j < keys.rows(); ++j) {
        if (causal && positions[j] > query_pos) {
            continue;
        }
        double acc = 0.0;
        for (std::size_t c = 0; c < query.size(); ++c) {
            acc += query[c] * keys(j, c);
        }
        logits.push_back(scale * acc);
        live.push_back(j);
    }
    Vector out(values.cols(), 0.0);
    if (live.empty()) {
        raise(ErrorKind::DegenerateRow, "query sees no keys after pruning");
    }
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double& l : logits) {
        l = std::exp(l - peak);
        total += l;
    }
    for (std::size_t n = 0; n < live.size(); ++n) {
        const double weight = logits[n] / total;
        for (std::size_t c = 0; c < out.size(); ++c) {
            out[c] += weight * values(live[n], c);
        }
    }
    return out;
}

double window_loss(const AttentionInstance& inst, const Matrix& keys, const Matrix& values,
                   std::span<const std::size_t> positions, std::size_t w) {
    double loss = 0.0;
    for (std::size_t i = w - 1; i < inst.q_len(); ++i) {
        const Vector out = attend(inst.q.row(i), keys, values, positions, inst.scale, inst.causal, inst.q_offset + i);
        loss += squared_distance(out, inst.o.row(i));
    }
    return loss;
}

std::vector<std::size_t> identity_positions(std::size_t n) {
    std::vector<std::size_t> pos(n);
    for (std::size_t j = 0; j < n; ++j) {
        pos[j] = j;
    }
    return pos;
}

// Loss after scaling row p of the pruned tensor(s) by `keep` (0 = zero row).
double scaled_row_loss(const AttentionInstance& inst, std::size_t p, PruneKind kind, std::size_t w, double keep) {
    Matrix keys = inst.k;
    Matrix values = inst.v;
    if (kind == PruneKind::Key || kind == PruneKind::Joint) {
        for (double& x : keys.row(p)) {
            x *= keep;
        }
    }
    if (kind == PruneKind::Value || kind == PruneKind::Joint) {
        for (double& x : values.row(p)) {
            x *= keep;
        }
    }
    const auto positions = identity_positions(inst.seq_len());
    return window_loss(inst, keys, values, positions, w);
}

double closed_form(const AttentionInstance& inst, std::size_t p, PruneKind kind, std::size_t w) {
    // Independent single-position transcription of the three scores.
    const auto vp = inst.v.row(p);
    const double v_norm = squared_norm(vp);
    double value = 0.0;
    double key = 0.0;
    double cross = 0.0;
    for (std::size_t i = w - 1; i < inst.q_len(); ++i) {
        const double weight = inst.a(i, p);
        if (weight == 0.0) {
            continue;
        }
        const double logit = inst.z(i, p);
        value += weight * weight * v_norm;
        key += weight * weight * logit * logit * squared_distance(vp, inst.o.row(i));
        cross += 2.0 * weight * weight * logit * (v_norm - dot(vp, inst.o.row(i)));
    }
    switch (kind) {
        case PruneKind::Value: return value;
        case PruneKind::Key: return key;
        case PruneKind::Joint: return cross + value + key;
    }
    return 0.0;
}

}  // namespace

double exact_eviction_error(const AttentionInstance& inst, std::size_t p, PruneMode mode, std::size_t w) {
    check_position(inst, p);
    check_window(inst, w);
    if (mode.semantics == PruneSemantics::ZeroRow) {
        return scaled_row_loss(inst, p, mode.kind, w, 0.0);
    }
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < inst.seq_len(); ++j) {
        if (j != p) {
            keep.push_back(j);
        }
    }
    const Matrix keys = inst.k.select_rows(keep);
    const Matrix values = inst.v.select_rows(keep);
    // Rows that only saw token p have nothing left to attend to; their output
    // collapses to zero.
    double loss = 0.0;
    for (std::size_t i = w - 1; i < inst.q_len(); ++i) {
        const std::size_t query_pos = inst.q_offset + i;
        const bool any_visible = !inst.causal || std::any_of(keep.begin(), keep.end(), [&](std::size_t j) {
            return j <= query_pos;
        });
        if (!any_visible) {
            loss += squared_norm(inst.o.row(i));
            continue;
        }
        const Vector out = attend(inst.q.row(i), keys, values, keep, inst.scale, inst.causal, query_pos);
        loss += squared_distance(out, inst.o.row(i));
    }
    return loss;
}

std::vector<double> exact_eviction_errors(const AttentionInstance& inst, PruneMode mode, std::size_t w) {
    std::vector<double> out(inst.seq_len());
    for (std::size_t p = 0; p < inst.seq_len(); ++p) {
        out[p] = exact_eviction_error(inst, p, mode, w);
    }
    return out;
}

double true_eviction_error(const AttentionInstance& prefill, std::span<const double> next_query, std::size_t p) {
    check_position(prefill, p);
    if (next_query.size() != prefill.head_dim()) {
        raise(ErrorKind::Shape, "next query width does not match the head dimension");
    }
    const std::size_t s = prefill.seq_len();
    const auto all = identity_positions(s);
    const Vector full = attend(next_query, prefill.k, prefill.v, all, prefill.scale, false, s);
    if (s == 1) {
        return squared_norm(full);
    }
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < s; ++j) {
        if (j != p) {
            keep.push_back(j);
        }
    }
    const Vector pruned =
        attend(next_query, prefill.k.select_rows(keep), prefill.v.select_rows(keep), keep, prefill.scale, false, s);
    return squared_distance(full, pruned);
}

std::vector<double> true_eviction_errors(const AttentionInstance& prefill, std::span<const double> next_query) {
    std::vector<double> out(prefill.seq_len());
    for (std::size_t p = 0; p < prefill.seq_len(); ++p) {
        out[p] = true_eviction_error(prefill, next_query, p);
    }
    return out;
}

std::vector<TaylorPoint> taylor_residual(const AttentionInstance& inst, std::size_t p, PruneMode mode,
                                         std::size_t w, std::span<const double> eps_list) {
    if (mode.semantics != PruneSemantics::ZeroRow) {
        raise(ErrorKind::UnsupportedSemantics, "the Taylor expansion only covers zero-row pruning");
    }
    check_position(inst, p);
    check_window(inst, w);
    const double score = closed_form(inst, p, mode.kind, w);
    std::vector<TaylorPoint> out;
    out.reserve(eps_list.size());
    for (double eps : eps_list) {
        TaylorPoint point;
        point.eps = eps;
        point.loss = scaled_row_loss(inst, p, mode.kind, w, 1.0 - eps);
        const double normalized = point.loss / (eps * eps);
        if (score == 0.0) {
            point.ratio = normalized == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
        } else {
            point.ratio = normalized / score;
        }
        out.push_back(point);
    }
    return out;
}

double fitted_order(std::span<const double> eps, std::span<const double> y) {
    if (eps.size() != y.size() || eps.size() < 2) {
        raise(ErrorKind::Metric, "order fit needs at least two matching samples");
    }
    double mx = 0.0;
    double my = 0.0;
    const double n = static_cast<double>(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        mx += std::log(eps[i]);
        my += std::log(y[i]);
    }
    mx /= n;
    my /= n;
    double sxy = 0.0;
    double sxx = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double dx = std::log(eps[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

double loss_order(std::span<const TaylorPoint> points) {
    std::vector<double> eps;
    std::vector<double> loss;
    for (const auto& pt : points) {
        eps.push_back(pt.eps);
        loss.push_back(pt.loss);
    }
    return fitted_order(eps, loss);
}

double topk_recall(std::span<const double> reference, std::span<const double> candidate, std::size_t k) {
    if (reference.size() != candidate.size()) {
        raise(ErrorKind::Metric, "reference and candidate lengths differ");
    }
    if (k == 0 || k > reference.size()) {
        raise(ErrorKind::Metric, "k = " + std::to_string(k) + " outside [1, " + std::to_string(reference.size()) + "]");
    }
    const auto ref = top_k_indices(reference, k);
    const auto cand = top_k_indices(candidate, k);
    std::vector<std::size_t> common;
    std::set_intersection(ref.begin(), ref.end(), cand.begin(), cand.end(), std::back_inserter(common));
    return static_cast<double>(common.size()) / static_cast<double>(k);
}

double topk_recall(const SaliencyVector& reference, const SaliencyVector& candidate, std::size_t k) {
    return topk_recall(reference.scores, candidate.scores, k);
}

std::vector<std::size_t> reserved_selection(std::span<const double> candidate, std::size_t k, std::size_t reserve) {
    const std::size_t s = candidate.size();
    if (k == 0 || k > s) {
        raise(ErrorKind::Metric, "k = " + std::to_string(k) + " outside [1, " + std::to_string(s) + "]");
    }
    if (reserve > k) {
        raise(ErrorKind::Metric, "reserved window larger than k");
    }
    std::vector<std::size_t> picks = top_k_indices(candidate.first(s - reserve), k - reserve);
    for (std::size_t j = s - reserve; j < s; ++j) {
        picks.push_back(j);
    }
    return picks;
}

double topk_recall_reserved(std::span<const double> reference, std::span<const double> candidate, std::size_t k,
                            std::size_t reserve) {
    if (reference.size() != candidate.size()) {
        raise(ErrorKind::Metric, "reference and candidate lengths differ");
    }
    const auto ref = top_k_indices(reference, k);
    const auto cand = reserved_selection(candidate, k, reserve);
    std::vector<std::size_t> common;
    std::set_intersection(ref.begin(), ref.end(), cand.begin(), cand.end(), std::back_inserter(common));
    return static_cast<double>(common.size()) / static_cast<double>(k);
}

GapSummary semantics_gap(const AttentionInstance& inst, std::size_t w) {
    const auto zero = exact_eviction_errors(inst, {PruneKind::Joint, PruneSemantics::ZeroRow}, w);
    const auto removed = exact_eviction_errors(inst, {PruneKind::Joint, PruneSemantics::RemoveRow}, w);
    std::vector<double> gaps(zero.size());
    GapSummary summary;
    summary.count = gaps.size();
    for (std::size_t p = 0; p < gaps.size(); ++p) {
        gaps[p] = std::abs(removed[p] - zero[p]);
        summary.mean += gaps[p];
        summary.max = std::max(summary.max, gaps[p]);
    }
    if (!gaps.empty()) {
        summary.mean /= static_cast<double>(gaps.size());
        std::sort(gaps.begin(), gaps.end());
        const std::size_t mid = gaps.size() / 2;
        summary.median = gaps.size() % 2 ? gaps[mid] : 0.5 * (gaps[mid - 1] + gaps[mid]);
    }
    return summary;
}

}  // namespace obcache
