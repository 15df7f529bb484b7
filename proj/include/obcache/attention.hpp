// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>

#include "obcache/cache.hpp"
#include "obcache/matrix.hpp"

namespace obcache {

// Logit value for masked (future) entries; softmax maps it to exactly 0.
inline constexpr double kMaskedLogit = -std::numeric_limits<double>::infinity();

inline bool is_masked(double logit) noexcept { return logit == kMaskedLogit; }

double default_scale(std::size_t head_dim);

// Everything one head computed at one moment. Query row i sits at absolute
// position q_offset + i; under a causal mask it sees keys 0..q_offset + i.
struct AttentionInstance {
    Matrix q;  // q_len x d
    Matrix k;  // s x d
    Matrix v;  // s x d
    Matrix z;  // q_len x s, pre-softmax logits
    Matrix a;  // q_len x s, row-stochastic weights
    Matrix o;  // q_len x d
    bool causal = true;
    double scale = 1.0;
    std::size_t q_offset = 0;

    std::size_t q_len() const noexcept { return q.rows(); }
    std::size_t seq_len() const noexcept { return k.rows(); }
    std::size_t head_dim() const noexcept { return k.cols(); }
};

Matrix compute_logits(const Matrix& q, const Matrix& k, double scale, bool causal, std::size_t q_offset);
Matrix softmax_rows(const Matrix& z);
Matrix attention_output(const Matrix& a, const Matrix& v);

// Runs the full forward pass. For causal instances the queries are taken to be
// the last q_len positions of the sequence unless q_offset is given.
AttentionInstance make_instance(Matrix q, Matrix k, Matrix v, bool causal = true,
                                std::optional<double> scale = std::nullopt,
                                std::optional<std::size_t> q_offset = std::nullopt);

struct DecodeStep {
    Vector q;
    Vector z;
    Vector a;
    Vector o;
    Position position = 0;  // original position of the token appended this step
};

// Appends (key, value) for the next position, then attends the new query over
// the whole cache (the new token included).
DecodeStep decode_step(KvCache& cache, std::span<const double> query, std::span<const double> key,
                       std::span<const double> value, std::optional<double> scale = std::nullopt);

// Single-row view of a decode step, usable by the scorers with window_start 1.
AttentionInstance instance_from_step(const DecodeStep& step, const KvCache& cache, double scale);

}  // namespace obcache
