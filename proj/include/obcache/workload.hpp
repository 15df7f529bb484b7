// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>

#include "obcache/attention.hpp"
#include "obcache/policy.hpp"

namespace obcache {

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, std::uint64_t stream,
                       double stddev = 1.0);

// Q (q_len x d), K and V (s x d) drawn i.i.d. standard normal; the queries sit
// at the last q_len positions under a causal mask.
AttentionInstance gen_random(std::size_t s, std::size_t d, std::size_t q_len, std::uint64_t seed);

// Toy passkey task. Background keys and values are Gaussian at noise_scale
// (values additionally get a log-normal per-token magnitude); the needle key
// is signal_gain * e0 and the needle value is value_gain * e1. The last
// question_rows prompt queries and the first decode query point at the needle
// and also lean on e2. Background keys are zero along e0; along e2 they hold
// only recency_gain * exp(-(s - 1 - j) / recency_span).
struct NeedleSpec {
    std::size_t s = 64;
    std::size_t d = 32;
    std::size_t needle_pos = 21;
    double signal_gain = 2.5;
    double noise_scale = 1.0;
    std::uint64_t seed = 1;
    double value_gain = 16.0;
    double value_spread = 1.0;
    double recency_gain = 1.5;
    double recency_span = 1.0;
    std::size_t question_rows = 8;
    double query_noise = 0.5;

    void validate() const;
};

struct NeedleInstance {
    AttentionInstance prefill;
    Vector next_query;
    std::size_t needle_pos = 0;
};

NeedleInstance gen_needle(const NeedleSpec& spec);

// Frozen needle settings for `seed`; the seed also places the needle.
NeedleSpec default_needle_spec(std::uint64_t seed, std::size_t s = 64, std::size_t d = 32);

// Decode stream with persistent heavy hitters. Queries, keys and values are
// standard normal except along e0: every key holds key_salience * |N(0,1)|
// there and every query holds query_bias * sqrt(d), so salient tokens draw
// attention at every step. Values get a log-normal per-token magnitude.
// key_salience = query_bias = value_spread = 0 gives a plain i.i.d. stream.
struct DecodeSpec {
    std::size_t steps = 64;
    std::size_t d = 32;
    std::uint64_t seed = 6;
    double value_spread = 0.5;
    double key_salience = 3.0;
    double query_bias = 0.5;

    void validate() const;
};

DecodeTrace gen_decode_trace(const DecodeSpec& spec);

// Every step repeats the same (q, k, v).
DecodeTrace gen_identical_trace(std::size_t steps, std::size_t d, std::uint64_t seed);

}  // namespace obcache
