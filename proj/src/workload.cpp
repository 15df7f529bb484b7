// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/workload.hpp"

#include <cmath>
#include <string>

#include "obcache/error.hpp"
#include "obcache/rng.hpp"

namespace obcache {

namespace {

// Stream ids; distinct per tensor so shapes never alias draws.
enum Stream : std::uint64_t {
    kQueries = 1,
    kKeys = 2,
    kValues = 3,
    kMagnitudes = 4,
    kNextQuery = 5,
    kNeedlePlacement = 6,
    kSalience = 7,
};

}  // namespace

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, std::uint64_t stream, double stddev) {
    CounterRng rng(seed, stream);
    Matrix m(rows, cols);
    for (double& x : m.data()) {
        x = stddev * rng.normal();
    }
    return m;
}

AttentionInstance gen_random(std::size_t s, std::size_t d, std::size_t q_len, std::uint64_t seed) {
    if (s == 0 || d == 0 || q_len == 0 || q_len > s) {
        raise(ErrorKind::Shape, "gen_random needs 0 < q_len <= s and d > 0");
    }
    return make_instance(gaussian_matrix(q_len, d, seed, kQueries), gaussian_matrix(s, d, seed, kKeys),
                         gaussian_matrix(s, d, seed, kValues), true);
}

void NeedleSpec::validate() const {
    if (s == 0 || needle_pos >= s) {
        raise(ErrorKind::Config, "needle position " + std::to_string(needle_pos) + " outside [0, " +
                                     std::to_string(s) + ")");
    }
    if (d < 3) {
        raise(ErrorKind::Config, "needle workload needs d >= 3");
    }
    if (!(signal_gain > 0.0)) {
        raise(ErrorKind::Config, "signal_gain must be positive");
    }
    if (noise_scale < 0.0 || value_gain <= 0.0 || value_spread < 0.0 || query_noise < 0.0 || !(recency_span > 0.0)) {
        raise(ErrorKind::Config, "needle scales must be non-negative");
    }
    if (question_rows > s) {
        raise(ErrorKind::Config, "more question rows than prompt tokens");
    }
}

NeedleInstance gen_needle(const NeedleSpec& spec) {
    spec.validate();
    const std::size_t s = spec.s;
    const std::size_t d = spec.d;

    Matrix keys = gaussian_matrix(s, d, spec.seed, kKeys, spec.noise_scale);
    Matrix values = gaussian_matrix(s, d, spec.seed, kValues, spec.noise_scale);
    CounterRng magnitudes(spec.seed, kMagnitudes);
    for (std::size_t j = 0; j < s; ++j) {
        const double magnitude = std::exp(spec.value_spread * magnitudes.normal());
        for (double& x : values.row(j)) {
            x *= magnitude;
        }
        keys(j, 0) = 0.0;
        keys(j, 2) = spec.recency_gain * std::exp(-static_cast<double>(s - 1 - j) / spec.recency_span);
    }
    for (double& x : keys.row(spec.needle_pos)) {
        x = 0.0;
    }
    keys(spec.needle_pos, 0) = spec.signal_gain;
    for (double& x : values.row(spec.needle_pos)) {
        x = 0.0;
    }
    values(spec.needle_pos, 1) = spec.value_gain;

    // Scale the needle logit so that it reads as signal_gain^2 under 1/sqrt(d).
    const double root_d = std::sqrt(static_cast<double>(d));
    auto seek_needle = [&](std::span<double> row, CounterRng& rng) {
        for (double& x : row) {
            x = spec.query_noise * rng.normal();
        }
        row[0] += spec.signal_gain * root_d;
        row[2] += spec.recency_gain * root_d;
    };

    Matrix queries = gaussian_matrix(s, d, spec.seed, kQueries, spec.noise_scale);
    CounterRng question_rng(spec.seed, kQueries + 100);
    for (std::size_t i = s - spec.question_rows; i < s; ++i) {
        seek_needle(queries.row(i), question_rng);
    }

    NeedleInstance out;
    out.needle_pos = spec.needle_pos;
    out.next_query.assign(d, 0.0);
    CounterRng next_rng(spec.seed, kNextQuery);
    seek_needle(out.next_query, next_rng);
    out.prefill = make_instance(std::move(queries), std::move(keys), std::move(values), true);
    return out;
}

NeedleSpec default_needle_spec(std::uint64_t seed, std::size_t s, std::size_t d) {
    NeedleSpec spec;
    spec.s = s;
    spec.d = d;
    spec.seed = seed;
    CounterRng placement(seed, kNeedlePlacement);
    spec.needle_pos = static_cast<std::size_t>(placement.next_u64() % s);
    return spec;
}

void DecodeSpec::validate() const {
    if (steps == 0 || d == 0) {
        raise(ErrorKind::Config, "decode workload needs positive steps and d");
    }
    if (value_spread < 0.0 || key_salience < 0.0 || query_bias < 0.0) {
        raise(ErrorKind::Config, "decode workload scales must be non-negative");
    }
}

DecodeTrace gen_decode_trace(const DecodeSpec& spec) {
    spec.validate();
    DecodeTrace trace;
    trace.queries = gaussian_matrix(spec.steps, spec.d, spec.seed, kQueries);
    trace.keys = gaussian_matrix(spec.steps, spec.d, spec.seed, kKeys);
    trace.values = gaussian_matrix(spec.steps, spec.d, spec.seed, kValues);
    CounterRng magnitudes(spec.seed, kMagnitudes);
    CounterRng salience(spec.seed, kSalience);
    const double root_d = std::sqrt(static_cast<double>(spec.d));
    for (std::size_t t = 0; t < spec.steps; ++t) {
        const double magnitude = std::exp(spec.value_spread * magnitudes.normal());
        for (double& x : trace.values.row(t)) {
            x *= magnitude;
        }
        const double drawn = std::fabs(salience.normal());
        if (spec.key_salience > 0.0 || spec.query_bias > 0.0) {
            trace.keys(t, 0) = spec.key_salience * drawn;
            trace.queries(t, 0) = spec.query_bias * root_d;
        }
    }
    return trace;
}

DecodeTrace gen_identical_trace(std::size_t steps, std::size_t d, std::uint64_t seed) {
    const Matrix one_q = gaussian_matrix(1, d, seed, kQueries);
    const Matrix one_k = gaussian_matrix(1, d, seed, kKeys);
    const Matrix one_v = gaussian_matrix(1, d, seed, kValues);
    DecodeTrace trace;
    for (std::size_t t = 0; t < steps; ++t) {
        trace.queries.append_row(one_q.row(0));
        trace.keys.append_row(one_k.row(0));
        trace.values.append_row(one_v.row(0));
    }
    return trace;
}

}  // namespace obcache
