// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "obcache/error.hpp"

namespace obcache {

double default_scale(std::size_t head_dim) { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }

Matrix compute_logits(const Matrix& q, const Matrix& k, double scale, bool causal, std::size_t q_offset) {
    if (q.cols() != k.cols()) {
        raise(ErrorKind::Shape,
              "query width " + std::to_string(q.cols()) + " != key width " + std::to_string(k.cols()));
    }
    if (!(scale > 0.0)) {
        raise(ErrorKind::Shape, "scale must be positive");
    }
    Matrix z(q.rows(), k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
        const auto qi = q.row(i);
        for (std::size_t j = 0; j < k.rows(); ++j) {
            if (causal && j > q_offset + i) {
                z(i, j) = kMaskedLogit;
            } else {
                z(i, j) = scale * dot(qi, k.row(j));
            }
        }
    }
    return z;
}

Matrix softmax_rows(const Matrix& z) {
    Matrix a(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const auto zi = z.row(i);
        const double peak = zi.empty() ? kMaskedLogit : *std::max_element(zi.begin(), zi.end());
        if (is_masked(peak) || !std::isfinite(peak)) {
            raise(ErrorKind::DegenerateRow, "row " + std::to_string(i) + " has no finite logit");
        }
        double total = 0.0;
        auto ai = a.row(i);
        for (std::size_t j = 0; j < zi.size(); ++j) {
            ai[j] = is_masked(zi[j]) ? 0.0 : std::exp(zi[j] - peak);
            total += ai[j];
        }
        for (double& x : ai) {
            x /= total;
        }
    }
    return a;
}

Matrix attention_output(const Matrix& a, const Matrix& v) {
    if (a.cols() != v.rows()) {
        raise(ErrorKind::Shape,
              "weights have " + std::to_string(a.cols()) + " columns but values have " + std::to_string(v.rows()) +
                  " rows");
    }
    Matrix o(a.rows(), v.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto oi = o.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double w = a(i, j);
            if (w == 0.0) {
                continue;
            }
            const auto vj = v.row(j);
            for (std::size_t c = 0; c < oi.size(); ++c) {
                oi[c] += w * vj[c];
            }
        }
    }
    return o;
}

AttentionInstance make_instance(Matrix q, Matrix k, Matrix v, bool causal, std::optional<double> scale,
                                std::optional<std::size_t> q_offset) {
    if (k.rows() != v.rows() || k.cols() != v.cols()) {
        raise(ErrorKind::Shape, "keys and values must have the same shape");
    }
    if (q.cols() != k.cols()) {
        raise(ErrorKind::Shape, "queries and keys must share the head dimension");
    }
    if (k.rows() == 0 || q.rows() == 0) {
        raise(ErrorKind::Shape, "instance needs at least one query and one key");
    }
    AttentionInstance inst;
    inst.causal = causal;
    inst.scale = scale.value_or(default_scale(k.cols()));
    if (q_offset) {
        inst.q_offset = *q_offset;
    } else if (causal) {
        if (q.rows() > k.rows()) {
            raise(ErrorKind::Shape, "causal instance has more queries than keys");
        }
        inst.q_offset = k.rows() - q.rows();
    }
    inst.z = compute_logits(q, k, inst.scale, causal, inst.q_offset);
    inst.a = softmax_rows(inst.z);
    inst.o = attention_output(inst.a, v);
    inst.q = std::move(q);
    inst.k = std::move(k);
    inst.v = std::move(v);
    return inst;
}

DecodeStep decode_step(KvCache& cache, std::span<const double> query, std::span<const double> key,
                       std::span<const double> value, std::optional<double> scale) {
    if (query.size() != cache.head_dim()) {
        raise(ErrorKind::Shape, "query width " + std::to_string(query.size()) + " != cache head dimension " +
                                    std::to_string(cache.head_dim()));
    }
    cache.append(key, value);

    DecodeStep step;
    step.q.assign(query.begin(), query.end());
    step.position = cache.positions().back();
    const double sc = scale.value_or(default_scale(cache.head_dim()));
    const Matrix& keys = cache.keys();
    const Matrix& values = cache.values();

    step.z.resize(keys.rows());
    for (std::size_t j = 0; j < keys.rows(); ++j) {
        step.z[j] = sc * dot(query, keys.row(j));
    }
    const double peak = *std::max_element(step.z.begin(), step.z.end());
    step.a.resize(step.z.size());
    double total = 0.0;
    for (std::size_t j = 0; j < step.z.size(); ++j) {
        step.a[j] = std::exp(step.z[j] - peak);
        total += step.a[j];
    }
    for (double& w : step.a) {
        w /= total;
    }
    step.o.assign(cache.head_dim(), 0.0);
    for (std::size_t j = 0; j < values.rows(); ++j) {
        const auto vj = values.row(j);
        for (std::size_t c = 0; c < step.o.size(); ++c) {
            step.o[c] += step.a[j] * vj[c];
        }
    }
    return step;
}

AttentionInstance instance_from_step(const DecodeStep& step, const KvCache& cache, double scale) {
    if (step.z.size() != cache.size()) {
        raise(ErrorKind::Shape, "decode step does not match the cache it was computed on");
    }
    AttentionInstance inst;
    inst.q = Matrix(1, cache.head_dim());
    std::copy(step.q.begin(), step.q.end(), inst.q.row(0).begin());
    inst.k = cache.keys();
    inst.v = cache.values();
    inst.z = Matrix(1, step.z.size());
    std::copy(step.z.begin(), step.z.end(), inst.z.row(0).begin());
    inst.a = Matrix(1, step.a.size());
    std::copy(step.a.begin(), step.a.end(), inst.a.row(0).begin());
    inst.o = Matrix(1, step.o.size());
    std::copy(step.o.begin(), step.o.end(), inst.o.row(0).begin());
    inst.causal = true;
    inst.scale = scale;
    inst.q_offset = cache.size() - 1;
    return inst;
}

}  // namespace obcache
