// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/matrix.hpp"

#include <algorithm>

#include "obcache/error.hpp"

namespace obcache {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Shape: return "shape";
        case ErrorKind::DegenerateRow: return "degenerate-row";
        case ErrorKind::Window: return "window";
        case ErrorKind::Index: return "index";
        case ErrorKind::Ordering: return "ordering";
        case ErrorKind::Aggregation: return "aggregation";
        case ErrorKind::Accumulator: return "accumulator";
        case ErrorKind::Config: return "config";
        case ErrorKind::Metric: return "metric";
        case ErrorKind::UnsupportedSemantics: return "unsupported-semantics";
        case ErrorKind::TraceMagic: return "trace-magic";
        case ErrorKind::TraceVersion: return "trace-version";
        case ErrorKind::TraceShape: return "trace-shape";
        case ErrorKind::TraceTruncated: return "trace-truncated";
        case ErrorKind::Io: return "io";
    }
    return "unknown";
}

void raise(ErrorKind kind, const std::string& what) {
    throw Error(kind, std::string(to_string(kind)) + " error: " + what);
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    m_rows = rows.size();
    m_cols = m_rows == 0 ? 0 : rows.begin()->size();
    m_data.reserve(m_rows * m_cols);
    for (const auto& r : rows) {
        if (r.size() != m_cols) {
            raise(ErrorKind::Shape, "ragged matrix literal");
        }
        m_data.insert(m_data.end(), r.begin(), r.end());
    }
}

void Matrix::append_row(std::span<const double> values) {
    if (m_rows == 0 && m_cols == 0) {
        m_cols = values.size();
    }
    if (values.size() != m_cols) {
        raise(ErrorKind::Shape, "row width " + std::to_string(values.size()) + " != " + std::to_string(m_cols));
    }
    m_data.insert(m_data.end(), values.begin(), values.end());
    ++m_rows;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), m_cols);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= m_rows) {
            raise(ErrorKind::Index, "row " + std::to_string(indices[r]) + " out of " + std::to_string(m_rows));
        }
        std::copy_n(row(indices[r]).begin(), m_cols, out.row(r).begin());
    }
    return out;
}

Matrix Matrix::slice_rows(std::size_t first, std::size_t count) const {
    if (first + count > m_rows) {
        raise(ErrorKind::Index, "row slice past end");
    }
    Matrix out(count, m_cols);
    std::copy_n(m_data.begin() + static_cast<std::ptrdiff_t>(first * m_cols), count * m_cols, out.m_data.begin());
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double squared_norm(std::span<const double> a) noexcept { return dot(a, a); }

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc;
}

}  // namespace obcache
