// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace obcache {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : m_rows(rows), m_cols(cols), m_data(rows * cols, fill) {}
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const noexcept { return m_rows; }
    std::size_t cols() const noexcept { return m_cols; }
    bool empty() const noexcept { return m_data.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return m_data[i * m_cols + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return m_data[i * m_cols + j]; }

    std::span<double> row(std::size_t i) noexcept { return {m_data.data() + i * m_cols, m_cols}; }
    std::span<const double> row(std::size_t i) const noexcept { return {m_data.data() + i * m_cols, m_cols}; }

    std::span<double> data() noexcept { return m_data; }
    std::span<const double> data() const noexcept { return m_data; }

    void append_row(std::span<const double> values);
    // Keeps only the listed rows, in the given order.
    Matrix select_rows(std::span<const std::size_t> indices) const;
    // Rows [first, first + count).
    Matrix slice_rows(std::size_t first, std::size_t count) const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t m_rows = 0;
    std::size_t m_cols = 0;
    std::vector<double> m_data;
};

double dot(std::span<const double> a, std::span<const double> b) noexcept;
double squared_norm(std::span<const double> a) noexcept;
double squared_distance(std::span<const double> a, std::span<const double> b) noexcept;

}  // namespace obcache
