// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "obcache/matrix.hpp"

namespace obcache {

// Container layout (all integers little-endian):
//   bytes 0..7   magic "OBCTRACE"
//   bytes 8..11  u32 header length N
//   next N bytes UTF-8 JSON header
//   payload      raw IEEE-754 tensors in the order listed by header["tensors"]
// Tensor order is layer-major; inside a layer come the query heads (Q), then
// for each KV head its K followed by its V. Every tensor is row-major with
// prompt_len + decode_len rows and d columns.
inline constexpr std::array<char, 8> kTraceMagic = {'O', 'B', 'C', 'T', 'R', 'A', 'C', 'E'};
inline constexpr int kTraceVersion = 1;

enum class Precision { F32, F64 };

struct TraceHeader {
    int version = kTraceVersion;
    std::size_t num_layers = 1;
    std::size_t num_kv_heads = 1;
    std::size_t num_q_heads = 1;
    std::size_t d = 0;
    std::size_t prompt_len = 0;
    std::size_t decode_len = 0;
    Precision precision = Precision::F64;
    std::map<std::string, std::string> extras;

    std::size_t seq_len() const noexcept { return prompt_len + decode_len; }
    std::size_t group_size() const noexcept { return num_q_heads / num_kv_heads; }
    std::size_t tensor_count() const noexcept { return num_layers * (num_q_heads + 2 * num_kv_heads); }
    void validate() const;

    bool operator==(const TraceHeader&) const = default;
};

struct TraceTensor {
    std::string name;  // "Q", "K" or "V"
    std::size_t layer = 0;
    std::size_t head = 0;
    Matrix data;
};

struct Trace {
    TraceHeader header;
    std::vector<TraceTensor> tensors;

    const Matrix& query(std::size_t layer, std::size_t q_head) const;
    const Matrix& key(std::size_t layer, std::size_t kv_head) const;
    const Matrix& value(std::size_t layer, std::size_t kv_head) const;
};

// Canonical (name, layer, head) sequence implied by a header.
std::vector<TraceTensor> trace_layout(const TraceHeader& header);

std::vector<std::uint8_t> encode_trace(const Trace& trace);
Trace decode_trace(std::span<const std::uint8_t> bytes);

void write_trace(const std::filesystem::path& path, const Trace& trace);
Trace read_trace(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace obcache
