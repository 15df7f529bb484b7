// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/trace.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <system_error>

#include "json.hpp"
#include "obcache/error.hpp"

namespace obcache {

using json = nlohmann::json;

namespace {

const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

std::size_t element_size(Precision p) { return p == Precision::F32 ? 4 : 8; }

template <typename UInt>
void put_le(std::vector<std::uint8_t>& out, UInt value) {
    for (std::size_t b = 0; b < sizeof(UInt); ++b) {
        out.push_back(static_cast<std::uint8_t>(value >> (8 * b)));
    }
}

template <typename UInt>
UInt get_le(const std::uint8_t* in) {
    UInt value = 0;
    for (std::size_t b = 0; b < sizeof(UInt); ++b) {
        value |= static_cast<UInt>(in[b]) << (8 * b);
    }
    return value;
}

json header_to_json(const TraceHeader& h) {
    json tensors = json::array();
    for (const auto& t : trace_layout(h)) {
        tensors.push_back({{"name", t.name},
                           {"layer", t.layer},
                           {"head", t.head},
                           {"rows", h.seq_len()},
                           {"cols", h.d}});
    }
    return {{"version", h.version},
            {"num_layers", h.num_layers},
            {"num_kv_heads", h.num_kv_heads},
            {"num_q_heads", h.num_q_heads},
            {"d", h.d},
            {"prompt_len", h.prompt_len},
            {"decode_len", h.decode_len},
            {"precision", precision_name(h.precision)},
            {"endianness", "little"},
            {"extras", h.extras},
            {"tensors", tensors}};
}

TraceHeader header_from_json(const json& j) {
    TraceHeader h;
    try {
        h.version = j.at("version").get<int>();
        if (h.version != kTraceVersion) {
            raise(ErrorKind::TraceVersion, "unsupported trace version " + std::to_string(h.version));
        }
        h.num_layers = j.at("num_layers").get<std::size_t>();
        h.num_kv_heads = j.at("num_kv_heads").get<std::size_t>();
        h.num_q_heads = j.at("num_q_heads").get<std::size_t>();
        h.d = j.at("d").get<std::size_t>();
        h.prompt_len = j.at("prompt_len").get<std::size_t>();
        h.decode_len = j.at("decode_len").get<std::size_t>();
        const auto precision = j.at("precision").get<std::string>();
        if (precision == "f32") {
            h.precision = Precision::F32;
        } else if (precision == "f64") {
            h.precision = Precision::F64;
        } else {
            raise(ErrorKind::TraceShape, "unknown precision '" + precision + "'");
        }
        if (j.at("endianness").get<std::string>() != "little") {
            raise(ErrorKind::TraceShape, "only little-endian payloads are supported");
        }
        if (j.contains("extras")) {
            h.extras = j.at("extras").get<std::map<std::string, std::string>>();
        }
        h.validate();
        const auto& tensors = j.at("tensors");
        const auto layout = trace_layout(h);
        if (!tensors.is_array() || tensors.size() != layout.size()) {
            raise(ErrorKind::TraceShape, "tensor table does not match the header dimensions");
        }
        for (std::size_t n = 0; n < layout.size(); ++n) {
            const auto& t = tensors[n];
            if (t.at("name").get<std::string>() != layout[n].name ||
                t.at("layer").get<std::size_t>() != layout[n].layer ||
                t.at("head").get<std::size_t>() != layout[n].head ||
                t.at("rows").get<std::size_t>() != h.seq_len() || t.at("cols").get<std::size_t>() != h.d) {
                raise(ErrorKind::TraceShape, "tensor table entry " + std::to_string(n) + " is out of order or misshapen");
            }
        }
    } catch (const json::exception& e) {
        raise(ErrorKind::TraceShape, std::string("malformed header: ") + e.what());
    }
    return h;
}

}  // namespace

void TraceHeader::validate() const {
    if (num_layers == 0 || num_kv_heads == 0 || num_q_heads == 0 || d == 0) {
        raise(ErrorKind::TraceShape, "trace dimensions must be positive");
    }
    if (num_q_heads % num_kv_heads != 0) {
        raise(ErrorKind::TraceShape, "num_q_heads must be a multiple of num_kv_heads");
    }
    if (seq_len() == 0) {
        raise(ErrorKind::TraceShape, "trace holds no tokens");
    }
}

std::vector<TraceTensor> trace_layout(const TraceHeader& header) {
    std::vector<TraceTensor> layout;
    layout.reserve(header.tensor_count());
    for (std::size_t l = 0; l < header.num_layers; ++l) {
        for (std::size_t h = 0; h < header.num_q_heads; ++h) {
            layout.push_back({"Q", l, h, {}});
        }
        for (std::size_t g = 0; g < header.num_kv_heads; ++g) {
            layout.push_back({"K", l, g, {}});
            layout.push_back({"V", l, g, {}});
        }
    }
    return layout;
}

const Matrix& Trace::query(std::size_t layer, std::size_t q_head) const {
    return tensors.at(layer * (header.num_q_heads + 2 * header.num_kv_heads) + q_head).data;
}

const Matrix& Trace::key(std::size_t layer, std::size_t kv_head) const {
    return tensors.at(layer * (header.num_q_heads + 2 * header.num_kv_heads) + header.num_q_heads + 2 * kv_head).data;
}

const Matrix& Trace::value(std::size_t layer, std::size_t kv_head) const {
    return tensors.at(layer * (header.num_q_heads + 2 * header.num_kv_heads) + header.num_q_heads + 2 * kv_head + 1)
        .data;
}

std::vector<std::uint8_t> encode_trace(const Trace& trace) {
    trace.header.validate();
    const auto layout = trace_layout(trace.header);
    if (trace.tensors.size() != layout.size()) {
        raise(ErrorKind::TraceShape, "expected " + std::to_string(layout.size()) + " tensors, got " +
                                         std::to_string(trace.tensors.size()));
    }
    for (std::size_t n = 0; n < layout.size(); ++n) {
        const auto& t = trace.tensors[n];
        if (t.name != layout[n].name || t.layer != layout[n].layer || t.head != layout[n].head ||
            t.data.rows() != trace.header.seq_len() || t.data.cols() != trace.header.d) {
            raise(ErrorKind::TraceShape, "tensor " + std::to_string(n) + " does not match the header layout");
        }
    }

    const std::string header = header_to_json(trace.header).dump();
    std::vector<std::uint8_t> out(kTraceMagic.begin(), kTraceMagic.end());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    out.reserve(out.size() + layout.size() * trace.header.seq_len() * trace.header.d *
                                 element_size(trace.header.precision));
    for (const auto& t : trace.tensors) {
        for (double x : t.data.data()) {
            if (trace.header.precision == Precision::F32) {
                put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
            } else {
                put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
            }
        }
    }
    return out;
}

Trace decode_trace(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kTraceMagic.size() || std::memcmp(bytes.data(), kTraceMagic.data(), kTraceMagic.size()) != 0) {
        raise(ErrorKind::TraceMagic, "not an obcache trace (bad magic)");
    }
    if (bytes.size() < 12) {
        raise(ErrorKind::TraceTruncated, "file ends inside the header length");
    }
    const std::size_t header_len = get_le<std::uint32_t>(bytes.data() + 8);
    if (bytes.size() < 12 + header_len) {
        raise(ErrorKind::TraceTruncated, "file ends inside the JSON header");
    }
    json j;
    try {
        j = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        raise(ErrorKind::TraceShape, std::string("header is not valid JSON: ") + e.what());
    }

    Trace trace;
    trace.header = header_from_json(j);
    const std::size_t width = element_size(trace.header.precision);
    const std::size_t per_tensor = trace.header.seq_len() * trace.header.d;
    const std::size_t payload = trace.header.tensor_count() * per_tensor * width;
    const std::size_t available = bytes.size() - 12 - header_len;
    if (available < payload) {
        raise(ErrorKind::TraceTruncated, "payload holds " + std::to_string(available) + " of " +
                                             std::to_string(payload) + " bytes");
    }
    if (available > payload) {
        raise(ErrorKind::TraceShape, std::to_string(available - payload) + " trailing bytes after the payload");
    }

    const std::uint8_t* cursor = bytes.data() + 12 + header_len;
    trace.tensors = trace_layout(trace.header);
    for (auto& t : trace.tensors) {
        t.data = Matrix(trace.header.seq_len(), trace.header.d);
        for (double& x : t.data.data()) {
            if (trace.header.precision == Precision::F32) {
                x = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(cursor)));
            } else {
                x = std::bit_cast<double>(get_le<std::uint64_t>(cursor));
            }
            cursor += width;
        }
    }
    return trace;
}

void write_trace(const std::filesystem::path& path, const Trace& trace) {
    write_file_atomic(path, encode_trace(trace));
}

Trace read_trace(const std::filesystem::path& path) { return decode_trace(read_file(path)); }

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            raise(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            raise(ErrorKind::Io, "short write to " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        raise(ErrorKind::Io, "cannot move " + tmp.string() + " into place");
    }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        raise(ErrorKind::Io, "cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace obcache
