// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <vector>

#include <unistd.h>

#include <gtest/gtest.h>

#include "obcache/harness.hpp"
#include "obcache/oracle.hpp"
#include "obcache/trace.hpp"
#include "obcache/workload.hpp"
#include "test_support.hpp"

using namespace obcache;
using namespace obcache::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    const fs::path dir = fs::temp_directory_path() / ("obcache_workload_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir;
}

std::size_t argmax(const std::vector<double>& xs) {
    return static_cast<std::size_t>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

// Attention of a lone query over the prefill keys.
std::vector<double> attention_of(const AttentionInstance& inst, const Vector& q) {
    std::vector<double> z(inst.k.rows());
    for (std::size_t j = 0; j < z.size(); ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < q.size(); ++c) {
            acc += q[c] * inst.k(j, c);
        }
        z[j] = inst.scale * acc;
    }
    const auto p = softmax_ld(z);
    return {p.begin(), p.end()};
}

Trace small_trace(Precision precision, std::uint64_t seed) {
    GenTraceRequest req;
    req.layers = 2;
    req.kv_heads = 2;
    req.q_heads = 4;
    req.d = 4;
    req.prompt_len = 5;
    req.decode_len = 3;
    req.seed = seed;
    req.precision = precision;
    return gen_trace(req);
}

}  // namespace

TEST(GenRandom, SameSeedIsBitIdentical) {
    const auto a = gen_random(12, 6, 4, 99);
    const auto b = gen_random(12, 6, 4, 99);
    EXPECT_EQ(a.q, b.q);
    EXPECT_EQ(a.k, b.k);
    EXPECT_EQ(a.v, b.v);
    EXPECT_EQ(a.a, b.a);
    EXPECT_EQ(a.o, b.o);
    EXPECT_NE(gen_random(12, 6, 4, 100).q, a.q);
}

TEST(GenRandom, SingleTokenAttendsFully) {
    const auto inst = gen_random(1, 4, 1, 3);
    EXPECT_EQ(inst.a.rows(), 1U);
    EXPECT_EQ(inst.a(0, 0), 1.0);
}

TEST(GenRandom, ColumnMeansSeed7) {
    const auto inst = gen_random(8, 4, 8, 7);
    const double bound = 3.0 / std::sqrt(8.0);
    for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 8; ++i) {
            mean += inst.q(i, c);
        }
        mean /= 8.0;
        EXPECT_LT(std::fabs(mean), bound) << "column " << c;
    }
}

TEST(GenRandom, Causal) {
    const auto inst = gen_random(10, 3, 10, 5);
    for (std::size_t i = 0; i < 10; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 10; ++j) {
            if (j > i) {
                EXPECT_EQ(inst.a(i, j), 0.0);
            }
            row += inst.a(i, j);
        }
        EXPECT_NEAR(row, 1.0, 1e-12);
    }
}

TEST(GenNeedle, InvalidSpecsAreConfigErrors) {
    NeedleSpec spec;
    spec.needle_pos = spec.s;
    EXPECT_EQ(kind_of([&] { gen_needle(spec); }), ErrorKind::Config);
    spec = NeedleSpec{};
    spec.signal_gain = 0.0;
    EXPECT_EQ(kind_of([&] { gen_needle(spec); }), ErrorKind::Config);
}

TEST(GenNeedle, Deterministic) {
    const auto a = gen_needle(default_needle_spec(4));
    const auto b = gen_needle(default_needle_spec(4));
    EXPECT_EQ(a.prefill.k, b.prefill.k);
    EXPECT_EQ(a.next_query, b.next_query);
    EXPECT_EQ(a.needle_pos, b.needle_pos);
}

TEST(GenNeedle, InstanceIsRowStochasticAndCausal) {
    const auto n = gen_needle(default_needle_spec(2));
    const auto& a = n.prefill.a;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (j > n.prefill.q_offset + i) {
                EXPECT_EQ(a(i, j), 0.0);
            }
            row += a(i, j);
        }
        EXPECT_NEAR(row, 1.0, 1e-12);
    }
}

TEST(GenNeedle, LargeGainSaturatesAttention) {
    NeedleSpec spec = default_needle_spec(3);
    spec.signal_gain = 200.0;
    const auto n = gen_needle(spec);
    EXPECT_GT(attention_of(n.prefill, n.next_query)[n.needle_pos], 1.0 - 1e-9);
}

TEST(GenNeedle, SilentBackgroundPutsTrueErrorOnNeedle) {
    NeedleSpec spec = default_needle_spec(5);
    spec.noise_scale = 0.0;
    const auto n = gen_needle(spec);
    EXPECT_EQ(argmax(true_eviction_errors(n.prefill, n.next_query)), n.needle_pos);
}

TEST(GenNeedle, DefaultSpecNeedleIsTrueErrorArgmax) {
    int hits = 0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        const auto n = gen_needle(default_needle_spec(seed));
        hits += argmax(true_eviction_errors(n.prefill, n.next_query)) == n.needle_pos ? 1 : 0;
    }
    EXPECT_GE(hits, 95);
}

TEST(GenDecode, DeterministicAndShaped) {
    const auto a = gen_decode_trace(DecodeSpec{});
    const auto b = gen_decode_trace(DecodeSpec{});
    EXPECT_EQ(a.queries, b.queries);
    EXPECT_EQ(a.keys, b.keys);
    EXPECT_EQ(a.values, b.values);
    EXPECT_EQ(a.steps(), 64U);
    EXPECT_EQ(a.head_dim(), 32U);
    EXPECT_EQ(kind_of([] { gen_decode_trace(DecodeSpec{.steps = 0}); }), ErrorKind::Config);
}

TEST(Trace, RoundTripIsBitIdentical) {
    for (auto precision : {Precision::F64, Precision::F32}) {
        const Trace t = small_trace(precision, 11);
        const fs::path path = scratch_dir() / "round.obct";
        write_trace(path, t);
        const Trace back = read_trace(path);
        EXPECT_EQ(back.header, t.header);
        ASSERT_EQ(back.tensors.size(), t.tensors.size());
        for (std::size_t i = 0; i < t.tensors.size(); ++i) {
            EXPECT_EQ(back.tensors[i].name, t.tensors[i].name);
            EXPECT_EQ(back.tensors[i].layer, t.tensors[i].layer);
            EXPECT_EQ(back.tensors[i].head, t.tensors[i].head);
            EXPECT_EQ(back.tensors[i].data, t.tensors[i].data);
        }
        EXPECT_EQ(encode_trace(back), encode_trace(t));
    }
}

TEST(Trace, LayoutOrder) {
    TraceHeader h;
    h.num_layers = 1;
    h.num_kv_heads = 1;
    h.num_q_heads = 2;
    h.d = 2;
    h.prompt_len = 3;
    const auto layout = trace_layout(h);
    ASSERT_EQ(layout.size(), 4U);
    EXPECT_EQ(layout[0].name, "Q");
    EXPECT_EQ(layout[1].name, "Q");
    EXPECT_EQ(layout[1].head, 1U);
    EXPECT_EQ(layout[2].name, "K");
    EXPECT_EQ(layout[3].name, "V");
}

TEST(Trace, HeaderValidation) {
    TraceHeader h;
    h.d = 4;
    h.prompt_len = 2;
    h.num_kv_heads = 2;
    h.num_q_heads = 3;
    EXPECT_EQ(kind_of([&] { h.validate(); }), ErrorKind::TraceShape);
}

TEST(Trace, CorruptedMagic) {
    auto bytes = encode_trace(small_trace(Precision::F64, 1));
    bytes[0] = 'X';
    EXPECT_EQ(kind_of([&] { decode_trace(bytes); }), ErrorKind::TraceMagic);
}

TEST(Trace, VersionMismatch) {
    // Patch the version digit inside the JSON header.
    auto bytes = encode_trace(small_trace(Precision::F64, 1));
    const std::string needle = "\"version\":1";
    std::string text(bytes.begin(), bytes.end());
    const auto at = text.find(needle);
    ASSERT_NE(at, std::string::npos);
    bytes[at + needle.size() - 1] = '2';
    EXPECT_EQ(kind_of([&] { decode_trace(bytes); }), ErrorKind::TraceVersion);
}

TEST(Trace, TruncatedPayloadAndHeader) {
    const auto bytes = encode_trace(small_trace(Precision::F64, 1));
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 8);
    EXPECT_EQ(kind_of([&] { decode_trace(cut); }), ErrorKind::TraceTruncated);
    std::vector<std::uint8_t> stub(bytes.begin(), bytes.begin() + 10);
    EXPECT_EQ(kind_of([&] { decode_trace(stub); }), ErrorKind::TraceTruncated);
}

TEST(Trace, TrailingBytesAreShapeError) {
    auto bytes = encode_trace(small_trace(Precision::F64, 1));
    bytes.push_back(0);
    EXPECT_EQ(kind_of([&] { decode_trace(bytes); }), ErrorKind::TraceShape);
}

TEST(Trace, MissingFileIsIoError) {
    EXPECT_EQ(kind_of([] { read_trace("/nonexistent/obcache/trace.obct"); }), ErrorKind::Io);
}

TEST(Trace, F32ScoresTrackF64) {
    const fs::path dir = scratch_dir();
    GenTraceRequest req;
    req.layers = 1;
    req.kv_heads = 1;
    req.q_heads = 2;
    req.d = 16;
    req.prompt_len = 48;
    req.seed = 23;
    write_trace(dir / "f64.obct", gen_trace(req));
    req.precision = Precision::F32;
    write_trace(dir / "f32.obct", gen_trace(req));

    ScoreRequest sr;
    sr.trace = dir / "f64.obct";
    const auto wide = run_score(sr);
    sr.trace = dir / "f32.obct";
    const auto narrow = run_score(sr);
    ASSERT_EQ(wide.size(), narrow.size());

    auto check = [&](auto field) {
        double peak = 0.0;
        for (const auto& r : wide) {
            peak = std::max(peak, std::fabs(field(r)));
        }
        for (std::size_t i = 0; i < wide.size(); ++i) {
            EXPECT_LE(std::fabs(field(narrow[i]) - field(wide[i])), 1e-4 * peak) << "row " << i;
        }
    };
    check([](const ScoreRow& r) { return r.value; });
    check([](const ScoreRow& r) { return r.key; });
    check([](const ScoreRow& r) { return r.joint; });
    check([](const ScoreRow& r) { return r.attn_l1; });
}

TEST(Trace, DocumentedExampleFile) {
    const Trace t = read_trace(fs::path(OBCACHE_SOURCE_DIR) / "docs" / "example.obct");
    EXPECT_EQ(t.header.precision, Precision::F32);
    EXPECT_EQ(t.header.extras.at("seed"), "1");
    GenTraceRequest req;
    req.d = 2;
    req.prompt_len = 2;
    req.seed = 1;
    req.precision = Precision::F32;
    EXPECT_EQ(encode_trace(t), encode_trace(gen_trace(req)));
    EXPECT_EQ(t.query(0, 0)(0, 0), static_cast<double>(-0.3316144645214081f));
    EXPECT_EQ(t.value(0, 0)(1, 1), static_cast<double>(1.479904294013977f));
}

TEST(CounterRng, MatchesDocumentedFormulas) {
    // Transcribed from the generator description in docs/trace_format.md.
    auto mix = [](std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    };
    const std::uint64_t seed = 1;
    const std::uint64_t stream = 1000;
    const std::uint64_t key = mix(seed ^ mix(stream));
    auto uniform = [&](std::uint64_t n) {
        return static_cast<double>(mix(key + n * 0x9E3779B97F4A7C15ULL) >> 11) * 0x1.0p-53;
    };
    const Matrix m = gaussian_matrix(2, 2, seed, stream);
    for (std::uint64_t i = 0; i < 4; ++i) {
        const double u1 = 1.0 - uniform(2 * i);
        const double u2 = uniform(2 * i + 1);
        const double want = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        EXPECT_EQ(m.data()[i], want) << "draw " << i;
    }
}
