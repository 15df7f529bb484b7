// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "obcache/oracle.hpp"
#include "obcache/policy.hpp"
#include "obcache/trace.hpp"
#include "obcache/workload.hpp"

namespace obcache {

inline constexpr int kReportSchemaVersion = 1;

// Runs fn(0..n-1) on up to `threads` workers (0 = hardware concurrency).
// Callers write into per-index slots, so results never depend on scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// Shortest round-trip decimal form; identical across runs and platforms.
std::string format_double(double x);

// ---- score -----------------------------------------------------------------

struct ScoreRequest {
    std::optional<std::filesystem::path> trace;  // when unset, random instances are generated
    std::size_t instances = 1;
    std::uint64_t seed = 7;
    std::size_t s = 16;
    std::size_t d = 8;
    std::size_t window_rows = 0;  // 0 = every query row
    std::size_t threads = 0;
};

struct ScoreRow {
    std::size_t instance = 0;
    std::size_t layer = 0;
    std::size_t kv_head = 0;
    std::size_t position = 0;
    double value = 0.0;
    double key = 0.0;
    double joint = 0.0;
    double attn_l1 = 0.0;
    std::size_t rank = 0;  // 1-based rank of the joint score inside its (instance, layer, kv_head) block
};

std::vector<ScoreRow> run_score(const ScoreRequest& req);
std::string score_csv(const std::vector<ScoreRow>& rows);

// ---- oracle-recall -----------------------------------------------------------

struct OracleRecallRequest {
    std::size_t instances = 100;
    std::uint64_t seed = 0;
    std::size_t s = 64;
    std::size_t d = 32;
    std::vector<std::size_t> k_list{4};
    std::vector<std::string> scorers{"value", "key", "joint", "attn_l1"};
    std::vector<std::size_t> window_rows{1, 4, 16, 64, 0};
    std::vector<std::size_t> reserves{0, 2};
    std::vector<double> taylor_eps{1e-2, 1e-3, 1e-4};
    std::size_t threads = 0;

    void validate() const;
};

struct OracleRecallResult {
    OracleReport report;
    double needle_argmax_rate = 0.0;
    double taylor_order = 0.0;
};

// Scorer names: value, key, joint, attn_l1 (Taylor scores), proxy_value,
// proxy_key, proxy_joint (exact zero-row errors), proxy_remove (exact
// removal error over the window) and oracle (the true decode error itself).
bool is_known_recall_scorer(std::string_view name);

OracleRecallResult run_oracle_recall(const OracleRecallRequest& req);
nlohmann::json oracle_recall_json(const OracleRecallRequest& req, const OracleRecallResult& result);

// ---- simulate-decode -----------------------------------------------------------

struct SimulateRequest {
    DecodeSpec workload;
    bool identical = false;  // replay one (q, k, v) at every step
    PresetName preset = PresetName::H2O;
    PresetName host = PresetName::H2O;
    std::size_t budget = 16;

    void validate() const;
};

struct SimulateStep {
    std::size_t step = 0;
    std::size_t cache_len = 0;  // after eviction
    std::vector<Position> evicted;
    double perturbation = 0.0;  // ||o_evicted - o_full||
};

struct SimulateResult {
    std::vector<SimulateStep> steps;
    double mean_perturbation = 0.0;
    double max_perturbation = 0.0;
    std::size_t total_evicted = 0;
};

SimulateResult run_simulate(const SimulateRequest& req);
std::string simulate_csv(const SimulateResult& result);
nlohmann::json simulate_json(const SimulateRequest& req, const SimulateResult& result);

// ---- gen-trace -----------------------------------------------------------------

struct GenTraceRequest {
    std::size_t layers = 1;
    std::size_t kv_heads = 1;
    std::size_t q_heads = 1;
    std::size_t d = 8;
    std::size_t prompt_len = 16;
    std::size_t decode_len = 0;
    std::uint64_t seed = 7;
    Precision precision = Precision::F64;
};

Trace gen_trace(const GenTraceRequest& req);

}  // namespace obcache
