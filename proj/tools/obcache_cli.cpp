// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

// obcache command-line front end.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
// 4 data error (malformed trace, shape mismatch, numerical failure).

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "obcache/error.hpp"
#include "obcache/harness.hpp"

namespace fs = std::filesystem;
using namespace obcache;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitData = 4;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::Window:
        case ErrorKind::Metric:
        case ErrorKind::UnsupportedSemantics:
            return kExitConfig;
        case ErrorKind::Io:
            return kExitIo;
        default:
            return kExitData;
    }
}

fs::path resolve_out(const std::string& flag, const char* default_name) {
    if (!flag.empty()) {
        return flag;
    }
    const char* dir = std::getenv("OBCACHE_OUT_DIR");
    return fs::path(dir && *dir ? dir : ".") / default_name;
}

void require_writable_dir(const fs::path& file) {
    const fs::path dir = file.parent_path().empty() ? fs::path(".") : file.parent_path();
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) {
        raise(ErrorKind::Io, "output directory " + dir.string() + " does not exist");
    }
}

PresetName preset_from(const std::string& name) {
    auto p = parse_preset(name);
    if (!p) {
        raise(ErrorKind::Config, "unknown preset '" + name + "'");
    }
    return *p;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"obcache: KV-cache saliency scoring, oracle recall and decode eviction experiments"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML/INI file; keys are flat subcommand.option paths, flags override them");
    std::size_t threads = 0;
    app.add_option("--threads", threads, "Worker threads (0 = all cores)");

    // gen-trace
    GenTraceRequest gen;
    std::string gen_out;
    std::string gen_precision = "f64";
    auto* gen_cmd = app.add_subcommand("gen-trace", "Write a Gaussian Q/K/V trace container");
    gen_cmd->add_option("--out", gen_out, "Output path (default $OBCACHE_OUT_DIR/trace.obct)");
    gen_cmd->add_option("--layers", gen.layers, "Number of layers")->capture_default_str();
    gen_cmd->add_option("--kv-heads", gen.kv_heads, "KV heads per layer")->capture_default_str();
    gen_cmd->add_option("--q-heads", gen.q_heads, "Query heads per layer")->capture_default_str();
    gen_cmd->add_option("--d", gen.d, "Head dimension")->capture_default_str();
    gen_cmd->add_option("--prompt-len", gen.prompt_len, "Prompt rows")->capture_default_str();
    gen_cmd->add_option("--decode-len", gen.decode_len, "Decode rows")->capture_default_str();
    gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
    gen_cmd->add_option("--precision", gen_precision, "Stored precision")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();

    // score
    ScoreRequest score_req;
    std::string score_trace;
    std::string score_out;
    auto* score_cmd = app.add_subcommand("score", "Per-position value/key/joint/attn_l1 scores as CSV");
    score_cmd->add_option("--trace", score_trace, "Trace container to score (default: generated instances)");
    score_cmd->add_option("--instances", score_req.instances, "Generated instances")->capture_default_str();
    score_cmd->add_option("--seed", score_req.seed, "Base seed; instance i uses seed + i")->capture_default_str();
    score_cmd->add_option("--s", score_req.s, "Sequence length of generated instances")->capture_default_str();
    score_cmd->add_option("--d", score_req.d, "Head dimension of generated instances")->capture_default_str();
    score_cmd->add_option("--window-rows", score_req.window_rows, "Trailing query rows scored (0 = all)")
        ->capture_default_str();
    score_cmd->add_option("--out", score_out, "Output CSV (default $OBCACHE_OUT_DIR/score.csv)");

    // oracle-recall
    OracleRecallRequest recall_req;
    std::string recall_out;
    auto* recall_cmd = app.add_subcommand("oracle-recall", "Top-k recall of each scorer against the true decode error");
    recall_cmd->add_option("--instances", recall_req.instances, "Needle instances")->capture_default_str();
    recall_cmd->add_option("--seed", recall_req.seed, "Base seed; instance i uses seed + i")->capture_default_str();
    recall_cmd->add_option("--s", recall_req.s, "Sequence length")->capture_default_str();
    recall_cmd->add_option("--d", recall_req.d, "Head dimension")->capture_default_str();
    recall_cmd->add_option("--k", recall_req.k_list, "Top-k sizes")->delimiter(',')->capture_default_str();
    recall_cmd->add_option("--scorers", recall_req.scorers, "Scorers to evaluate")->delimiter(',')->capture_default_str();
    recall_cmd->add_option("--windows", recall_req.window_rows, "Window sizes in query rows (0 = full)")
        ->delimiter(',')
        ->capture_default_str();
    recall_cmd->add_option("--reserves", recall_req.reserves, "Recent-window reserves")->delimiter(',')->capture_default_str();
    recall_cmd->add_option("--taylor-eps", recall_req.taylor_eps, "Scaling steps for the Taylor check")
        ->delimiter(',')
        ->capture_default_str();
    recall_cmd->add_option("--out", recall_out, "Output JSON (default $OBCACHE_OUT_DIR/oracle_recall.json)");

    // simulate-decode
    SimulateRequest sim_req;
    std::string sim_preset = "h2o";
    std::string sim_host = "h2o";
    std::string sim_out;
    std::string sim_csv;
    auto* sim_cmd = app.add_subcommand("simulate-decode", "Decode with eviction and compare against a full cache");
    sim_cmd->add_option("--preset", sim_preset, "h2o|tova|obcache-value|obcache-key|obcache-joint")->capture_default_str();
    sim_cmd->add_option("--host", sim_host, "Baseline whose carve-outs an obcache-* preset borrows")->capture_default_str();
    sim_cmd->add_option("--budget", sim_req.budget, "Cache budget")->capture_default_str();
    sim_cmd->add_option("--steps", sim_req.workload.steps, "Decode steps")->capture_default_str();
    sim_cmd->add_option("--d", sim_req.workload.d, "Head dimension")->capture_default_str();
    sim_cmd->add_option("--seed", sim_req.workload.seed, "Workload seed")->capture_default_str();
    sim_cmd->add_option("--value-spread", sim_req.workload.value_spread, "Log-normal value magnitude spread")
        ->capture_default_str();
    sim_cmd->add_option("--key-salience", sim_req.workload.key_salience, "Persistent key salience")->capture_default_str();
    sim_cmd->add_option("--query-bias", sim_req.workload.query_bias, "Query lean on the salient direction")
        ->capture_default_str();
    sim_cmd->add_flag("--identical", sim_req.identical, "Repeat one (q, k, v) at every step");
    sim_cmd->add_option("--out", sim_out, "Output JSON (default $OBCACHE_OUT_DIR/simulate_decode.json)");
    sim_cmd->add_option("--csv", sim_csv, "Per-step CSV (default: the JSON path with a .csv extension)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }
    score_req.threads = threads;
    recall_req.threads = threads;

    try {
        if (*gen_cmd) {
            gen.precision = gen_precision == "f32" ? Precision::F32 : Precision::F64;
            const fs::path out = resolve_out(gen_out, "trace.obct");
            require_writable_dir(out);
            write_trace(out, gen_trace(gen));
        } else if (*score_cmd) {
            if (!score_trace.empty()) {
                score_req.trace = score_trace;
            }
            const fs::path out = resolve_out(score_out, "score.csv");
            require_writable_dir(out);
            write_file_atomic(out, score_csv(run_score(score_req)));
        } else if (*recall_cmd) {
            const fs::path out = resolve_out(recall_out, "oracle_recall.json");
            require_writable_dir(out);
            const auto result = run_oracle_recall(recall_req);
            write_file_atomic(out, oracle_recall_json(recall_req, result).dump(2) + "\n");
        } else if (*sim_cmd) {
            sim_req.preset = preset_from(sim_preset);
            sim_req.host = preset_from(sim_host);
            const fs::path out = resolve_out(sim_out, "simulate_decode.json");
            fs::path csv = sim_csv.empty() ? fs::path(out).replace_extension(".csv") : fs::path(sim_csv);
            require_writable_dir(out);
            require_writable_dir(csv);
            const auto result = run_simulate(sim_req);
            write_file_atomic(csv, simulate_csv(result));
            write_file_atomic(out, simulate_json(sim_req, result).dump(2) + "\n");
        }
    } catch (const Error& e) {
        std::cerr << "obcache: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "obcache: " << e.what() << '\n';
        return kExitData;
    }
    return 0;
}
