// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include "obcache/harness.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "obcache/error.hpp"
#include "obcache/saliency.hpp"

namespace obcache {

using json = nlohmann::json;

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    if (threads == 0) {
        threads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    }
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                    next = n;
                }
            }
        });
    }
    for (auto& worker : pool) {
        worker.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

std::string format_double(double x) {
    if (std::isnan(x)) {
        return "nan";
    }
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

namespace {

// 1-based ranks in selection order: higher score first, ties to the later
// position, NaN last.
std::vector<std::size_t> ranks_of(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double x = scores[a];
        const double y = scores[b];
        if (std::isnan(x) != std::isnan(y)) {
            return std::isnan(y);
        }
        if (!std::isnan(x) && x != y) {
            return x > y;
        }
        return a > b;
    });
    std::vector<std::size_t> rank(scores.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        rank[order[r]] = r + 1;
    }
    return rank;
}

struct ScoreBlock {
    std::size_t instance = 0;
    std::size_t layer = 0;
    std::size_t kv_head = 0;
    std::vector<AttentionInstance> heads;  // one per query head in the group
};

void emit_block(const ScoreBlock& block, std::size_t window_rows, std::vector<ScoreRow>& out) {
    const std::array kinds{ScorerKind::Value, ScorerKind::Key, ScorerKind::Joint, ScorerKind::AttnL1};
    std::array<SaliencyVector, 4> merged;
    for (std::size_t n = 0; n < kinds.size(); ++n) {
        std::vector<SaliencyVector> per_head;
        for (const auto& inst : block.heads) {
            per_head.push_back(score(inst, kinds[n], window_start(inst.q_len(), window_rows)));
        }
        merged[n] = aggregate_group(per_head, per_head.size());
    }
    const auto rank = ranks_of(merged[2].scores);
    for (std::size_t p = 0; p < rank.size(); ++p) {
        out.push_back({block.instance, block.layer, block.kv_head, p, merged[0][p], merged[1][p], merged[2][p],
                       merged[3][p], rank[p]});
    }
}

}  // namespace

std::vector<ScoreRow> run_score(const ScoreRequest& req) {
    std::vector<ScoreBlock> blocks;
    if (req.trace) {
        const Trace trace = read_trace(*req.trace);
        const auto& h = trace.header;
        const std::size_t rows = h.prompt_len > 0 ? h.prompt_len : h.seq_len();
        for (std::size_t l = 0; l < h.num_layers; ++l) {
            for (std::size_t g = 0; g < h.num_kv_heads; ++g) {
                ScoreBlock block{0, l, g, {}};
                for (std::size_t q = g * h.group_size(); q < (g + 1) * h.group_size(); ++q) {
                    block.heads.push_back(make_instance(trace.query(l, q).slice_rows(0, rows),
                                                        trace.key(l, g).slice_rows(0, rows),
                                                        trace.value(l, g).slice_rows(0, rows), true));
                }
                blocks.push_back(std::move(block));
            }
        }
    } else {
        if (req.instances == 0 || req.s == 0 || req.d == 0) {
            raise(ErrorKind::Config, "score needs positive instances, s and d");
        }
        for (std::size_t i = 0; i < req.instances; ++i) {
            blocks.push_back({i, 0, 0, {gen_random(req.s, req.d, req.s, req.seed + i)}});
        }
    }

    std::vector<std::vector<ScoreRow>> parts(blocks.size());
    parallel_for(blocks.size(), req.threads, [&](std::size_t b) { emit_block(blocks[b], req.window_rows, parts[b]); });
    std::vector<ScoreRow> rows;
    for (auto& part : parts) {
        rows.insert(rows.end(), part.begin(), part.end());
    }
    return rows;
}

std::string score_csv(const std::vector<ScoreRow>& rows) {
    std::string out = "instance,layer,kv_head,position,value,key,joint,attn_l1,rank\n";
    for (const auto& r : rows) {
        out += std::to_string(r.instance) + ',' + std::to_string(r.layer) + ',' + std::to_string(r.kv_head) + ',' +
               std::to_string(r.position) + ',' + format_double(r.value) + ',' + format_double(r.key) + ',' +
               format_double(r.joint) + ',' + format_double(r.attn_l1) + ',' + std::to_string(r.rank) + '\n';
    }
    return out;
}

// ---- oracle-recall -----------------------------------------------------------

bool is_known_recall_scorer(std::string_view name) {
    return parse_scorer(name).has_value() || name == "proxy_value" || name == "proxy_key" || name == "proxy_joint" ||
           name == "proxy_remove" || name == "oracle";
}

void OracleRecallRequest::validate() const {
    if (instances == 0 || s == 0 || d == 0) {
        raise(ErrorKind::Config, "oracle-recall needs positive instances, s and d");
    }
    if (k_list.empty() || scorers.empty() || window_rows.empty() || reserves.empty()) {
        raise(ErrorKind::Config, "oracle-recall grids must not be empty");
    }
    for (std::size_t k : k_list) {
        if (k == 0 || k > s) {
            raise(ErrorKind::Config, "k=" + std::to_string(k) + " outside [1, s]");
        }
        for (std::size_t r : reserves) {
            if (r > k) {
                raise(ErrorKind::Config, "recent reserve " + std::to_string(r) + " exceeds k=" + std::to_string(k));
            }
        }
    }
    for (const auto& name : scorers) {
        if (!is_known_recall_scorer(name)) {
            raise(ErrorKind::Config, "unknown scorer '" + name + "'");
        }
    }
    for (double eps : taylor_eps) {
        if (!(eps > 0.0 && eps < 1.0)) {
            raise(ErrorKind::Config, "taylor eps must lie in (0, 1)");
        }
    }
}

namespace {

std::vector<double> candidate_scores(const std::string& name, const NeedleInstance& ni, std::span<const double> truth,
                                     std::size_t w) {
    if (auto kind = parse_scorer(name)) {
        return score(ni.prefill, *kind, w).scores;
    }
    if (name == "oracle") {
        return {truth.begin(), truth.end()};
    }
    if (name == "proxy_remove") {
        return exact_eviction_errors(ni.prefill, {PruneKind::Joint, PruneSemantics::RemoveRow}, w);
    }
    const PruneKind kind = name == "proxy_value" ? PruneKind::Value
                           : name == "proxy_key" ? PruneKind::Key
                                                 : PruneKind::Joint;
    return exact_eviction_errors(ni.prefill, {kind, PruneSemantics::ZeroRow}, w);
}

double median_of(std::vector<double> xs) {
    if (xs.empty()) {
        return 0.0;
    }
    std::sort(xs.begin(), xs.end());
    const std::size_t m = xs.size() / 2;
    return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

}  // namespace

OracleRecallResult run_oracle_recall(const OracleRecallRequest& req) {
    req.validate();
    const std::size_t n = req.instances;

    struct PerInstance {
        std::vector<double> exact;
        std::vector<double> truth;
        std::vector<double> gaps;
        bool needle_is_argmax = false;
        std::vector<double> recalls;    // grid order
        std::vector<double> headline;   // scorer order
        std::vector<TaylorPoint> taylor;
    };
    std::vector<PerInstance> per(n);

    parallel_for(n, req.threads, [&](std::size_t i) {
        const NeedleInstance ni = gen_needle(default_needle_spec(req.seed + i, req.s, req.d));
        auto& out = per[i];
        out.truth = true_eviction_errors(ni.prefill, ni.next_query);
        out.exact = exact_eviction_errors(ni.prefill, {PruneKind::Joint, PruneSemantics::ZeroRow}, 1);
        const auto removed = exact_eviction_errors(ni.prefill, {PruneKind::Joint, PruneSemantics::RemoveRow}, 1);
        for (std::size_t p = 0; p < req.s; ++p) {
            out.gaps.push_back(std::fabs(removed[p] - out.exact[p]));
        }
        const auto top = std::max_element(out.truth.begin(), out.truth.end()) - out.truth.begin();
        out.needle_is_argmax = static_cast<std::size_t>(top) == ni.needle_pos;

        const std::size_t q_len = ni.prefill.q_len();
        for (const auto& name : req.scorers) {
            for (std::size_t rows : req.window_rows) {
                const auto cand = candidate_scores(name, ni, out.truth, window_start(q_len, rows));
                for (std::size_t k : req.k_list) {
                    for (std::size_t r : req.reserves) {
                        out.recalls.push_back(r == 0 ? topk_recall(out.truth, cand, k)
                                                     : topk_recall_reserved(out.truth, cand, k, r));
                    }
                }
            }
            const auto full = candidate_scores(name, ni, out.truth, 1);
            out.headline.push_back(topk_recall(out.truth, full, req.k_list.front()));
        }
        if (i == 0 && !req.taylor_eps.empty()) {
            out.taylor = taylor_residual(ni.prefill, ni.needle_pos, {PruneKind::Joint, PruneSemantics::ZeroRow}, 1,
                                         req.taylor_eps);
        }
    });

    OracleRecallResult result;
    auto& report = result.report;
    std::vector<double> all_gaps;
    std::size_t hits = 0;
    for (auto& inst : per) {
        report.exact_errors.push_back(std::move(inst.exact));
        report.true_errors.push_back(std::move(inst.truth));
        all_gaps.insert(all_gaps.end(), inst.gaps.begin(), inst.gaps.end());
        hits += inst.needle_is_argmax ? 1 : 0;
    }
    result.needle_argmax_rate = static_cast<double>(hits) / static_cast<double>(n);

    std::size_t slot = 0;
    for (std::size_t si = 0; si < req.scorers.size(); ++si) {
        for (std::size_t rows : req.window_rows) {
            for (std::size_t k : req.k_list) {
                for (std::size_t r : req.reserves) {
                    RecallEntry entry{req.scorers[si], rows, k, r, 0.0, {}};
                    for (const auto& inst : per) {
                        entry.per_instance.push_back(inst.recalls[slot]);
                    }
                    entry.mean_recall =
                        std::accumulate(entry.per_instance.begin(), entry.per_instance.end(), 0.0) / static_cast<double>(n);
                    report.grid.push_back(std::move(entry));
                    ++slot;
                }
            }
        }
        double sum = 0.0;
        for (const auto& inst : per) {
            sum += inst.headline[si];
        }
        report.recall_at_k[req.scorers[si]] = sum / static_cast<double>(n);
    }

    report.taylor_ratios = per.front().taylor;
    if (report.taylor_ratios.size() >= 2) {
        result.taylor_order = loss_order(report.taylor_ratios);
    }

    report.gap.count = all_gaps.size();
    if (!all_gaps.empty()) {
        report.gap.mean = std::accumulate(all_gaps.begin(), all_gaps.end(), 0.0) / static_cast<double>(all_gaps.size());
        report.gap.max = *std::max_element(all_gaps.begin(), all_gaps.end());
        report.gap.median = median_of(all_gaps);
    }
    return result;
}

json oracle_recall_json(const OracleRecallRequest& req, const OracleRecallResult& result) {
    const auto& report = result.report;
    json grid = json::array();
    for (const auto& e : report.grid) {
        grid.push_back({{"scorer", e.scorer},
                        {"window_rows", e.window_rows},
                        {"k", e.k},
                        {"recent_reserve", e.recent_reserve},
                        {"mean_recall", e.mean_recall},
                        {"per_instance", e.per_instance}});
    }
    json taylor = json::array();
    for (const auto& t : report.taylor_ratios) {
        taylor.push_back({{"eps", t.eps}, {"loss", t.loss}, {"ratio", t.ratio}});
    }
    return {{"schema_version", kReportSchemaVersion},
            {"command", "oracle-recall"},
            {"config",
             {{"instances", req.instances},
              {"seed", req.seed},
              {"s", req.s},
              {"d", req.d},
              {"k_list", req.k_list},
              {"scorers", req.scorers},
              {"window_rows", req.window_rows},
              {"reserves", req.reserves},
              {"taylor_eps", req.taylor_eps}}},
            {"needle_argmax_rate", result.needle_argmax_rate},
            {"recall_at_k", report.recall_at_k},
            {"grid", grid},
            {"taylor", {{"points", taylor}, {"order", result.taylor_order}}},
            {"gap",
             {{"mean", report.gap.mean},
              {"max", report.gap.max},
              {"median", report.gap.median},
              {"count", report.gap.count}}},
            {"exact_errors", report.exact_errors},
            {"true_errors", report.true_errors}};
}

// ---- simulate-decode -------------------------------------------------------------

void SimulateRequest::validate() const {
    workload.validate();
    if (budget == 0) {
        raise(ErrorKind::Config, "budget must be positive");
    }
}

SimulateResult run_simulate(const SimulateRequest& req) {
    req.validate();
    const DecodeTrace trace = req.identical ? gen_identical_trace(req.workload.steps, req.workload.d, req.workload.seed)
                                            : gen_decode_trace(req.workload);
    const PolicyConfig cfg = preset(req.preset, Phase::Decode, trace.steps(), req.budget, req.host);
    ScoreAccumulator acc;
    const auto log = decode_evict_loop(trace, cfg, acc);

    SimulateResult result;
    KvCache full(trace.head_dim());
    for (std::size_t t = 0; t < trace.steps(); ++t) {
        const DecodeStep reference = decode_step(full, trace.queries.row(t), trace.keys.row(t), trace.values.row(t));
        SimulateStep step;
        step.step = t;
        step.cache_len = log[t].retained.size();
        step.evicted = log[t].evicted;
        step.perturbation = std::sqrt(squared_distance(reference.o, log[t].output));
        result.total_evicted += step.evicted.size();
        result.max_perturbation = std::max(result.max_perturbation, step.perturbation);
        result.mean_perturbation += step.perturbation;
        result.steps.push_back(std::move(step));
    }
    if (!result.steps.empty()) {
        result.mean_perturbation /= static_cast<double>(result.steps.size());
    }
    return result;
}

std::string simulate_csv(const SimulateResult& result) {
    std::string out = "step,cache_len,evicted,perturbation\n";
    for (const auto& s : result.steps) {
        std::string evicted;
        for (std::size_t n = 0; n < s.evicted.size(); ++n) {
            evicted += (n ? ";" : "") + std::to_string(s.evicted[n]);
        }
        out += std::to_string(s.step) + ',' + std::to_string(s.cache_len) + ',' + evicted + ',' +
               format_double(s.perturbation) + '\n';
    }
    return out;
}

json simulate_json(const SimulateRequest& req, const SimulateResult& result) {
    return {{"schema_version", kReportSchemaVersion},
            {"command", "simulate-decode"},
            {"config",
             {{"preset", std::string(to_string(req.preset))},
              {"host", std::string(to_string(req.host))},
              {"budget", req.budget},
              {"steps", req.workload.steps},
              {"d", req.workload.d},
              {"seed", req.workload.seed},
              {"value_spread", req.workload.value_spread},
              {"key_salience", req.workload.key_salience},
              {"query_bias", req.workload.query_bias},
              {"identical", req.identical}}},
            {"summary",
             {{"mean_perturbation", result.mean_perturbation},
              {"max_perturbation", result.max_perturbation},
              {"total_evicted", result.total_evicted},
              {"final_cache_len", result.steps.empty() ? 0 : result.steps.back().cache_len}}}};
}

// ---- gen-trace -----------------------------------------------------------------

Trace gen_trace(const GenTraceRequest& req) {
    Trace trace;
    auto& h = trace.header;
    h.num_layers = req.layers;
    h.num_kv_heads = req.kv_heads;
    h.num_q_heads = req.q_heads;
    h.d = req.d;
    h.prompt_len = req.prompt_len;
    h.decode_len = req.decode_len;
    h.precision = req.precision;
    h.extras = {{"generator", "gaussian"}, {"seed", std::to_string(req.seed)}};
    h.validate();

    trace.tensors = trace_layout(h);
    for (std::size_t n = 0; n < trace.tensors.size(); ++n) {
        Matrix m = gaussian_matrix(h.seq_len(), h.d, req.seed, 1000 + n);
        if (h.precision == Precision::F32) {
            for (double& x : m.data()) {
                x = static_cast<double>(static_cast<float>(x));
            }
        }
        trace.tensors[n].data = std::move(m);
    }
    return trace;
}

}  // namespace obcache
