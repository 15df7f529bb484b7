// Copyright (C) 2026 The obcache Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "obcache/cache.hpp"
#include "obcache/oracle.hpp"
#include "obcache/saliency.hpp"
#include "test_support.hpp"

using namespace obcache;
using namespace obcache::testing;

namespace {

struct LoopScores {
    std::vector<double> value, key, cross, attn;
};

// Direct per-position transcription of the four score formulas.
LoopScores loop_scores(const AttentionInstance& inst, std::size_t w) {
    const std::size_t s = inst.seq_len();
    const std::size_t d = inst.head_dim();
    LoopScores out{std::vector<double>(s), std::vector<double>(s), std::vector<double>(s), std::vector<double>(s)};
    for (std::size_t p = 0; p < s; ++p) {
        double vv = 0.0;
        for (std::size_t t = 0; t < d; ++t) {
            vv += inst.v(p, t) * inst.v(p, t);
        }
        for (std::size_t i = w - 1; i < inst.q_len(); ++i) {
            const double a = inst.a(i, p);
            if (a == 0.0) {
                continue;
            }
            const double z = inst.z(i, p);
            double dev = 0.0;
            double vo = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                dev += (inst.v(p, t) - inst.o(i, t)) * (inst.v(p, t) - inst.o(i, t));
                vo += inst.v(p, t) * inst.o(i, t);
            }
            out.value[p] += a * a * vv;
            out.key[p] += a * a * z * z * dev;
            out.cross[p] += 2.0 * a * a * z * (vv - vo);
            out.attn[p] += std::fabs(a);
        }
    }
    return out;
}

}  // namespace

TEST(ScoreValue, SingleToken) {
    const auto inst = make_instance(Matrix{{1, 0}}, Matrix{{0, 1}}, Matrix{{3, 4}});
    const auto sv = score_value(inst, 1);
    ASSERT_EQ(sv.size(), 1u);
    EXPECT_DOUBLE_EQ(sv[0], 25.0);
    EXPECT_EQ(sv.scorer, ScorerKind::Value);
    EXPECT_EQ(sv.window_start, 1u);
}

TEST(ScoreValue, ZeroValueRowScoresZero) {
    auto inst = random_instance(6, 3, 6, 1);
    for (double& x : inst.v.row(2)) {
        x = 0.0;
    }
    inst = make_instance(inst.q, inst.k, inst.v);
    EXPECT_EQ(score_value(inst, 1)[2], 0.0);
}

TEST(ScoreValue, EqualsZeroRowOracleSeed5) {
    const auto inst = random_instance(12, 4, 6, 5);
    const auto sv = score_value(inst, 1);
    for (std::size_t p = 0; p < 12; ++p) {
        const double exact = exact_eviction_error(inst, p, {PruneKind::Value, PruneSemantics::ZeroRow}, 1);
        EXPECT_LT(rel_err(sv[p], exact), 1e-9) << "p=" << p;
    }
}

TEST(ScoreKey, SingleTokenIsZero) {
    const auto inst = make_instance(Matrix{{1, 2}}, Matrix{{2, 1}}, Matrix{{3, 4}});
    EXPECT_EQ(score_key(inst, 1)[0], 0.0);
}

TEST(ScoreKey, IdenticalValuesScoreZero) {
    auto inst = random_instance(7, 3, 7, 2);
    for (std::size_t j = 0; j < 7; ++j) {
        inst.v(j, 0) = 1.5;
        inst.v(j, 1) = -0.5;
        inst.v(j, 2) = 2.0;
    }
    inst = make_instance(inst.q, inst.k, inst.v);
    for (double x : score_key(inst, 1).scores) {
        EXPECT_NEAR(x, 0.0, 1e-24);
    }
}

TEST(ScoreKey, FiniteDifferenceSeed9) {
    const auto inst = random_instance(10, 4, 10, 9);
    const std::vector<double> eps{1e-3, 1e-4};
    const auto pts = taylor_residual(inst, 3, {PruneKind::Key, PruneSemantics::ZeroRow}, 1, eps);
    const double lhs = pts[0].loss / (eps[0] * eps[0]);
    const double rhs = pts[1].loss / (eps[1] * eps[1]);
    EXPECT_LT(std::fabs(lhs / rhs - 1.0), 0.05);
    EXPECT_NEAR(rhs, score_key(inst, 1)[3], 0.05 * score_key(inst, 1)[3]);
}

TEST(ScoreJoint, MatchesValueWhenDeviationVanishes) {
    auto inst = random_instance(5, 2, 5, 4);
    for (std::size_t j = 0; j < 5; ++j) {
        inst.v(j, 0) = 0.25;
        inst.v(j, 1) = -1.0;
    }
    inst = make_instance(inst.q, inst.k, inst.v);
    const auto joint = score_joint(inst, 1);
    const auto value = score_value(inst, 1);
    for (std::size_t p = 0; p < 5; ++p) {
        EXPECT_NEAR(joint[p], value[p], 1e-12 * value[p]);
    }

    const auto single = make_instance(Matrix{{1, 0}}, Matrix{{0, 1}}, Matrix{{3, 4}});
    EXPECT_DOUBLE_EQ(score_joint(single, 1)[0], score_value(single, 1)[0]);
}

TEST(ScoreJoint, FiniteDifferenceSeed13) {
    const auto inst = random_instance(10, 4, 10, 13);
    const std::vector<double> eps{1e-3, 1e-4};
    const auto pts = taylor_residual(inst, 2, {PruneKind::Joint, PruneSemantics::ZeroRow}, 1, eps);
    const double lhs = pts[0].loss / (eps[0] * eps[0]);
    const double rhs = pts[1].loss / (eps[1] * eps[1]);
    EXPECT_LT(std::fabs(lhs / rhs - 1.0), 0.05);
    EXPECT_NEAR(rhs, score_joint(inst, 1)[2], 0.05 * score_joint(inst, 1)[2]);
}

TEST(ScoreJoint, TermsResumAndMatchLoops) {
    for (unsigned seed = 0; seed < 50; ++seed) {
        const std::size_t s = 3 + seed % 9;
        const auto inst = random_instance(s, 1 + seed % 5, std::min<std::size_t>(s, 2 + seed % 7), seed);
        for (std::size_t w = 1; w <= inst.q_len(); ++w) {
            const auto terms = joint_terms(inst, w);
            const auto loops = loop_scores(inst, w);
            const auto joint = score_joint(inst, w);
            for (std::size_t p = 0; p < inst.seq_len(); ++p) {
                EXPECT_NEAR(terms.cross[p] + terms.value[p] + terms.key[p], terms.total[p], 1e-12);
                EXPECT_EQ(terms.total[p], joint[p]);
                const double scale = 1.0 + loops.value[p] + loops.key[p] + std::fabs(loops.cross[p]);
                EXPECT_NEAR(terms.value[p], loops.value[p], 1e-12 * scale);
                EXPECT_NEAR(terms.key[p], loops.key[p], 1e-12 * scale);
                EXPECT_NEAR(terms.cross[p], loops.cross[p], 1e-12 * scale);
            }
        }
    }
}

// value + cross + key = sum_i A^2 ||v_p + Z (v_p - o_i)||^2, so the joint score
// can only dip below zero through rounding, whatever the logits are.
TEST(ScoreJoint, IsASumOfSquares) {
    for (unsigned seed = 0; seed < 100; ++seed) {
        const auto inst = random_instance(16, 4, 16, seed, 3.0);
        const auto shifted = with_reconstructed_logits(inst);
        for (const auto* which : {&inst, &shifted}) {
            const auto terms = joint_terms(*which, 1);
            for (std::size_t p = 0; p < 16; ++p) {
                EXPECT_GE(terms.total[p], -1e-12 * (terms.value[p] + terms.key[p] + 1.0));
            }
        }
    }
}

TEST(ScoreJoint, ClampFlagFloorsAtZero) {
    const auto inst = random_instance(9, 3, 9, 3);
    const auto raw = score_joint(inst, 1, JointClamp::None);
    const auto clamped = score_joint(inst, 1, JointClamp::ClampNegative);
    for (std::size_t p = 0; p < 9; ++p) {
        EXPECT_EQ(clamped[p], std::max(0.0, raw[p]));
    }
}

TEST(ScoreAttnL1, LastRowIsFinalAttention) {
    const auto inst = random_instance(8, 3, 5, 17);
    const auto tova = score_attn_l1(inst, inst.q_len());
    for (std::size_t p = 0; p < 8; ++p) {
        EXPECT_EQ(tova[p], inst.a(4, p));
    }
}

TEST(ScoreAttnL1, UniformAttentionTwoRows) {
    const auto inst = make_instance(Matrix(3, 2), Matrix(4, 2, 1.0), Matrix(4, 2, 1.0), false);
    const auto sc = score_attn_l1(inst, 2);
    for (double x : sc.scores) {
        EXPECT_DOUBLE_EQ(x, 0.5);
    }
}

TEST(ScoreAttnL1, ColumnSumOracle) {
    const auto inst = random_instance(11, 4, 11, 23);
    const auto sc = score_attn_l1(inst, 1);
    const auto ref = column_l1(inst.a, 1);
    for (std::size_t p = 0; p < 11; ++p) {
        EXPECT_NEAR(sc[p], ref[p], 1e-12);
    }
}

TEST(Scorers, RejectOutOfRangeWindow) {
    const auto inst = random_instance(5, 2, 3, 1);
    for (auto kind : {ScorerKind::Value, ScorerKind::Key, ScorerKind::Joint, ScorerKind::AttnL1}) {
        EXPECT_EQ(kind_of([&] { score(inst, kind, 0); }), ErrorKind::Window);
        EXPECT_EQ(kind_of([&] { score(inst, kind, 4); }), ErrorKind::Window);
    }
}

TEST(Scorers, WindowMonotonicity) {
    for (unsigned seed = 0; seed < 30; ++seed) {
        const auto inst = random_instance(12, 3, 12, seed);
        for (auto kind : {ScorerKind::Value, ScorerKind::Key, ScorerKind::AttnL1}) {
            for (std::size_t w = 2; w <= 12; ++w) {
                const auto narrow = score(inst, kind, w);
                const auto wide = score(inst, kind, w - 1);
                for (std::size_t p = 0; p < 12; ++p) {
                    EXPECT_GE(wide[p], narrow[p]);
                    EXPECT_GE(narrow[p], 0.0);
                }
            }
        }
    }
}

TEST(Scorers, FirstOrderTermsVanish) {
    const auto inst = random_instance(10, 4, 10, 31);
    const std::vector<double> eps{1e-2, 1e-4};
    for (auto kind : {PruneKind::Value, PruneKind::Key, PruneKind::Joint}) {
        const auto pts = taylor_residual(inst, 4, {kind, PruneSemantics::ZeroRow}, 1, eps);
        const double coarse = pts[0].loss / eps[0];
        const double fine = pts[1].loss / eps[1];
        EXPECT_LT(fine, 0.02 * coarse);
    }
}

TEST(WindowStart, RowsToOneBasedStart) {
    EXPECT_EQ(window_start(64, 0), 1u);
    EXPECT_EQ(window_start(64, 64), 1u);
    EXPECT_EQ(window_start(64, 100), 1u);
    EXPECT_EQ(window_start(64, 1), 64u);
    EXPECT_EQ(window_start(64, 16), 49u);
}

TEST(ReconstructLogits, ReproducesAttention) {
    const auto inst = random_instance(9, 3, 6, 8);
    const Matrix z = reconstruct_logits(inst.a);
    const Matrix back = softmax_rows(z);
    for (std::size_t i = 0; i < 6; ++i) {
        double top = -1e300;
        for (std::size_t j = 0; j < 9; ++j) {
            EXPECT_NEAR(back(i, j), inst.a(i, j), 1e-12);
            EXPECT_EQ(is_masked(z(i, j)), inst.a(i, j) == 0.0);
            if (!is_masked(z(i, j))) {
                top = std::max(top, z(i, j));
            }
        }
        EXPECT_EQ(top, 0.0);
    }
}

TEST(AggregateGroup, Examples) {
    const auto inst = random_instance(6, 2, 6, 2);
    const auto v = score_value(inst, 1);
    const std::vector<SaliencyVector> one{v};
    EXPECT_EQ(aggregate_group(one, 1).scores, v.scores);

    const std::vector<SaliencyVector> two{v, v};
    const auto doubled = aggregate_group(two, 2);
    for (std::size_t p = 0; p < 6; ++p) {
        EXPECT_EQ(doubled[p], 2.0 * v[p]);
    }

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    std::vector<SaliencyVector> three(3, v);
    std::vector<double> sum(6, 0.0);
    for (auto& sv : three) {
        for (std::size_t p = 0; p < 6; ++p) {
            sv.scores[p] = dist(rng);
            sum[p] += sv.scores[p];
        }
    }
    const auto merged = aggregate_group(three, 3);
    for (std::size_t p = 0; p < 6; ++p) {
        EXPECT_NEAR(merged[p], sum[p], 1e-12);
    }
}

TEST(AggregateGroup, RejectsHeterogeneousInputs) {
    const auto inst = random_instance(6, 2, 6, 2);
    std::vector<SaliencyVector> mixed{score_value(inst, 1), score_key(inst, 1)};
    EXPECT_EQ(kind_of([&] { aggregate_group(mixed, 2); }), ErrorKind::Aggregation);
    std::vector<SaliencyVector> windows{score_value(inst, 1), score_value(inst, 2)};
    EXPECT_EQ(kind_of([&] { aggregate_group(windows, 2); }), ErrorKind::Aggregation);
    std::vector<SaliencyVector> short_list{score_value(inst, 1)};
    EXPECT_EQ(kind_of([&] { aggregate_group(short_list, 2); }), ErrorKind::Aggregation);
}

TEST(ScoreAccumulator, FirstStepAndZeroSteps) {
    ScoreAccumulator acc;
    SaliencyVector fresh{{1.0, 2.0, 3.0}, ScorerKind::Value, 1};
    const std::vector<Position> cached{0, 1, 2};
    acc.accumulate(fresh, cached);
    EXPECT_EQ(acc.snapshot(cached, ScorerKind::Value).scores, fresh.scores);
    EXPECT_EQ(acc.steps_seen(), 1u);

    SaliencyVector zeros{{0.0, 0.0, 0.0}, ScorerKind::Value, 1};
    acc.accumulate(zeros, cached);
    acc.accumulate(zeros, cached);
    EXPECT_EQ(acc.snapshot(cached, ScorerKind::Value).scores, fresh.scores);
    EXPECT_EQ(acc.steps_seen(), 3u);
}

TEST(ScoreAccumulator, ContractViolations) {
    ScoreAccumulator acc;
    SaliencyVector fresh{{1.0, 2.0}, ScorerKind::Value, 1};
    const std::vector<Position> cached{3, 5};
    const std::vector<Position> wrong_len{3};
    const std::vector<Position> unsorted{5, 3};
    const std::vector<Position> stranger{3, 9};
    EXPECT_EQ(kind_of([&] { acc.accumulate(fresh, wrong_len); }), ErrorKind::Accumulator);
    EXPECT_EQ(kind_of([&] { acc.accumulate(fresh, unsorted); }), ErrorKind::Accumulator);
    EXPECT_EQ(kind_of([&] { acc.accumulate(fresh, cached, stranger); }), ErrorKind::Accumulator);

    const std::vector<Position> kept{5};
    acc.accumulate(fresh, cached, kept);
    EXPECT_EQ(acc.running().size(), 1u);
    // position 3 was dropped and may not come back
    EXPECT_EQ(kind_of([&] { acc.accumulate(fresh, cached); }), ErrorKind::Accumulator);
}

TEST(ScoreAccumulator, ReplaySumSeed4) {
    std::mt19937_64 rng(4);
    const Matrix q = random_matrix(5, 3, rng);
    const Matrix k = random_matrix(5, 3, rng);
    const Matrix v = random_matrix(5, 3, rng);
    KvCache cache(3);
    ScoreAccumulator acc;
    std::vector<std::vector<double>> fresh_log;
    for (std::size_t t = 0; t < 5; ++t) {
        const auto step = decode_step(cache, q.row(t), k.row(t), v.row(t));
        const auto fresh = score_joint(instance_from_step(step, cache, default_scale(3)), 1);
        fresh_log.push_back(fresh.scores);
        acc.accumulate(fresh, cache.positions());
    }
    // replay: token p appears in every step from p on
    for (std::size_t p = 0; p < 5; ++p) {
        double sum = 0.0;
        for (std::size_t t = p; t < 5; ++t) {
            sum += fresh_log[t][p];
        }
        EXPECT_NEAR(acc.running().at(static_cast<Position>(p)), sum, 1e-12);
    }
    EXPECT_EQ(acc.steps_seen(), 5u);
}

TEST(ScorerNames, RoundTrip) {
    for (auto kind : {ScorerKind::Value, ScorerKind::Key, ScorerKind::Joint, ScorerKind::AttnL1}) {
        EXPECT_EQ(parse_scorer(to_string(kind)), kind);
    }
    EXPECT_FALSE(parse_scorer("l2").has_value());
}
