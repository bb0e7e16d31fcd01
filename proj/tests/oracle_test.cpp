#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "mdm/oracle.hpp"
#include "test_util.hpp"

using namespace mdm;
using namespace mdm::testutil;

TEST(TabularJoint, ValidatesMassAndShape) {
    EXPECT_NO_THROW(TabularJoint(2, 2, {0.25, 0.25, 0.25, 0.25}));
    EXPECT_THROW(TabularJoint(2, 2, {0.3, 0.3, 0.3, 0.3}), std::invalid_argument);
    EXPECT_THROW(TabularJoint(2, 2, {0.5, 0.5}), std::invalid_argument);
    EXPECT_THROW(TabularJoint(2, 2, {-0.5, 0.5, 0.5, 0.5}), std::invalid_argument);
}

TEST(TabularJoint, StateCapFailsFast) {
    EXPECT_THROW(checked_state_count(10, 7, 1000000), CapacityError);
    EXPECT_EQ(checked_state_count(10, 6, 1000000), 1000000u);
}

TEST(TabularJoint, EncodeDecodeRoundTrip) {
    const TabularJoint joint(3, 4, std::vector<double>(81, 1.0 / 81.0));
    for (std::size_t idx = 0; idx < joint.num_states(); ++idx) {
        EXPECT_EQ(joint.encode(joint.decode(idx)), idx);
    }
}

TEST(JointFromBigram, DeterministicChainConcentrates) {
    BigramSource src;
    src.K = 2;
    src.initial = {0.5, 0.5};
    src.transition = {1.0, 0.0, 0.0, 1.0};
    const TabularJoint joint = joint_from_bigram(src, 3);
    EXPECT_DOUBLE_EQ(joint.prob({0, 0, 0}), 0.5);
    EXPECT_DOUBLE_EQ(joint.prob({1, 1, 1}), 0.5);
    EXPECT_DOUBLE_EQ(joint.prob({0, 1, 0}), 0.0);
}

TEST(JointFromBigram, UniformTransitionGivesProductLaw) {
    BigramSource src;
    src.K = 2;
    src.initial = {0.5, 0.5};
    src.transition = {0.5, 0.5, 0.5, 0.5};
    const TabularJoint joint = joint_from_bigram(src, 2);
    for (std::size_t idx = 0; idx < 4; ++idx) {
        EXPECT_NEAR(joint.probs()[idx], 0.25, 1e-15);
    }
}

TEST(JointFromBigram, WorkedExampleEntry) {
    const TabularJoint joint = joint_from_bigram(example_bigram(), 2);
    EXPECT_NEAR(joint.prob({0, 0}), 0.63, 1e-15);
    EXPECT_NEAR(joint.prob({0, 1}), 0.07, 1e-15);
    EXPECT_NEAR(joint.prob({1, 0}), 0.06, 1e-15);
    EXPECT_NEAR(joint.prob({1, 1}), 0.24, 1e-15);
}

TEST(ExactConditional, TwoPointSupport) {
    // Uniform on {(0,0), (1,1)}: seeing a 1 pins the other position.
    const TabularJoint joint(2, 2, {0.5, 0.0, 0.0, 0.5});
    const Vocabulary vocab(2);
    MaskedSequence xt = apply_pattern(vocab, {0, 1}, 0b01);  // (m, 1)
    const Prediction pred = exact_conditional(joint, xt);
    ASSERT_EQ(pred.size(), 1u);
    EXPECT_DOUBLE_EQ(pred.at(0)[0], 0.0);
    EXPECT_DOUBLE_EQ(pred.at(0)[1], 1.0);
}

TEST(ExactConditional, FullyUnmaskedIsEmpty) {
    const TabularJoint joint(2, 2, {0.25, 0.25, 0.25, 0.25});
    const Vocabulary vocab(2);
    const Prediction pred = exact_conditional(joint, unmasked(vocab, {0, 1}));
    EXPECT_TRUE(pred.empty());
}

TEST(ExactConditional, FullyMaskedUniformJoint) {
    const TabularJoint joint(2, 2, {0.25, 0.25, 0.25, 0.25});
    const Vocabulary vocab(2);
    const Prediction pred = exact_conditional(joint, fully_masked(vocab, 2));
    ASSERT_EQ(pred.size(), 2u);
    for (int pos : {0, 1}) {
        EXPECT_NEAR(pred.at(pos)[0], 0.5, 1e-15);
        EXPECT_NEAR(pred.at(pos)[1], 0.5, 1e-15);
    }
}

TEST(ExactConditional, AgreesWithFilterEnumerationEverywhere) {
    // Bayes check over every mask pattern and every context, K<=3, L<=4.
    struct Case {
        int k;
        int l;
        std::uint64_t seed;
    };
    for (const Case c : {Case{2, 4, 1}, Case{3, 3, 2}, Case{3, 4, 3}}) {
        Rng rng(c.seed);
        const TabularJoint joint = joint_from_bigram(random_bigram(c.k, rng), c.l);
        const Vocabulary vocab(c.k);
        std::size_t ctx_count = 1;
        for (int i = 0; i < c.l; ++i) ctx_count *= static_cast<std::size_t>(c.k + 1);
        for (std::size_t ctx = 0; ctx < ctx_count; ++ctx) {
            // Digits over K+1 symbols; K means mask.
            MaskedSequence xt{Sequence(static_cast<std::size_t>(c.l)), vocab.mask_id()};
            std::size_t rem = ctx;
            for (int i = c.l - 1; i >= 0; --i) {
                xt.tokens[static_cast<std::size_t>(i)] =
                    static_cast<Token>(rem % static_cast<std::size_t>(c.k + 1));
                rem /= static_cast<std::size_t>(c.k + 1);
            }
            if (xt.masked_count() == 0) continue;
            const auto expected = conditional_by_filter(joint, xt);
            const Prediction pred = exact_conditional(joint, xt);
            ASSERT_EQ(pred.size(), expected.size());
            for (const auto& [pos, row] : expected) {
                for (int v = 0; v < c.k; ++v) {
                    EXPECT_NEAR(pred.at(pos)[static_cast<std::size_t>(v)],
                                row[static_cast<std::size_t>(v)], 1e-12);
                }
            }
        }
    }
}

TEST(ExactConditional, RowsSumToOne) {
    Rng rng(4);
    const TabularJoint joint = joint_from_bigram(random_bigram(3, rng), 4);
    const Vocabulary vocab(3);
    for (unsigned pattern = 1; pattern < 16; ++pattern) {
        const MaskedSequence xt = apply_pattern(vocab, {0, 1, 2, 0}, pattern);
        const Prediction pred = exact_conditional(joint, xt);
        for (std::size_t j = 0; j < pred.size(); ++j) {
            KahanSum sum;
            for (double p : pred.row(j)) sum.add(p);
            EXPECT_NEAR(sum.value(), 1.0, 1e-12);
        }
    }
}

TEST(ExactConditional, SamePatternAlwaysSameAnswer) {
    // The conditional depends on the token/mask pattern only; repeated calls
    // must agree bit for bit.
    Rng rng(9);
    const TabularJoint joint = joint_from_bigram(random_bigram(2, rng), 3);
    const Vocabulary vocab(2);
    const MaskedSequence xt = apply_pattern(vocab, {1, 0, 1}, 0b101);
    EXPECT_EQ(exact_conditional(joint, xt), exact_conditional(joint, xt));
}

TEST(ExactConditional, ZeroSupportConditioningThrows) {
    const TabularJoint joint(2, 2, {0.5, 0.0, 0.0, 0.5});
    const Vocabulary vocab(2);
    MaskedSequence xt = apply_pattern(vocab, {0, 1}, 0b10);  // (0, m) is fine
    EXPECT_NO_THROW(exact_conditional(joint, xt));
    // (0,1) itself has zero mass; condition on nothing consistent.
    const TabularJoint point(2, 2, {1.0, 0.0, 0.0, 0.0});
    MaskedSequence bad = apply_pattern(vocab, {1, 1}, 0b01);  // (m, 1): no support
    EXPECT_THROW(exact_conditional(point, bad), ZeroSupportError);
}

TEST(ExactNll, UniformAndPointMass) {
    const int k = 3, l = 3;
    const TabularJoint uniform(k, l, std::vector<double>(27, 1.0 / 27.0));
    EXPECT_NEAR(exact_nll(uniform, {0, 1, 2}), l * std::log(k), 1e-12);

    std::vector<double> point(27, 0.0);
    point[4] = 1.0;
    const TabularJoint pm(k, l, point);
    EXPECT_DOUBLE_EQ(exact_nll(pm, pm.decode(4)), 0.0);
    EXPECT_THROW(exact_nll(pm, pm.decode(5)), ZeroSupportError);
}

TEST(ExactNll, WorkedValue) {
    const TabularJoint joint = joint_from_bigram(example_bigram(), 2);
    EXPECT_NEAR(exact_nll(joint, {0, 0}), -std::log(0.63), 1e-12);
    EXPECT_NEAR(exact_nll(joint, {0, 0}), 0.46204, 5e-6);
}

TEST(ExactConditionalNll, EmptyPromptEqualsNll) {
    const TabularJoint joint = joint_from_bigram(example_bigram(), 2);
    for (const Sequence x0 : {Sequence{0, 0}, Sequence{1, 0}, Sequence{1, 1}}) {
        EXPECT_DOUBLE_EQ(exact_conditional_nll(joint, x0, {}), exact_nll(joint, x0));
    }
}

TEST(ExactConditionalNll, DeterministicChainForcedContinuation) {
    BigramSource src;
    src.K = 2;
    src.initial = {1.0, 0.0};
    src.transition = {0.0, 1.0, 1.0, 0.0};  // alternating chain from 0
    const TabularJoint joint = joint_from_bigram(src, 4);
    EXPECT_DOUBLE_EQ(exact_conditional_nll(joint, {1, 0, 1}, {0}), 0.0);
}

TEST(ExactConditionalNll, TransitionLookup) {
    const TabularJoint joint = joint_from_bigram(example_bigram(), 2);
    EXPECT_NEAR(exact_conditional_nll(joint, {0}, {0}), -std::log(0.9), 1e-12);
}

TEST(ExactConditionalNll, ZeroProbabilityPromptThrows) {
    const TabularJoint point(2, 2, {1.0, 0.0, 0.0, 0.0});
    EXPECT_THROW(exact_conditional_nll(point, {0}, {1}), ZeroSupportError);
}

TEST(SampleJoint, PointMassAlwaysReturnsIt) {
    std::vector<double> point(8, 0.0);
    point[5] = 1.0;
    const TabularJoint joint(2, 3, point);
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(sample_joint(joint, rng), joint.decode(5));
    }
}

TEST(SampleJoint, FairCoinFrequency) {
    const TabularJoint joint(2, 1, {0.5, 0.5});
    Rng rng(12);
    const int draws = 100000;
    int heads = 0;
    for (int i = 0; i < draws; ++i) {
        heads += sample_joint(joint, rng)[0];
    }
    const double sigma = std::sqrt(0.25 / draws);
    EXPECT_NEAR(static_cast<double>(heads) / draws, 0.5, 4.0 * sigma);
}

TEST(SampleJoint, EmpiricalTvMatchesTable) {
    Rng gen(21);
    const TabularJoint joint = joint_from_bigram(random_bigram(2, gen), 3);
    Rng rng(77);
    const int draws = 100000;
    std::vector<double> counts(joint.num_states(), 0.0);
    for (int i = 0; i < draws; ++i) {
        counts[joint.encode(sample_joint(joint, rng))] += 1.0;
    }
    for (double& c : counts) c /= draws;
    EXPECT_LT(tv_distance(counts, joint.probs()), 0.02);
}

TEST(PrefixMarginal, SumsContiguousBlock) {
    const TabularJoint joint = joint_from_bigram(example_bigram(), 3);
    EXPECT_NEAR(joint.prefix_marginal({0}), 0.7, 1e-12);
    EXPECT_NEAR(joint.prefix_marginal({0, 0}), 0.63, 1e-12);
    EXPECT_DOUBLE_EQ(joint.prefix_marginal({}), 1.0);
}
