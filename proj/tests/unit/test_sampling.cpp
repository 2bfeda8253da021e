#include "casal/sampling.hpp"

#include "support.hpp"

#include <algorithm>
#include <numeric>

namespace casal {
namespace {

using testing::random_weights;
using testing::tiny_config;

RowVec logits_for(const std::vector<double>& probs, double temperature) {
    RowVec l(static_cast<Eigen::Index>(probs.size()));
    for (std::size_t i = 0; i < probs.size(); ++i) l(static_cast<Eigen::Index>(i)) = temperature * std::log(probs[i]);
    return l;
}

/// Independent truncated categorical: sort, cut to k, cut to nucleus mass p, renormalize.
std::vector<double> oracle(const RowVec& logits, double t, double top_p, int top_k) {
    const auto V = static_cast<std::size_t>(logits.size());
    std::vector<double> p(V);
    double z = 0.0;
    for (std::size_t i = 0; i < V; ++i) z += (p[i] = std::exp(logits(static_cast<Eigen::Index>(i)) / t));
    for (auto& x : p) x /= z;
    std::vector<std::size_t> idx(V);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
    idx.resize(std::min<std::size_t>(V, static_cast<std::size_t>(top_k)));
    double mk = 0.0;
    for (auto i : idx) mk += p[i];
    std::size_t n = 0;
    for (double cum = 0.0; n < idx.size() && cum < top_p; ++n) cum += p[idx[n]] / mk;
    idx.resize(n);
    double m = 0.0;
    for (auto i : idx) m += p[i];
    std::vector<double> out(V, 0.0);
    for (auto i : idx) out[i] = p[i] / m;
    return out;
}

TEST(TruncatedDistribution, HandExample) {
    const RowVec l = logits_for({0.5, 0.25, 0.125, 0.125}, 0.7);
    SamplingConfig s{0.7, 0.7, 20, 4, 0};
    auto p = truncated_distribution(l, s);
    EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-12);
    EXPECT_EQ(p[2], 0.0);
    EXPECT_EQ(p[3], 0.0);
    s.top_p = 1.0;
    s.top_k = 2;
    p = truncated_distribution(l, s);
    EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-12);
    EXPECT_EQ(p[2], 0.0);
}

TEST(TruncatedDistribution, GreedyLimitsAndTies) {
    RowVec l(5);
    l << 0.1, 2.0, -1.0, 2.0, 0.5;
    for (const SamplingConfig& s : {SamplingConfig::greedy(), SamplingConfig{1.3, 0.9, 1, 4, 0}}) {
        const auto p = truncated_distribution(l, s);
        EXPECT_EQ(p[1], 1.0);
        EXPECT_EQ(std::accumulate(p.begin(), p.end(), 0.0), 1.0);
    }
}

TEST(TruncatedDistribution, TruncationNeverGrowsSupport) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        RowVec l(24);
        for (Eigen::Index i = 0; i < l.size(); ++i) l(i) = 2.0 * rng.normal();
        const SamplingConfig loose{0.9, 1.0, 0, 4, 0};
        const SamplingConfig tight{0.9, 0.1 + 0.8 * rng.uniform(), 1 + static_cast<int>(rng.below(24)), 4, 0};
        const auto a = truncated_distribution(l, loose), b = truncated_distribution(l, tight);
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i] == 0.0) EXPECT_EQ(b[i], 0.0);
        }
        EXPECT_NEAR(std::accumulate(b.begin(), b.end(), 0.0), 1.0, 1e-12);
        const auto o = oracle(l, tight.temperature, tight.top_p, tight.top_k);
        for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(b[i], o[i], 1e-12);
    }
}

TEST(TruncatedDistribution, RejectsBadInput) {
    RowVec l(3);
    l << 1.0, std::nan(""), 0.0;
    EXPECT_THROW(truncated_distribution(l, SamplingConfig{}), Error);
    RowVec ok = RowVec::Zero(3);
    EXPECT_THROW(truncated_distribution(ok, SamplingConfig{-1.0, 0.8, 20, 4, 0}), Error);
    EXPECT_THROW(truncated_distribution(ok, SamplingConfig{0.7, 0.0, 20, 4, 0}), Error);
}

TEST(SampleToken, EmpiricalFrequenciesWithinThreeSigma) {
    Rng setup(42);
    RowVec l(32);
    for (Eigen::Index i = 0; i < l.size(); ++i) l(i) = 1.5 * setup.normal();
    const SamplingConfig s{0.7, 0.8, 20, 1, 0};
    const auto p = oracle(l, s.temperature, s.top_p, s.top_k);
    constexpr int kDraws = 100000;
    std::vector<int> counts(32, 0);
    Rng rng(derive_seed(0, "sampling-test"));
    for (int i = 0; i < kDraws; ++i) ++counts[static_cast<std::size_t>(sample_token(l, s, rng))];
    int support = 0;
    for (std::size_t v = 0; v < p.size(); ++v) {
        if (p[v] == 0.0) {
            EXPECT_EQ(counts[v], 0) << "token " << v;
            continue;
        }
        ++support;
        const double sigma = std::sqrt(kDraws * p[v] * (1.0 - p[v]));
        EXPECT_LE(std::abs(counts[v] - kDraws * p[v]), 3.0 * sigma) << "token " << v;
    }
    EXPECT_GT(support, 1);
}

TEST(SampleCompletion, ZeroTemperatureIsGreedyDecoding) {
    const ModelConfig c = tiny_config();
    const TransformerWeights w = random_weights(c, 9);
    const Tokens prompt{0, 4, 7};
    Tokens greedy, seq = prompt;
    for (int i = 0; i < 4; ++i) {
        Eigen::Index best = 0;
        const RowVec last = forward(w, c, seq).logits.bottomRows(1);
        last.maxCoeff(&best);
        greedy.push_back(static_cast<TokenId>(best));
        seq.push_back(static_cast<TokenId>(best));
    }
    EXPECT_EQ(sample_completion(w, c, prompt, SamplingConfig::greedy(4)), greedy);
    EXPECT_EQ(sample_completion(w, c, prompt, SamplingConfig{1.5, 0.95, 1, 4, 123}), greedy);
}

TEST(SampleCompletion, StopsAtTerminalAndIsSeedDeterministic) {
    const ModelConfig c = tiny_config();
    const TransformerWeights w = random_weights(c, 10);
    const SamplingConfig s{1.0, 1.0, 0, 5, 77};
    const Tokens a = sample_completion(w, c, {0, 3}, s);
    EXPECT_EQ(a, sample_completion(w, c, {0, 3}, s));
    std::vector<TokenId> all(16);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(sample_completion(w, c, {0, 3}, s, all).size(), 1u);
}

TEST(SampleCompletion, CacheDoesNotChangeResults) {
    const ModelConfig c = tiny_config();
    const TransformerWeights w = random_weights(c, 11);
    const SamplingConfig s{0.7, 0.8, 20, 4, 0};
    LogitsCache cache;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng r1(seed), r2(seed);
        EXPECT_EQ(sample_completion(w, c, {0, 5}, s, r1, {}, nullptr, &cache),
                  sample_completion(w, c, {0, 5}, s, r2, {}, nullptr, nullptr));
    }
    EXPECT_GT(cache.size(), 0u);
}

TEST(Rng, DerivedSeedsAreStableAndDistinct) {
    EXPECT_EQ(derive_seed(7, "probe", "q1"), derive_seed(7, "probe", "q1"));
    EXPECT_NE(derive_seed(7, "probe", "q1"), derive_seed(7, "probe", "q2"));
    EXPECT_NE(derive_seed(7, "probe", "q1"), derive_seed(8, "probe", "q1"));
    Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng u(6);
    for (int i = 0; i < 1000; ++i) {
        const double x = u.uniform();
        EXPECT_GE(x, 0.0);
        EXPECT_LT(x, 1.0);
        EXPECT_LT(u.below(7), 7u);
    }
}

}  // namespace
}  // namespace casal
