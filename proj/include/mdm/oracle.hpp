#pragma once

// Exact ground truth over tiny sequence spaces: explicit joint tables,
// brute-force conditionals, exact likelihoods, and table sampling. Everything
// else in the engine is verified against this module.

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdm/rng.hpp"
#include "mdm/types.hpp"

namespace mdm {

// Compensated (Kahan) summation; the 1e-12 normalization invariants need
// better than naive accumulation once tables approach the state cap.
class KahanSum {
public:
    void add(double x) {
        const double y = x - carry_;
        const double t = sum_ + y;
        carry_ = (t - sum_) - y;
        sum_ = t;
    }
    double value() const { return sum_; }

private:
    double sum_ = 0.0;
    double carry_ = 0.0;
};

constexpr std::size_t kDefaultStateCap = 1'000'000;

// K^L checked against the cap before any table is allocated.
inline std::size_t checked_state_count(int k, int l, std::size_t cap = kDefaultStateCap) {
    if (k < 2 || l < 1) {
        throw std::invalid_argument("state space: need K >= 2 and L >= 1");
    }
    std::size_t n = 1;
    for (int i = 0; i < l; ++i) {
        if (n > cap / static_cast<std::size_t>(k)) {
            throw CapacityError("state space K^L exceeds cap of " + std::to_string(cap) + " states");
        }
        n *= static_cast<std::size_t>(k);
    }
    return n;
}

// Explicit probability table over {0..K-1}^L, row-major over positions
// (position 0 is the most significant digit). Immutable after construction.
class TabularJoint {
public:
    TabularJoint(int k, int l, std::vector<double> probs, std::size_t state_cap = kDefaultStateCap)
        : k_(k), l_(l), probs_(std::move(probs)) {
        const std::size_t n = checked_state_count(k, l, state_cap);
        if (probs_.size() != n) {
            throw std::invalid_argument("TabularJoint: expected " + std::to_string(n) +
                                        " entries, got " + std::to_string(probs_.size()));
        }
        KahanSum total;
        for (double p : probs_) {
            if (!(p >= 0.0)) {
                throw std::invalid_argument("TabularJoint: entries must be nonnegative and finite");
            }
            total.add(p);
        }
        if (std::abs(total.value() - 1.0) > 1e-12) {
            throw std::invalid_argument("TabularJoint: entries sum to " +
                                        std::to_string(total.value()) + ", not 1 within 1e-12");
        }
        cdf_.resize(probs_.size());
        KahanSum run;
        for (std::size_t i = 0; i < probs_.size(); ++i) {
            run.add(probs_[i]);
            cdf_[i] = run.value();
        }
    }

    int K() const { return k_; }
    int L() const { return l_; }
    std::size_t num_states() const { return probs_.size(); }
    const std::vector<double>& probs() const { return probs_; }

    std::size_t encode(const Sequence& x) const {
        if (static_cast<int>(x.size()) != l_) {
            throw std::invalid_argument("TabularJoint::encode: wrong sequence length");
        }
        std::size_t idx = 0;
        for (Token t : x) {
            if (t < 0 || t >= k_) {
                throw std::invalid_argument("TabularJoint::encode: token outside alphabet");
            }
            idx = idx * static_cast<std::size_t>(k_) + static_cast<std::size_t>(t);
        }
        return idx;
    }

    Sequence decode(std::size_t idx) const {
        Sequence x(static_cast<std::size_t>(l_));
        for (int i = l_ - 1; i >= 0; --i) {
            x[static_cast<std::size_t>(i)] = static_cast<Token>(idx % static_cast<std::size_t>(k_));
            idx /= static_cast<std::size_t>(k_);
        }
        return x;
    }

    double prob(const Sequence& x) const { return probs_[encode(x)]; }

    // Marginal probability of a length-P prefix. Prefix-sharing sequences are
    // contiguous under row-major order, so this is one range sum.
    double prefix_marginal(const Sequence& prefix) const {
        const int p = static_cast<int>(prefix.size());
        if (p > l_) {
            throw std::invalid_argument("prefix_marginal: prefix longer than L");
        }
        if (p == 0) return 1.0;
        std::size_t lo = 0;
        for (Token t : prefix) {
            if (t < 0 || t >= k_) {
                throw std::invalid_argument("prefix_marginal: token outside alphabet");
            }
            lo = lo * static_cast<std::size_t>(k_) + static_cast<std::size_t>(t);
        }
        std::size_t span = 1;
        for (int i = 0; i < l_ - p; ++i) span *= static_cast<std::size_t>(k_);
        lo *= span;
        KahanSum s;
        for (std::size_t i = lo; i < lo + span; ++i) s.add(probs_[i]);
        return s.value();
    }

    const std::vector<double>& cdf() const { return cdf_; }

private:
    int k_;
    int l_;
    std::vector<double> probs_;
    std::vector<double> cdf_;
};

// Initial distribution + row-stochastic transition matrix; the generator of
// nontrivial small joints for tests and shipped fixtures.
struct BigramSource {
    int K = 0;
    std::vector<double> initial;     // K entries
    std::vector<double> transition;  // K*K, row-major

    double trans(int from, int to) const {
        return transition[static_cast<std::size_t>(from) * static_cast<std::size_t>(K) +
                          static_cast<std::size_t>(to)];
    }

    void validate() const {
        if (K < 2) {
            throw std::invalid_argument("BigramSource: K must be >= 2");
        }
        if (initial.size() != static_cast<std::size_t>(K) ||
            transition.size() != static_cast<std::size_t>(K) * static_cast<std::size_t>(K)) {
            throw std::invalid_argument("BigramSource: initial/transition shape mismatch");
        }
        KahanSum init_sum;
        for (double p : initial) {
            if (!(p >= 0.0)) throw std::invalid_argument("BigramSource: negative initial entry");
            init_sum.add(p);
        }
        if (std::abs(init_sum.value() - 1.0) > 1e-12) {
            throw std::invalid_argument("BigramSource: initial does not sum to 1 within 1e-12");
        }
        for (int r = 0; r < K; ++r) {
            KahanSum row;
            for (int c = 0; c < K; ++c) {
                const double p = trans(r, c);
                if (!(p >= 0.0)) throw std::invalid_argument("BigramSource: negative transition entry");
                row.add(p);
            }
            if (std::abs(row.value() - 1.0) > 1e-12) {
                throw std::invalid_argument("BigramSource: transition row " + std::to_string(r) +
                                            " does not sum to 1 within 1e-12");
            }
        }
    }
};

inline TabularJoint joint_from_bigram(const BigramSource& src, int l,
                                      std::size_t state_cap = kDefaultStateCap) {
    src.validate();
    const std::size_t n = checked_state_count(src.K, l, state_cap);
    std::vector<double> probs(n);
    // Walk indices in row-major order, maintaining the running chain product.
    Sequence x(static_cast<std::size_t>(l), 0);
    std::vector<double> partial(static_cast<std::size_t>(l));
    auto recompute_from = [&](int pos) {
        for (int i = pos; i < l; ++i) {
            const double step = (i == 0) ? src.initial[static_cast<std::size_t>(x[0])]
                                         : src.trans(x[static_cast<std::size_t>(i - 1)],
                                                     x[static_cast<std::size_t>(i)]);
            partial[static_cast<std::size_t>(i)] =
                (i == 0 ? 1.0 : partial[static_cast<std::size_t>(i - 1)]) * step;
        }
    };
    recompute_from(0);
    for (std::size_t idx = 0;; ++idx) {
        probs[idx] = partial[static_cast<std::size_t>(l - 1)];
        int pos = l - 1;
        while (pos >= 0 && x[static_cast<std::size_t>(pos)] == src.K - 1) {
            x[static_cast<std::size_t>(pos)] = 0;
            --pos;
        }
        if (pos < 0) break;
        ++x[static_cast<std::size_t>(pos)];
        recompute_from(pos);
    }
    KahanSum total;
    for (double p : probs) total.add(p);
    const double s = total.value();
    if (!(s > 0.0)) {
        throw std::invalid_argument("joint_from_bigram: table has zero total mass");
    }
    for (double& p : probs) p /= s;
    return TabularJoint(src.K, l, std::move(probs), state_cap);
}

// p_data(x0^i | unmasked tokens of xt) for every masked position i, by
// enumerating all completions of the masked set. The result depends on xt
// only through its token/mask pattern; no noise level enters anywhere.
inline Prediction exact_conditional(const TabularJoint& joint, const MaskedSequence& xt) {
    if (xt.length() != joint.L()) {
        throw std::invalid_argument("exact_conditional: sequence length != joint L");
    }
    if (xt.mask_id != joint.K()) {
        throw std::invalid_argument("exact_conditional: mask id does not match joint vocabulary");
    }
    const int k = joint.K();
    const std::vector<int> masked = xt.masked_positions();
    const int m = static_cast<int>(masked.size());

    Prediction pred;
    if (m == 0) return pred;

    // Base index from unmasked tokens plus per-masked-position strides.
    std::size_t base = 0;
    std::vector<std::size_t> stride(static_cast<std::size_t>(m));
    {
        std::size_t place = 1;
        int next_masked = m - 1;
        for (int i = joint.L() - 1; i >= 0; --i) {
            if (xt.is_masked(i)) {
                stride[static_cast<std::size_t>(next_masked--)] = place;
            } else {
                const Token t = xt.tokens[static_cast<std::size_t>(i)];
                if (t < 0 || t >= k) {
                    throw std::invalid_argument("exact_conditional: token outside alphabet");
                }
                base += static_cast<std::size_t>(t) * place;
            }
            place *= static_cast<std::size_t>(k);
        }
    }

    std::vector<KahanSum> acc(static_cast<std::size_t>(m) * static_cast<std::size_t>(k));
    std::vector<int> assign(static_cast<std::size_t>(m), 0);
    std::size_t idx = base;
    const std::vector<double>& probs = joint.probs();
    for (;;) {
        const double p = probs[idx];
        if (p > 0.0) {
            for (int j = 0; j < m; ++j) {
                acc[static_cast<std::size_t>(j) * static_cast<std::size_t>(k) +
                    static_cast<std::size_t>(assign[static_cast<std::size_t>(j)])]
                    .add(p);
            }
        }
        int j = m - 1;
        while (j >= 0 && assign[static_cast<std::size_t>(j)] == k - 1) {
            idx -= stride[static_cast<std::size_t>(j)] * static_cast<std::size_t>(k - 1);
            assign[static_cast<std::size_t>(j)] = 0;
            --j;
        }
        if (j < 0) break;
        ++assign[static_cast<std::size_t>(j)];
        idx += stride[static_cast<std::size_t>(j)];
    }

    for (int j = 0; j < m; ++j) {
        KahanSum row_total;
        for (int v = 0; v < k; ++v) {
            row_total.add(acc[static_cast<std::size_t>(j) * static_cast<std::size_t>(k) +
                              static_cast<std::size_t>(v)]
                              .value());
        }
        const double total = row_total.value();
        if (!(total > 0.0)) {
            throw ZeroSupportError("exact_conditional: conditioning event has zero probability");
        }
        std::vector<double> row(static_cast<std::size_t>(k));
        for (int v = 0; v < k; ++v) {
            row[static_cast<std::size_t>(v)] =
                acc[static_cast<std::size_t>(j) * static_cast<std::size_t>(k) +
                    static_cast<std::size_t>(v)]
                    .value() /
                total;
        }
        pred.add(masked[static_cast<std::size_t>(j)], std::move(row));
    }
    return pred;
}

// Natural-log NLL of a full sequence under the table.
inline double exact_nll(const TabularJoint& joint, const Sequence& x0) {
    const double p = joint.prob(x0);
    if (!(p > 0.0)) {
        throw ZeroSupportError("exact_nll: sequence has zero probability");
    }
    return -std::log(p);
}

// -log p(response | prompt) where prompt is a prefix and response continues it.
inline double exact_conditional_nll(const TabularJoint& joint, const Sequence& response,
                                    const Sequence& prompt) {
    Sequence combined = prompt;
    combined.insert(combined.end(), response.begin(), response.end());
    const double den = joint.prefix_marginal(prompt);
    if (!(den > 0.0)) {
        throw ZeroSupportError("exact_conditional_nll: prompt prefix has zero probability");
    }
    const double num = joint.prefix_marginal(combined);
    if (!(num > 0.0)) {
        throw ZeroSupportError("exact_conditional_nll: continuation has zero probability");
    }
    return -std::log(num / den);
}

// Inverse-CDF draw over the flat table.
inline Sequence sample_joint(const TabularJoint& joint, Rng& rng) {
    const double u = rng.uniform();
    const std::vector<double>& cdf = joint.cdf();
    std::size_t lo = 0, hi = cdf.size();
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (cdf[mid] > u) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    if (lo == cdf.size()) {
        // u beyond the last partial sum (rounding); take the last positive-mass state.
        lo = cdf.size() - 1;
        while (lo > 0 && joint.probs()[lo] == 0.0) --lo;
    }
    return joint.decode(lo);
}

} // namespace mdm
