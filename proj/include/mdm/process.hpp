#pragma once

// Forward absorbing-mask process: each position independently survives with
// probability alpha(t) = 1 - t, otherwise becomes the mask symbol.

#include <stdexcept>
#include <vector>

#include "mdm/rng.hpp"
#include "mdm/types.hpp"

namespace mdm {

// Survival probability of a token at noise level t. Schedule is fixed.
inline double alpha(double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::domain_error("alpha: noise level t must lie in [0,1]");
    }
    return 1.0 - t;
}

// Draw protocol: exactly one uniform variate per position, in index order,
// whether or not the position is frozen. Keeping the consumption pattern
// identical across the plain and frozen variants makes them seed-equivalent
// on the unfrozen positions.
inline MaskedSequence forward_mask_frozen(const Vocabulary& vocab, const Sequence& x0, double t,
                                          const std::vector<int>& frozen, Rng& rng) {
    vocab.require_sequence(x0);
    const double mask_prob = 1.0 - alpha(t);
    const int len = static_cast<int>(x0.size());

    std::vector<char> keep(static_cast<std::size_t>(len), 0);
    for (int i : frozen) {
        if (i < 0 || i >= len) {
            throw std::domain_error("forward_mask_frozen: frozen index out of range");
        }
        keep[static_cast<std::size_t>(i)] = 1;
    }

    MaskedSequence out{x0, vocab.mask_id()};
    for (int i = 0; i < len; ++i) {
        const double u = rng.uniform();
        if (!keep[static_cast<std::size_t>(i)] && u < mask_prob) {
            out.tokens[static_cast<std::size_t>(i)] = vocab.mask_id();
        }
    }
    return out;
}

inline MaskedSequence forward_mask(const Vocabulary& vocab, const Sequence& x0, double t, Rng& rng) {
    return forward_mask_frozen(vocab, x0, t, {}, rng);
}

} // namespace mdm
