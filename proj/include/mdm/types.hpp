#pragma once

// Core vocabulary/sequence types shared by every module.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdm {

using Token = std::int32_t;
using Sequence = std::vector<Token>;

// Conditioning on an event of probability zero, or querying the likelihood of
// a zero-probability sequence. Kept distinct from invalid_argument so tests
// and the CLI can tell "bad input shape" from "empty support".
class ZeroSupportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A brute-force structure would exceed its configured state cap.
class CapacityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Data alphabet {0..K-1} plus the reserved mask symbol. The mask id is fixed
// to K, one past the data alphabet, so data tokens stay contiguous.
class Vocabulary {
public:
    explicit Vocabulary(int k) : k_(k) {
        if (k < 2) {
            throw std::invalid_argument("Vocabulary: K must be >= 2, got " + std::to_string(k));
        }
    }

    int K() const { return k_; }
    Token mask_id() const { return k_; }

    bool valid_token(Token t) const { return t >= 0 && t < k_; }

    void require_sequence(const Sequence& x) const {
        if (x.empty()) {
            throw std::invalid_argument("Sequence: length must be >= 1");
        }
        for (Token t : x) {
            if (!valid_token(t)) {
                throw std::invalid_argument("Sequence: token " + std::to_string(t) +
                                            " outside alphabet [0," + std::to_string(k_) + ")");
            }
        }
    }

private:
    int k_;
};

// A sequence where some positions carry the mask symbol. The masked set is
// always derived from the tokens, so it cannot drift out of sync.
struct MaskedSequence {
    std::vector<Token> tokens;
    Token mask_id = -1;

    int length() const { return static_cast<int>(tokens.size()); }
    bool is_masked(int i) const { return tokens[static_cast<std::size_t>(i)] == mask_id; }

    std::vector<int> masked_positions() const {
        std::vector<int> out;
        for (int i = 0; i < length(); ++i) {
            if (is_masked(i)) out.push_back(i);
        }
        return out;
    }

    int masked_count() const {
        return static_cast<int>(std::count(tokens.begin(), tokens.end(), mask_id));
    }

    bool operator==(const MaskedSequence& other) const = default;
};

inline MaskedSequence fully_masked(const Vocabulary& vocab, int length) {
    if (length < 1) {
        throw std::invalid_argument("fully_masked: length must be >= 1");
    }
    return MaskedSequence{std::vector<Token>(static_cast<std::size_t>(length), vocab.mask_id()),
                          vocab.mask_id()};
}

inline MaskedSequence unmasked(const Vocabulary& vocab, const Sequence& x0) {
    vocab.require_sequence(x0);
    return MaskedSequence{x0, vocab.mask_id()};
}

// Per-masked-position categorical distributions over the K data tokens.
// Rows are stored in ascending position order.
class Prediction {
public:
    void add(int position, std::vector<double> probs) {
        if (!positions_.empty() && position <= positions_.back()) {
            throw std::invalid_argument("Prediction: positions must be added in ascending order");
        }
        positions_.push_back(position);
        rows_.push_back(std::move(probs));
    }

    bool empty() const { return positions_.empty(); }
    std::size_t size() const { return positions_.size(); }
    const std::vector<int>& positions() const { return positions_; }

    bool has(int position) const {
        return std::binary_search(positions_.begin(), positions_.end(), position);
    }

    const std::vector<double>& at(int position) const {
        auto it = std::lower_bound(positions_.begin(), positions_.end(), position);
        if (it == positions_.end() || *it != position) {
            throw std::invalid_argument("Prediction: no distribution at position " +
                                        std::to_string(position));
        }
        return rows_[static_cast<std::size_t>(it - positions_.begin())];
    }

    const std::vector<double>& row(std::size_t idx) const { return rows_[idx]; }

    bool operator==(const Prediction& other) const = default;

private:
    std::vector<int> positions_;
    std::vector<std::vector<double>> rows_;
};

} // namespace mdm
