#pragma once

// Reverse-process generation: ancestral sampling (each masked position
// independently survives to the next time with probability s/t, otherwise is
// filled from the predictive distribution) and the deterministic
// confidence-greedy sampler that unmasks the top-l most confident positions
// on the schedule l = floor(L * (1 - s)).
//
// Both samplers accept an arbitrary partially-masked starting pattern: the
// unmasked positions act as the prompt, are never re-noised, and double as
// the guidance condition span. Prefix prompts are the common case and have
// convenience overloads.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mdm/guidance.hpp"
#include "mdm/model.hpp"
#include "mdm/rng.hpp"
#include "mdm/types.hpp"

namespace mdm {

enum class SamplerKind { ancestral, greedy };

inline std::string to_string(SamplerKind kind) {
    return kind == SamplerKind::ancestral ? "ancestral" : "greedy";
}

inline SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "ancestral") return SamplerKind::ancestral;
    if (s == "greedy") return SamplerKind::greedy;
    throw std::invalid_argument("unknown sampler mode: " + s);
}

struct SampleConfig {
    int steps = 1;
    int length = 0;
    GuidanceConfig guidance;
    std::uint64_t seed = 0;
    SamplerKind kind = SamplerKind::ancestral;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("SampleConfig: steps must be >= 1");
        if (length < 1) throw std::invalid_argument("SampleConfig: length must be >= 1");
        guidance.validate();
    }
};

struct SampleResult {
    Sequence tokens;
    int nfe = 0;         // model evaluations consumed
    double seconds = 0;  // wall clock, monotonic
};

namespace detail {

inline MaskedSequence initial_from_prompt(const Vocabulary& vocab, int length,
                                          const Sequence& prompt) {
    if (static_cast<int>(prompt.size()) >= length) {
        throw std::invalid_argument("sampler: prompt must be shorter than the sample length");
    }
    MaskedSequence init = fully_masked(vocab, length);
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        if (!vocab.valid_token(prompt[i])) {
            throw std::invalid_argument("sampler: prompt token outside alphabet");
        }
        init.tokens[i] = prompt[i];
    }
    return init;
}

inline Token draw_categorical(std::span<const double> probs, Rng& rng) {
    const double u = rng.uniform();
    double cum = 0.0;
    for (std::size_t v = 0; v < probs.size(); ++v) {
        cum += probs[v];
        if (u < cum) return static_cast<Token>(v);
    }
    return static_cast<Token>(probs.size() - 1);
}

} // namespace detail

// One reverse transition t -> s. Unmasked positions are copied; each masked
// position independently stays masked with probability s/t, otherwise it is
// filled from the (guided) predictive distribution.
//
// Fills within a step are drawn sequentially in index order, re-conditioning
// the model on tokens committed earlier in the same step. The per-position
// marginals are unchanged, but the joint over simultaneous fills becomes the
// chain-rule product, which makes the whole reverse pass reproduce the data
// distribution exactly for an exact model at any step count. Filling all
// chosen positions from one shared prediction would leave an independence
// error that only vanishes as steps grow.
//
// Draw protocol: one stay/fill uniform per masked position in index order,
// then one categorical draw per fill in index order. NFE counts one model
// evaluation per fill (doubled under CFG); a full run therefore costs one
// evaluation per generated token, which equals N_steps in the standard
// N_steps = L configuration.
inline MaskedSequence ancestral_step(const PredictiveModel& model, const MaskedSequence& xt,
                                     double t, double s, std::span<const int> condition_span,
                                     const GuidanceConfig& guidance, Rng& rng, int* nfe = nullptr) {
    if (!(0.0 <= s && s < t && t <= 1.0)) {
        throw std::invalid_argument("ancestral_step: need 0 <= s < t <= 1");
    }
    MaskedSequence xs = xt;
    const double stay_prob = s / t;
    std::vector<int> fill;
    for (int i = 0; i < xt.length(); ++i) {
        if (xt.is_masked(i) && !(rng.uniform() < stay_prob)) fill.push_back(i);
    }
    for (int i : fill) {
        const Prediction pred = guided_predict(model, xs, condition_span, guidance);
        if (nfe != nullptr) *nfe += guidance_calls(guidance);
        xs.tokens[static_cast<std::size_t>(i)] = detail::draw_categorical(pred.at(i), rng);
    }
    return xs;
}

// Full reverse pass over the uniform grid t = 1, (N-1)/N, ..., 1/N -> 0,
// starting from an arbitrary partially-masked pattern.
inline SampleResult ancestral_sample_from(const PredictiveModel& model, const SampleConfig& config,
                                          const MaskedSequence& initial, Rng& rng) {
    config.validate();
    if (initial.length() != model.L()) {
        throw std::invalid_argument("ancestral_sample: initial pattern length != model L");
    }
    const auto start = std::chrono::steady_clock::now();
    std::vector<int> condition;
    for (int i = 0; i < initial.length(); ++i) {
        if (!initial.is_masked(i)) condition.push_back(i);
    }
    MaskedSequence x = initial;
    SampleResult result;
    const int n = config.steps;
    for (int k = n; k >= 1; --k) {
        const double t = static_cast<double>(k) / static_cast<double>(n);
        const double s = static_cast<double>(k - 1) / static_cast<double>(n);
        x = ancestral_step(model, x, t, s, condition, config.guidance, rng, &result.nfe);
    }
    if (x.masked_count() != 0) {
        throw std::logic_error("ancestral_sample: masks remain after the final step");
    }
    result.tokens = x.tokens;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

inline SampleResult ancestral_sample(const PredictiveModel& model, const SampleConfig& config,
                                     const Sequence& prompt, Rng& rng) {
    config.validate();
    const Vocabulary vocab(model.K());
    return ancestral_sample_from(model, config,
                                 detail::initial_from_prompt(vocab, config.length, prompt), rng);
}

// Deterministic confidence-greedy sampler. Each step predicts every masked
// position, takes the argmax token and its probability as the confidence
// (ties to the lowest token id), and unmasks positions until
// floor(G * (1 - s)) of the generated region is revealed, preferring higher
// confidence and breaking ties by lowest position. Committed tokens are
// never altered. The schedule counts the generated region only; with a
// prompt, its positions would occupy top-l slots vacuously.
inline SampleResult greedy_sample_from(const PredictiveModel& model, const SampleConfig& config,
                                       const MaskedSequence& initial,
                                       std::vector<int>* unmasked_trace = nullptr) {
    config.validate();
    if (initial.length() != model.L()) {
        throw std::invalid_argument("greedy_sample: initial pattern length != model L");
    }
    const auto start = std::chrono::steady_clock::now();
    std::vector<int> condition;
    for (int i = 0; i < initial.length(); ++i) {
        if (!initial.is_masked(i)) condition.push_back(i);
    }
    const int gen_region = initial.masked_count();
    if (gen_region == 0) {
        throw std::invalid_argument("greedy_sample: nothing to generate");
    }

    MaskedSequence x = initial;
    SampleResult result;
    const int n = config.steps;
    int unmasked_gen = 0;
    for (int k = n; k >= 1; --k) {
        const Prediction pred = guided_predict(model, x, condition, config.guidance);
        result.nfe += guidance_calls(config.guidance);

        struct Candidate {
            double confidence;
            int position;
            Token token;
        };
        std::vector<Candidate> candidates;
        for (int i = 0; i < x.length(); ++i) {
            if (!x.is_masked(i)) continue;
            const std::vector<double>& row = pred.at(i);
            int best = 0;
            for (int v = 1; v < static_cast<int>(row.size()); ++v) {
                if (row[static_cast<std::size_t>(v)] > row[static_cast<std::size_t>(best)]) best = v;
            }
            candidates.push_back(
                Candidate{row[static_cast<std::size_t>(best)], i, static_cast<Token>(best)});
        }
        // l = floor(G * (1 - s)) with s = (k-1)/n, evaluated in exact integer
        // arithmetic: floor(G * (n - k + 1) / n).
        const int target = gen_region * (n - k + 1) / n;
        const int to_unmask = std::min(std::max(target - unmasked_gen, 0),
                                       static_cast<int>(candidates.size()));
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Candidate& a, const Candidate& b) {
                             if (a.confidence != b.confidence) return a.confidence > b.confidence;
                             return a.position < b.position;
                         });
        for (int j = 0; j < to_unmask; ++j) {
            x.tokens[static_cast<std::size_t>(candidates[static_cast<std::size_t>(j)].position)] =
                candidates[static_cast<std::size_t>(j)].token;
        }
        unmasked_gen += to_unmask;
        if (unmasked_trace != nullptr) unmasked_trace->push_back(unmasked_gen);
    }
    if (x.masked_count() != 0) {
        throw std::logic_error("greedy_sample: masks remain after the final step");
    }
    result.tokens = x.tokens;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

inline SampleResult greedy_sample(const PredictiveModel& model, const SampleConfig& config,
                                  const Sequence& prompt) {
    config.validate();
    const Vocabulary vocab(model.K());
    return greedy_sample_from(model, config,
                              detail::initial_from_prompt(vocab, config.length, prompt));
}

// Remove EOS padding. By default interior occurrences go too, since padding
// is modeled in-vocabulary and may be emitted mid-sequence at small scale;
// interior=false keeps only the trailing run removal.
inline Sequence strip_eos(const Sequence& x, Token eos_id, bool interior = true) {
    Sequence out;
    if (interior) {
        for (Token t : x) {
            if (t != eos_id) out.push_back(t);
        }
        return out;
    }
    std::size_t end = x.size();
    while (end > 0 && x[end - 1] == eos_id) --end;
    out.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

} // namespace mdm
