#pragma once

// Classifier-free guidance: the log-space combiner
// normalize(p_cond^{1+w} / p_uncond^w), masked-condition construction for the
// unsupervised variant, and the guided prediction wrapper.
//
// Standard and unsupervised guidance share these mechanics; they differ only
// in which training recipe produced the model (prompt dropout vs pretraining
// alone), which callers record in run configuration.

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdm/model.hpp"
#include "mdm/types.hpp"

namespace mdm {

enum class GuidanceMode { none, standard, unsupervised };

inline std::string to_string(GuidanceMode mode) {
    switch (mode) {
        case GuidanceMode::none: return "none";
        case GuidanceMode::standard: return "standard";
        case GuidanceMode::unsupervised: return "unsupervised";
    }
    return "none";
}

inline GuidanceMode guidance_mode_from_string(const std::string& s) {
    if (s == "none") return GuidanceMode::none;
    if (s == "standard") return GuidanceMode::standard;
    if (s == "unsupervised") return GuidanceMode::unsupervised;
    throw std::invalid_argument("unknown guidance mode: " + s);
}

struct GuidanceConfig {
    GuidanceMode mode = GuidanceMode::none;
    double scale = 0.0;  // w

    bool active() const { return mode != GuidanceMode::none && scale != 0.0; }

    void validate() const {
        if (scale < 0.0) {
            throw std::invalid_argument("GuidanceConfig: scale must be >= 0");
        }
    }
};

// Per-position combiner. Inputs are floored at 1e-12 before the logs; the
// ratio form is unstable when the unconditional mass vanishes.
inline std::vector<double> combine(std::span<const double> p_cond, std::span<const double> p_uncond,
                                   double w) {
    if (p_cond.size() != p_uncond.size() || p_cond.empty()) {
        throw std::invalid_argument("combine: categorical size mismatch");
    }
    std::vector<double> out(p_cond.size());
    double max_log = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < p_cond.size(); ++v) {
        const double lc = std::log(std::max(p_cond[v], kProbFloor));
        const double lu = std::log(std::max(p_uncond[v], kProbFloor));
        out[v] = (1.0 + w) * lc - w * lu;
        max_log = std::max(max_log, out[v]);
    }
    double sum = 0.0;
    for (double& v : out) {
        v = std::exp(v - max_log);
        sum += v;
    }
    for (double& v : out) v /= sum;
    return out;
}

// The dummy condition: every position in the span replaced by the mask
// symbol. Idempotent.
inline MaskedSequence masked_condition_input(const MaskedSequence& xt,
                                             std::span<const int> condition_span) {
    MaskedSequence out = xt;
    for (int i : condition_span) {
        if (i < 0 || i >= xt.length()) {
            throw std::invalid_argument("masked_condition_input: span index out of bounds");
        }
        out.tokens[static_cast<std::size_t>(i)] = xt.mask_id;
    }
    return out;
}

inline std::vector<int> index_range(int begin, int end) {
    if (begin > end) throw std::invalid_argument("index_range: begin > end");
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(end - begin));
    for (int i = begin; i < end; ++i) out.push_back(i);
    return out;
}

// Model evaluations a guided prediction costs (the NFE multiplier).
inline int guidance_calls(const GuidanceConfig& cfg) { return cfg.active() ? 2 : 1; }

// Rescaled prediction on the masked positions of xt. With w = 0 or mode none
// this is bit-identical to a plain predict: no combine pass runs at all.
inline Prediction guided_predict(const PredictiveModel& model, const MaskedSequence& xt,
                                 std::span<const int> condition_span, const GuidanceConfig& cfg) {
    cfg.validate();
    for (int i : condition_span) {
        if (i < 0 || i >= xt.length()) {
            throw std::invalid_argument("guided_predict: condition index out of bounds");
        }
        if (xt.is_masked(i)) {
            throw std::invalid_argument("guided_predict: condition position " + std::to_string(i) +
                                        " is masked; it must carry the condition");
        }
    }
    if (!cfg.active()) {
        return model.predict(xt);
    }
    const Prediction cond = model.predict(xt);
    const Prediction uncond = model.predict(masked_condition_input(xt, condition_span));
    Prediction out;
    for (std::size_t j = 0; j < cond.size(); ++j) {
        const int pos = cond.positions()[j];
        out.add(pos, combine(cond.row(j), uncond.at(pos), cfg.scale));
    }
    return out;
}

} // namespace mdm
