#pragma once

// Likelihood evaluation (Monte-Carlo bound and exact chain rule),
// multiple-choice scoring, exact-match generation accuracy, mask padding for
// fixed-length models, and the synthetic reversal experiment.

#include <cmath>
#include <limits>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdm/guidance.hpp"
#include "mdm/model.hpp"
#include "mdm/rng.hpp"
#include "mdm/sampler.hpp"
#include "mdm/types.hpp"

namespace mdm {

enum class EvalMethod { mc_elbo, chain_rule };

inline std::string to_string(EvalMethod m) {
    return m == EvalMethod::mc_elbo ? "mc_elbo" : "chain_rule";
}

inline EvalMethod eval_method_from_string(const std::string& s) {
    if (s == "mc_elbo") return EvalMethod::mc_elbo;
    if (s == "chain_rule") return EvalMethod::chain_rule;
    throw std::invalid_argument("unknown eval method: " + s);
}

struct EvalConfig {
    EvalMethod method = EvalMethod::mc_elbo;
    int mc_samples = 128;  // Monte-Carlo draws per sequence
    std::optional<int> pad_to;
    GuidanceConfig guidance;
    LossMode mode = LossMode::uniform_count;

    void validate() const {
        if (mc_samples < 1) throw std::invalid_argument("EvalConfig: mc_samples must be >= 1");
        guidance.validate();
    }
};

struct MultipleChoiceItem {
    Sequence prompt;
    std::vector<Sequence> options;
    int gold = 0;

    void validate() const {
        if (options.size() < 2) {
            throw std::invalid_argument("MultipleChoiceItem: need at least 2 options");
        }
        if (gold < 0 || gold >= static_cast<int>(options.size())) {
            throw std::invalid_argument("MultipleChoiceItem: gold index out of range");
        }
    }
};

// Append mask tokens up to target_len. Appended positions carry no
// evaluation weight; scorers track the original length separately.
inline MaskedSequence pad_with_masks(const MaskedSequence& x, int target_len) {
    if (target_len < x.length()) {
        throw std::invalid_argument("pad_with_masks: target_len shorter than sequence");
    }
    MaskedSequence out = x;
    out.tokens.resize(static_cast<std::size_t>(target_len), x.mask_id);
    return out;
}

namespace detail {

// prompt + response laid out from position 0, mask-padded to the model
// length when pad_to requests it.
inline MaskedSequence eval_input(const PredictiveModel& model, const Sequence& prompt,
                                 const Sequence& response, const EvalConfig& config) {
    const Vocabulary vocab(model.K());
    const int p_len = static_cast<int>(prompt.size());
    const int r_len = static_cast<int>(response.size());
    if (r_len < 1) throw std::invalid_argument("evaluate: response must be non-empty");
    if (config.pad_to && *config.pad_to != model.L()) {
        throw std::invalid_argument("evaluate: pad_to must equal the model length " +
                                    std::to_string(model.L()));
    }
    if (p_len + r_len > model.L()) {
        throw std::invalid_argument("evaluate: prompt+response longer than model length");
    }
    if (p_len + r_len < model.L() && !config.pad_to) {
        throw std::invalid_argument(
            "evaluate: prompt+response shorter than model length; set pad_to to enable mask padding");
    }
    Sequence joined = prompt;
    joined.insert(joined.end(), response.begin(), response.end());
    MaskedSequence input = unmasked(vocab, joined);
    return pad_with_masks(input, model.L());
}

inline std::uint64_t token_hash(std::uint64_t h, const Sequence& x) {
    constexpr std::uint64_t kPrime = 0x100000001b3ULL;
    h = (h ^ 0x811c9dc5ULL) * kPrime;
    for (Token t : x) {
        h = (h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(t))) * kPrime;
    }
    return h;
}

} // namespace detail

struct ElboEstimate {
    double estimate = 0.0;   // log-likelihood lower bound (negated loss)
    double std_error = 0.0;
    std::int64_t floor_hits = 0;
};

// Monte-Carlo bound on log p(x0 | prompt): the masked objective applied with
// prompt positions frozen-unmasked and noise drawn over x0's positions only.
inline ElboEstimate mc_conditional_elbo(const PredictiveModel& model, const Sequence& prompt,
                                        const Sequence& x0, const EvalConfig& config, Rng& rng) {
    config.validate();
    const MaskedSequence clean = detail::eval_input(model, prompt, x0, config);
    const Vocabulary vocab(model.K());
    const int p_len = static_cast<int>(prompt.size());
    const int r_len = static_cast<int>(x0.size());
    const std::vector<int> condition = index_range(0, p_len);

    ElboEstimate out;
    double mean = 0.0, m2 = 0.0;
    for (int s = 0; s < config.mc_samples; ++s) {
        MaskedSequence xt = clean;
        std::vector<std::pair<int, Token>> targets;
        double weight = 0.0;
        if (config.mode == LossMode::uniform_t) {
            const double t = 1.0 - rng.uniform();
            for (int i = 0; i < r_len; ++i) {
                if (rng.uniform() < t) {
                    const int pos = p_len + i;
                    targets.emplace_back(pos, clean.tokens[static_cast<std::size_t>(pos)]);
                    xt.tokens[static_cast<std::size_t>(pos)] = vocab.mask_id();
                }
            }
            weight = targets.empty() ? 0.0 : 1.0 / t;
        } else {
            const int ell = 1 + rng.uniform_int(r_len);
            std::vector<int> order(static_cast<std::size_t>(r_len));
            for (int i = 0; i < r_len; ++i) order[static_cast<std::size_t>(i)] = i;
            for (int j = 0; j < ell; ++j) {
                const int swap_with = j + rng.uniform_int(r_len - j);
                std::swap(order[static_cast<std::size_t>(j)], order[static_cast<std::size_t>(swap_with)]);
            }
            for (int j = 0; j < ell; ++j) {
                const int pos = p_len + order[static_cast<std::size_t>(j)];
                targets.emplace_back(pos, clean.tokens[static_cast<std::size_t>(pos)]);
                xt.tokens[static_cast<std::size_t>(pos)] = vocab.mask_id();
            }
            std::sort(targets.begin(), targets.end());
            weight = static_cast<double>(r_len) / static_cast<double>(ell);
        }

        double term = 0.0;
        if (!targets.empty()) {
            const Prediction pred = guided_predict(model, xt, condition, config.guidance);
            double sum = 0.0;
            for (const auto& [pos, truth] : targets) {
                const double p = pred.at(pos)[static_cast<std::size_t>(truth)];
                if (p < kProbFloor) ++out.floor_hits;
                sum += -std::log(std::max(p, kProbFloor));
            }
            term = weight * sum;
        }
        const double delta = term - mean;
        mean += delta / static_cast<double>(s + 1);
        m2 += delta * (term - mean);
    }
    out.estimate = -mean;
    out.std_error = config.mc_samples > 1
                        ? std::sqrt(m2 / static_cast<double>(config.mc_samples - 1) /
                                    static_cast<double>(config.mc_samples))
                        : 0.0;
    return out;
}

// Exact chain-rule log-likelihood: sum_i log p(x0^i | prompt, x0^{<i}, rest
// masked). One model evaluation per response position; deterministic.
inline double chain_rule_ll(const PredictiveModel& model, const Sequence& prompt, const Sequence& x0,
                            const EvalConfig& config) {
    config.validate();
    const MaskedSequence clean = detail::eval_input(model, prompt, x0, config);
    const Vocabulary vocab(model.K());
    const int p_len = static_cast<int>(prompt.size());
    const int r_len = static_cast<int>(x0.size());
    const std::vector<int> condition = index_range(0, p_len);

    double ll = 0.0;
    for (int i = 0; i < r_len; ++i) {
        MaskedSequence xt = clean;
        for (int j = p_len + i; j < model.L(); ++j) {
            xt.tokens[static_cast<std::size_t>(j)] = vocab.mask_id();
        }
        const Prediction pred = guided_predict(model, xt, condition, config.guidance);
        const double p =
            pred.at(p_len + i)[static_cast<std::size_t>(x0[static_cast<std::size_t>(i)])];
        ll += std::log(std::max(p, kProbFloor));
    }
    return ll;
}

// Conditional log-likelihood of one option by the configured method. The MC
// path derives its stream from the option's content, so scores are invariant
// to option order.
inline double option_log_likelihood(const PredictiveModel& model, const Sequence& prompt,
                                    const Sequence& option, const EvalConfig& config,
                                    std::uint64_t seed) {
    if (config.method == EvalMethod::chain_rule) {
        return chain_rule_ll(model, prompt, option, config);
    }
    Rng rng(derive_seed(seed, detail::token_hash(detail::token_hash(7, prompt), option)));
    return mc_conditional_elbo(model, prompt, option, config, rng).estimate;
}

// Argmax option by conditional likelihood; ties go to the lowest index.
inline int score_multiple_choice(const PredictiveModel& model, const MultipleChoiceItem& item,
                                 const EvalConfig& config, std::uint64_t seed) {
    item.validate();
    int best = 0;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < static_cast<int>(item.options.size()); ++k) {
        const double ll = option_log_likelihood(model, item.prompt,
                                                item.options[static_cast<std::size_t>(k)], config, seed);
        if (ll > best_ll) {
            best_ll = ll;
            best = k;
        }
    }
    return best;
}

// Greedy-decode each prompt and count exact token matches after EOS
// stripping.
inline double exact_match(const PredictiveModel& model,
                          const std::vector<std::pair<Sequence, Sequence>>& pairs,
                          const SampleConfig& sampler_config, Token eos_id) {
    if (pairs.empty()) {
        throw std::invalid_argument("exact_match: empty evaluation set");
    }
    int hits = 0;
    for (const auto& [prompt, gold] : pairs) {
        const SampleResult res = greedy_sample(model, sampler_config, prompt);
        Sequence generated(res.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                           res.tokens.end());
        if (strip_eos(generated, eos_id) == gold) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

// --- Synthetic reversal experiment ---------------------------------------

struct ReversalConfig {
    int k = 6;          // data alphabet; the last id serves as the separator
    int name_len = 2;
    int desc_len = 2;
    int num_facts = 8;
    std::string model_kind = "tabular";  // "tabular" | "compact"
    int embed_dim = 8;                   // compact only
    int hidden_dim = 32;                 // compact only
    TrainConfig train;
    GuidanceConfig guidance;  // shipped configs use unsupervised, scale 0.8
    std::uint64_t seed = 0;

    void validate() const {
        if (k < 3) throw std::invalid_argument("ReversalConfig: need K >= 3 (facts + separator)");
        if (name_len < 1 || desc_len < 1) {
            throw std::invalid_argument("ReversalConfig: name/description lengths must be >= 1");
        }
        if (num_facts < 1) throw std::invalid_argument("ReversalConfig: num_facts must be >= 1");
        double space = 1.0;
        for (int i = 0; i < std::min(name_len, desc_len); ++i) space *= static_cast<double>(k - 1);
        if (static_cast<double>(num_facts) > space) {
            throw std::invalid_argument("ReversalConfig: more facts than distinct tuples");
        }
        guidance.validate();
    }
};

struct ReversalReport {
    int num_facts = 0;
    double forward_accuracy = 0.0;
    double reverse_accuracy = 0.0;
    double forward_chance = 0.0;  // (1/K)^desc_len
    double reverse_chance = 0.0;  // (1/K)^name_len
    double forward_z = 0.0;       // binomial-null z-score against chance
    double reverse_z = 0.0;
    double final_train_loss = 0.0;
};

namespace detail {

inline std::vector<Sequence> distinct_tuples(int count, int len, int alphabet, Rng& rng) {
    std::vector<Sequence> out;
    while (static_cast<int>(out.size()) < count) {
        Sequence t(static_cast<std::size_t>(len));
        for (int i = 0; i < len; ++i) t[static_cast<std::size_t>(i)] = rng.uniform_int(alphabet);
        if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    }
    return out;
}

inline double binomial_z(double acc, double chance, int n) {
    const double sigma = std::sqrt(chance * (1.0 - chance) / static_cast<double>(n));
    return (acc - chance) / sigma;
}

} // namespace detail

// Facts are serialized one direction only ("name SEP description"); the
// model is trained on that corpus and then queried in both directions by
// infilling the opposite region of the same layout.
inline ReversalReport reversal_experiment(const ReversalConfig& config) {
    config.validate();
    const Vocabulary vocab(config.k);
    const Token sep = config.k - 1;
    const int total_len = config.name_len + 1 + config.desc_len;

    Rng corpus_rng(derive_seed(config.seed, 0x7265765fULL));
    const std::vector<Sequence> names =
        detail::distinct_tuples(config.num_facts, config.name_len, config.k - 1, corpus_rng);
    const std::vector<Sequence> descs =
        detail::distinct_tuples(config.num_facts, config.desc_len, config.k - 1, corpus_rng);

    std::vector<Sequence> corpus;
    for (int f = 0; f < config.num_facts; ++f) {
        Sequence s = names[static_cast<std::size_t>(f)];
        s.push_back(sep);
        s.insert(s.end(), descs[static_cast<std::size_t>(f)].begin(),
                 descs[static_cast<std::size_t>(f)].end());
        corpus.push_back(std::move(s));
    }

    std::unique_ptr<TrainableModel> model;
    if (config.model_kind == "tabular") {
        model = std::make_unique<TabularModel>(config.k, total_len);
    } else if (config.model_kind == "compact") {
        model = std::make_unique<CompactModel>(config.k, total_len, config.embed_dim,
                                               config.hidden_dim, config.seed);
    } else {
        throw std::invalid_argument("ReversalConfig: unknown model kind " + config.model_kind);
    }

    TrainConfig tc = config.train;
    tc.seed = config.seed;
    Rng train_rng(derive_seed(config.seed, 0x7472665fULL));
    const TrainLog log = train(*model, sampler_from_dataset(corpus), tc, train_rng);

    SampleConfig sample_cfg;
    sample_cfg.guidance = config.guidance;
    sample_cfg.length = total_len;
    sample_cfg.kind = SamplerKind::greedy;

    int forward_hits = 0;
    int reverse_hits = 0;
    for (int f = 0; f < config.num_facts; ++f) {
        // Forward: mask the description region, keep "name SEP".
        MaskedSequence fwd = unmasked(vocab, corpus[static_cast<std::size_t>(f)]);
        for (int i = config.name_len + 1; i < total_len; ++i) {
            fwd.tokens[static_cast<std::size_t>(i)] = vocab.mask_id();
        }
        sample_cfg.steps = config.desc_len;
        SampleResult res = greedy_sample_from(*model, sample_cfg, fwd);
        Sequence got_desc(res.tokens.begin() + config.name_len + 1, res.tokens.end());
        if (got_desc == descs[static_cast<std::size_t>(f)]) ++forward_hits;

        // Reverse: mask the name region, keep "SEP description" in place.
        MaskedSequence rev = unmasked(vocab, corpus[static_cast<std::size_t>(f)]);
        for (int i = 0; i < config.name_len; ++i) {
            rev.tokens[static_cast<std::size_t>(i)] = vocab.mask_id();
        }
        sample_cfg.steps = config.name_len;
        res = greedy_sample_from(*model, sample_cfg, rev);
        Sequence got_name(res.tokens.begin(), res.tokens.begin() + config.name_len);
        if (got_name == names[static_cast<std::size_t>(f)]) ++reverse_hits;
    }

    ReversalReport report;
    report.num_facts = config.num_facts;
    report.forward_accuracy = static_cast<double>(forward_hits) / config.num_facts;
    report.reverse_accuracy = static_cast<double>(reverse_hits) / config.num_facts;
    report.forward_chance = std::pow(1.0 / config.k, config.desc_len);
    report.reverse_chance = std::pow(1.0 / config.k, config.name_len);
    report.forward_z = detail::binomial_z(report.forward_accuracy, report.forward_chance, config.num_facts);
    report.reverse_z = detail::binomial_z(report.reverse_accuracy, report.reverse_chance, config.num_facts);
    report.final_train_loss = log.rows.empty() ? 0.0 : log.rows.back().loss;
    return report;
}

} // namespace mdm
