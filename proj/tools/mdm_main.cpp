// Command-line front end for the masked-diffusion engine: train models on
// tabular joints or datasets, sample with the ancestral or greedy sampler,
// evaluate likelihoods / multiple choice / exact match, fit IsoFLOP scaling
// curves, run the oracle-vs-engine property suite, and run the synthetic
// reversal demo.
//
// Exit codes: 0 success, 1 user/config error, 2 internal invariant violation.
// Primary outputs are byte-reproducible from (config, seed); wall-clock
// timing lives in a ".meta.json" sidecar next to each primary output.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mdm/evaluate.hpp"
#include "mdm/guidance.hpp"
#include "mdm/io.hpp"
#include "mdm/model.hpp"
#include "mdm/oracle.hpp"
#include "mdm/sampler.hpp"
#include "mdm/scaling.hpp"

namespace {

using mdm::json;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// --- strict config parsing ---------------------------------------------------

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

void reject_unknown_keys(const json& obj, const std::vector<std::string>& allowed,
                         const std::string& context) {
    if (!obj.is_object()) throw UsageError(context + ": expected a JSON object");
    for (const auto& [key, value] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw UsageError(context + ": unknown key \"" + key + "\"");
        }
    }
}

const json& require_key(const json& obj, const std::string& key, const std::string& context) {
    if (!obj.contains(key)) {
        throw UsageError(context + ": missing required field \"" + key + "\"");
    }
    return obj.at(key);
}

template <typename T>
T get_as(const json& obj, const std::string& key, const std::string& context) {
    try {
        return require_key(obj, key, context).get<T>();
    } catch (const json::exception& e) {
        throw UsageError(context + "." + key + ": " + e.what());
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, const std::string& context, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw UsageError(context + "." + key + ": " + e.what());
    }
}

mdm::GuidanceConfig parse_guidance(const json& obj, const std::string& context) {
    reject_unknown_keys(obj, {"mode", "scale"}, context);
    mdm::GuidanceConfig cfg;
    cfg.mode = mdm::guidance_mode_from_string(get_as<std::string>(obj, "mode", context));
    cfg.scale = get_or<double>(obj, "scale", context, 0.0);
    cfg.validate();
    return cfg;
}

mdm::LossMode parse_estimator(const std::string& name) {
    if (name == "uniform_count") return mdm::LossMode::uniform_count;
    if (name == "uniform_t") return mdm::LossMode::uniform_t;
    throw UsageError("unknown estimator \"" + name + "\"");
}

// Accepts either an inline object or a path to a JSON file.
json inline_or_file(const json& value) {
    if (value.is_string()) return load_json_file(value.get<std::string>());
    return value;
}

// --- sidecar -----------------------------------------------------------------

std::string iso_timestamp() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&now));
    return buf;
}

void write_sidecar(const std::string& primary_path, const std::string& command, double seconds,
                   json extra = json::object()) {
    extra["command"] = command;
    extra["seconds"] = seconds;
    extra["timestamp"] = iso_timestamp();
    std::ofstream out(primary_path + ".meta.json");
    out << extra.dump(2) << "\n";
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// --- datasets ----------------------------------------------------------------

struct TrainDataset {
    std::vector<mdm::Sequence> sequences;                        // pretraining
    std::vector<std::pair<mdm::Sequence, mdm::Sequence>> pairs;  // sft
};

TrainDataset read_train_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open dataset " + path);
    TrainDataset out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw UsageError(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
        if (j.contains("tokens")) {
            out.sequences.push_back(j.at("tokens").get<mdm::Sequence>());
        } else if (j.contains("prompt") && j.contains("response")) {
            out.pairs.emplace_back(j.at("prompt").get<mdm::Sequence>(),
                                   j.at("response").get<mdm::Sequence>());
        } else if (j.contains("prompt")) {
            out.pairs.emplace_back(j.at("prompt").get<mdm::Sequence>(), mdm::Sequence{});
        } else {
            throw UsageError(path + " line " + std::to_string(line_no) +
                             ": need \"tokens\" or \"prompt\" (+\"response\")");
        }
    }
    return out;
}

// --- train -------------------------------------------------------------------

mdm::TrainConfig parse_train_block(const json& obj, const std::string& context) {
    reject_unknown_keys(obj,
                        {"steps", "batch_size", "learning_rate", "seed",
                         "variable_length_fraction", "l_max", "estimator", "prompt_dropout_prob"},
                        context);
    mdm::TrainConfig cfg;
    cfg.steps = get_as<int>(obj, "steps", context);
    cfg.batch_size = get_as<int>(obj, "batch_size", context);
    cfg.learning_rate = get_as<double>(obj, "learning_rate", context);
    cfg.seed = get_or<std::uint64_t>(obj, "seed", context, 0);
    cfg.variable_length_fraction = get_or<double>(obj, "variable_length_fraction", context, 0.0);
    cfg.l_max = get_or<int>(obj, "l_max", context, 0);
    cfg.mode = parse_estimator(get_or<std::string>(obj, "estimator", context, "uniform_count"));
    cfg.prompt_dropout_prob = get_or<double>(obj, "prompt_dropout_prob", context, 0.0);
    cfg.validate();
    return cfg;
}

std::unique_ptr<mdm::TrainableModel> build_model(const json& obj, std::uint64_t seed) {
    reject_unknown_keys(obj, {"kind", "K", "L", "embed_dim", "hidden_dim"}, "model");
    const std::string kind = get_as<std::string>(obj, "kind", "model");
    const int k = get_as<int>(obj, "K", "model");
    const int l = get_as<int>(obj, "L", "model");
    if (kind == "tabular") {
        return std::make_unique<mdm::TabularModel>(k, l);
    }
    if (kind == "compact") {
        return std::make_unique<mdm::CompactModel>(k, l, get_as<int>(obj, "embed_dim", "model"),
                                                   get_as<int>(obj, "hidden_dim", "model"), seed);
    }
    throw UsageError("model.kind: expected \"tabular\" or \"compact\", got \"" + kind + "\"");
}

int run_train(const std::string& config_path, const std::string& out_override,
              std::optional<std::uint64_t> seed_override) {
    const Stopwatch watch;
    const json config = load_json_file(config_path);
    reject_unknown_keys(config, {"model", "data", "train", "out"}, "config");

    mdm::TrainConfig tc = parse_train_block(require_key(config, "train", "config"), "train");
    if (seed_override) tc.seed = *seed_override;

    auto model = build_model(require_key(config, "model", "config"), tc.seed);

    const json& data = require_key(config, "data", "config");
    reject_unknown_keys(data, {"bigram", "joint", "dataset", "objective", "eos_id"}, "data");
    const std::string objective = get_or<std::string>(data, "objective", "data", "pretrain");

    std::string ckpt_path, log_path;
    if (!out_override.empty()) {
        ckpt_path = out_override + ".ckpt";
        log_path = out_override + ".log.csv";
    } else {
        const json& out = require_key(config, "out", "config");
        reject_unknown_keys(out, {"checkpoint", "log"}, "out");
        ckpt_path = get_as<std::string>(out, "checkpoint", "out");
        log_path = get_as<std::string>(out, "log", "out");
    }

    mdm::Rng rng(tc.seed);
    mdm::TrainLog log;
    if (objective == "sft") {
        if (!data.contains("dataset")) {
            throw UsageError("data: sft objective requires the field \"dataset\"");
        }
        const TrainDataset ds = read_train_jsonl(get_as<std::string>(data, "dataset", "data"));
        if (ds.pairs.empty()) {
            throw UsageError("data.dataset: sft objective needs prompt/response records");
        }
        const mdm::Token eos = get_or<mdm::Token>(data, "eos_id", "data", model->K() - 1);
        log = mdm::train_sft(*model, ds.pairs, tc, eos, rng);
    } else if (objective == "pretrain") {
        mdm::DataSampler sampler;
        if (data.contains("joint")) {
            auto joint = std::make_shared<mdm::TabularJoint>(
                mdm::joint_from_json(inline_or_file(data.at("joint"))));
            if (joint->L() != model->L() || joint->K() != model->K()) {
                throw UsageError("data.joint: K/L must match the model");
            }
            sampler = mdm::sampler_from_joint(std::move(joint));
        } else if (data.contains("bigram")) {
            const mdm::BigramSource src = mdm::bigram_from_json(inline_or_file(data.at("bigram")));
            if (src.K != model->K()) throw UsageError("data.bigram: K must match the model");
            auto joint =
                std::make_shared<mdm::TabularJoint>(mdm::joint_from_bigram(src, model->L()));
            sampler = mdm::sampler_from_joint(std::move(joint));
        } else if (data.contains("dataset")) {
            TrainDataset ds = read_train_jsonl(get_as<std::string>(data, "dataset", "data"));
            if (ds.sequences.empty()) {
                throw UsageError("data.dataset: pretraining needs \"tokens\" records");
            }
            sampler = mdm::sampler_from_dataset(std::move(ds.sequences));
        } else {
            throw UsageError("data: need one of \"joint\", \"bigram\", \"dataset\"");
        }
        log = mdm::train(*model, sampler, tc, rng);
    } else {
        throw UsageError("data.objective: expected \"pretrain\" or \"sft\"");
    }

    mdm::save_checkpoint(ckpt_path, *model, tc.seed);
    mdm::write_train_log_csv(log_path, log);
    write_sidecar(ckpt_path, "train", watch.seconds(),
                  json{{"estimator", log.estimator},
                       {"loss_normalization", log.loss_normalization},
                       {"final_loss", log.rows.empty() ? 0.0 : log.rows.back().loss},
                       {"log", log_path}});
    return 0;
}

// --- sample ------------------------------------------------------------------

int run_sample(const std::string& config_path, const std::string& checkpoint_path,
               const std::string& out_path, std::optional<std::uint64_t> seed_override) {
    const Stopwatch watch;
    const json config = load_json_file(config_path);
    reject_unknown_keys(config, {"sample", "prompts"}, "config");
    const json& s = require_key(config, "sample", "config");
    reject_unknown_keys(s, {"kind", "steps", "length", "count", "seed", "guidance"}, "sample");

    const auto model = mdm::load_checkpoint(checkpoint_path);
    mdm::SampleConfig sc;
    sc.kind = mdm::sampler_kind_from_string(get_as<std::string>(s, "kind", "sample"));
    sc.steps = get_as<int>(s, "steps", "sample");
    sc.length = get_or<int>(s, "length", "sample", model->L());
    sc.seed = get_or<std::uint64_t>(s, "seed", "sample", 0);
    if (seed_override) sc.seed = *seed_override;
    if (s.contains("guidance")) sc.guidance = parse_guidance(s.at("guidance"), "sample.guidance");
    sc.validate();
    if (sc.length != model->L()) {
        throw UsageError("sample.length: must equal the checkpoint model length " +
                         std::to_string(model->L()));
    }

    std::vector<mdm::Sequence> prompts;
    if (config.contains("prompts")) {
        const std::string prompts_path = config.at("prompts").get<std::string>();
        const TrainDataset ds = read_train_jsonl(prompts_path);
        for (const auto& [prompt, response] : ds.pairs) prompts.push_back(prompt);
        if (prompts.empty()) throw UsageError("prompts: " + prompts_path + " has no records");
    } else {
        prompts.assign(static_cast<std::size_t>(get_or<int>(s, "count", "sample", 1)), {});
    }

    std::ofstream out(out_path);
    if (!out) throw UsageError("cannot open output " + out_path);
    json timing_items = json::array();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        mdm::Rng rng(mdm::derive_seed(sc.seed, i));
        mdm::SampleResult res;
        if (sc.kind == mdm::SamplerKind::greedy) {
            res = mdm::greedy_sample(*model, sc, prompts[i]);
        } else {
            res = mdm::ancestral_sample(*model, sc, prompts[i], rng);
        }
        out << json{{"tokens", res.tokens}, {"nfe", res.nfe}}.dump() << "\n";
        timing_items.push_back(json{{"index", i}, {"seconds", res.seconds}});
    }
    write_sidecar(out_path, "sample", watch.seconds(), json{{"items", timing_items}});
    return 0;
}

// --- eval --------------------------------------------------------------------

int run_eval(const std::string& config_path, const std::string& checkpoint_path,
             const std::string& out_path, std::optional<std::uint64_t> seed_override) {
    const Stopwatch watch;
    const json config = load_json_file(config_path);
    reject_unknown_keys(config, {"eval", "dataset"}, "config");
    const json& e = require_key(config, "eval", "config");
    reject_unknown_keys(e,
                        {"method", "task", "mc_samples", "pad_to", "guidance", "estimator", "seed",
                         "sample_steps", "eos_id"},
                        "eval");

    const auto model = mdm::load_checkpoint(checkpoint_path);
    mdm::EvalConfig ec;
    ec.method = mdm::eval_method_from_string(get_or<std::string>(e, "method", "eval", "mc_elbo"));
    ec.mc_samples = get_or<int>(e, "mc_samples", "eval", 128);
    if (e.contains("pad_to")) ec.pad_to = e.at("pad_to").get<int>();
    if (e.contains("guidance")) ec.guidance = parse_guidance(e.at("guidance"), "eval.guidance");
    ec.mode = parse_estimator(get_or<std::string>(e, "estimator", "eval", "uniform_count"));
    ec.validate();
    std::uint64_t seed = get_or<std::uint64_t>(e, "seed", "eval", 0);
    if (seed_override) seed = *seed_override;
    const std::string task = get_or<std::string>(e, "task", "eval", "auto");

    const mdm::EvalDataset ds = mdm::read_eval_jsonl(get_as<std::string>(config, "dataset", "config"));
    if (ds.choice_items.empty() && ds.pairs.empty()) {
        throw UsageError("dataset: no evaluation records found");
    }

    json report;
    json items = json::array();
    if (!ds.choice_items.empty() && task != "exact_match") {
        int correct = 0;
        for (std::size_t i = 0; i < ds.choice_items.size(); ++i) {
            const mdm::MultipleChoiceItem& item = ds.choice_items[i];
            json lls = json::array();
            for (const mdm::Sequence& option : item.options) {
                lls.push_back(mdm::option_log_likelihood(*model, item.prompt, option, ec,
                                                         mdm::derive_seed(seed, i)));
            }
            const int choice = mdm::score_multiple_choice(*model, item, ec, mdm::derive_seed(seed, i));
            correct += choice == item.gold;
            items.push_back(json{{"index", i},
                                 {"choice", choice},
                                 {"gold", item.gold},
                                 {"correct", choice == item.gold},
                                 {"log_likelihoods", lls}});
        }
        report["items"] = items;
        report["aggregate"] = json{
            {"task", "multiple_choice"},
            {"n", ds.choice_items.size()},
            {"accuracy", static_cast<double>(correct) / static_cast<double>(ds.choice_items.size())}};
    } else if (task == "exact_match") {
        if (ds.pairs.empty()) throw UsageError("dataset: exact_match needs prompt/response records");
        mdm::SampleConfig sc;
        sc.kind = mdm::SamplerKind::greedy;
        sc.length = model->L();
        sc.steps = get_or<int>(e, "sample_steps", "eval", model->L());
        sc.guidance = ec.guidance;
        const mdm::Token eos = get_or<mdm::Token>(e, "eos_id", "eval", model->K() - 1);
        int hits = 0;
        for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
            const auto& [prompt, gold] = ds.pairs[i];
            const mdm::SampleResult res = mdm::greedy_sample(*model, sc, prompt);
            mdm::Sequence generated(res.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                    res.tokens.end());
            generated = mdm::strip_eos(generated, eos);
            const bool match = generated == gold;
            hits += match;
            items.push_back(json{{"index", i}, {"match", match}, {"generated", generated}});
        }
        report["items"] = items;
        report["aggregate"] =
            json{{"task", "exact_match"},
                 {"n", ds.pairs.size()},
                 {"accuracy", static_cast<double>(hits) / static_cast<double>(ds.pairs.size())}};
    } else {
        double total = 0.0;
        for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
            const auto& [prompt, response] = ds.pairs[i];
            json row{{"index", i}};
            if (ec.method == mdm::EvalMethod::chain_rule) {
                const double ll = mdm::chain_rule_ll(*model, prompt, response, ec);
                total += ll;
                row["log_likelihood"] = ll;
            } else {
                mdm::Rng rng(mdm::derive_seed(seed, i));
                const mdm::ElboEstimate est = mdm::mc_conditional_elbo(*model, prompt, response, ec, rng);
                total += est.estimate;
                row["log_likelihood"] = est.estimate;
                row["std_error"] = est.std_error;
                row["floor_hits"] = est.floor_hits;
            }
            items.push_back(row);
        }
        report["items"] = items;
        report["aggregate"] = json{{"task", "likelihood"},
                                   {"n", ds.pairs.size()},
                                   {"mean_log_likelihood", total / static_cast<double>(ds.pairs.size())}};
    }

    if (out_path.empty()) {
        std::cout << report.dump(2) << "\n";
    } else {
        std::ofstream out(out_path);
        if (!out) throw UsageError("cannot open output " + out_path);
        out << report.dump(2) << "\n";
        write_sidecar(out_path, "eval", watch.seconds());
    }
    return 0;
}

// --- fit-scaling ---------------------------------------------------------------

json analysis_to_json(const mdm::IsoflopAnalysis& analysis) {
    json budgets = json::array();
    for (const mdm::BudgetFit& b : analysis.budgets) {
        json fit;
        if (b.points >= 3) {
            fit = json{{"a", b.fit.a},
                       {"b", b.fit.b},
                       {"c", b.fit.c},
                       {"degenerate", b.fit.degenerate},
                       {"residual", b.fit.residual}};
            if (!b.fit.degenerate) {
                fit["n_star"] = b.fit.n_star;
                fit["l_star"] = b.fit.l_star;
            }
        }
        budgets.push_back(
            json{{"flops", b.flops}, {"points", b.points}, {"usable", b.usable}, {"fit", fit}});
    }
    json out{{"budgets", budgets}, {"optima", analysis.optima}};
    if (analysis.law_valid) {
        out["law"] = json{{"alpha", analysis.law.alpha}, {"beta", analysis.law.beta}};
    } else {
        out["law"] = nullptr;
    }
    return out;
}

int run_fit_scaling(const std::string& in_path, const std::string& baseline_path,
                    const std::string& out_path, const std::string& curve_path) {
    const Stopwatch watch;
    const mdm::IsoflopAnalysis main_fit = mdm::isoflop_analysis(mdm::read_runs_csv(in_path));
    json report{{"main", analysis_to_json(main_fit)}};

    if (!baseline_path.empty()) {
        const mdm::IsoflopAnalysis base = mdm::isoflop_analysis(mdm::read_runs_csv(baseline_path));
        report["baseline"] = analysis_to_json(base);
        if (main_fit.law_valid && base.law_valid && main_fit.law.alpha < 0.0 &&
            base.law.alpha < 0.0) {
            const double c_lo = main_fit.optima.front().first;
            const double c_hi = main_fit.optima.back().first;
            json levels = json::array(), ratios = json::array();
            for (const double c : {c_lo, std::sqrt(c_lo * c_hi), c_hi}) {
                const double level = main_fit.law.loss_at(c);
                levels.push_back(level);
                ratios.push_back(mdm::compute_gap(main_fit.law, base.law, level));
            }
            report["gap"] = json{{"loss_levels", levels}, {"ratios", ratios}};
        } else {
            report["gap"] = nullptr;
        }
    }

    if (!curve_path.empty()) {
        std::ofstream curve(curve_path);
        if (!curve) throw UsageError("cannot open output " + curve_path);
        curve << "C,L_star\n";
        for (const auto& [c, l_star] : main_fit.optima) {
            curve << mdm::detail::fmt_double(c) << ',' << mdm::detail::fmt_double(l_star) << "\n";
        }
    }

    if (out_path.empty()) {
        std::cout << report.dump(2) << "\n";
    } else {
        std::ofstream out(out_path);
        if (!out) throw UsageError("cannot open output " + out_path);
        out << report.dump(2) << "\n";
        write_sidecar(out_path, "fit-scaling", watch.seconds());
    }
    return 0;
}

// --- oracle-check ----------------------------------------------------------

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Filter-route conditional: the second, structurally independent path.
std::map<int, std::vector<double>> conditional_by_filter(const mdm::TabularJoint& joint,
                                                         const mdm::MaskedSequence& xt,
                                                         double* total_out) {
    std::map<int, std::vector<double>> acc;
    for (int i = 0; i < joint.L(); ++i) {
        if (xt.is_masked(i)) acc[i] = std::vector<double>(static_cast<std::size_t>(joint.K()), 0.0);
    }
    double total = 0.0;
    for (std::size_t idx = 0; idx < joint.num_states(); ++idx) {
        const mdm::Sequence x = joint.decode(idx);
        bool agrees = true;
        for (int i = 0; i < joint.L(); ++i) {
            if (!xt.is_masked(i) &&
                x[static_cast<std::size_t>(i)] != xt.tokens[static_cast<std::size_t>(i)]) {
                agrees = false;
                break;
            }
        }
        if (!agrees) continue;
        const double p = joint.probs()[idx];
        total += p;
        for (auto& [pos, row] : acc) {
            row[static_cast<std::size_t>(x[static_cast<std::size_t>(pos)])] += p;
        }
    }
    if (total > 0.0) {
        for (auto& [pos, row] : acc) {
            for (double& v : row) v /= total;
        }
    }
    *total_out = total;
    return acc;
}

std::vector<CheckResult> run_oracle_checks(const mdm::TabularJoint& joint, std::uint64_t seed) {
    std::vector<CheckResult> results;
    const mdm::Vocabulary vocab(joint.K());

    {
        CheckResult r{"mass-normalization", false, ""};
        mdm::KahanSum sum;
        for (double p : joint.probs()) sum.add(p);
        const double err = std::abs(sum.value() - 1.0);
        r.pass = err <= 1e-12;
        r.detail = "|sum-1| = " + std::to_string(err);
        results.push_back(r);
    }

    {
        CheckResult r{"conditional-bayes-agreement", true, ""};
        double worst = 0.0;
        std::size_t patterns = 1;
        for (int i = 0; i < joint.L(); ++i) patterns *= static_cast<std::size_t>(joint.K() + 1);
        mdm::Rng rng(mdm::derive_seed(seed, 1));
        const bool exhaustive = patterns <= 4096;
        const std::size_t trials = exhaustive ? patterns : 500;
        for (std::size_t trial = 0; trial < trials; ++trial) {
            mdm::MaskedSequence xt{mdm::Sequence(static_cast<std::size_t>(joint.L())),
                                   vocab.mask_id()};
            std::size_t code = exhaustive ? trial : static_cast<std::size_t>(rng.bits()) % patterns;
            for (int i = joint.L() - 1; i >= 0; --i) {
                const int digit = static_cast<int>(code % static_cast<std::size_t>(joint.K() + 1));
                code /= static_cast<std::size_t>(joint.K() + 1);
                xt.tokens[static_cast<std::size_t>(i)] =
                    digit == joint.K() ? vocab.mask_id() : static_cast<mdm::Token>(digit);
            }
            if (xt.masked_count() == 0) continue;
            double total = 0.0;
            const auto expected = conditional_by_filter(joint, xt, &total);
            if (total == 0.0) {
                try {
                    mdm::exact_conditional(joint, xt);
                    r.pass = false;
                    r.detail = "zero-support context not rejected";
                } catch (const mdm::ZeroSupportError&) {
                }
                continue;
            }
            const mdm::Prediction pred = mdm::exact_conditional(joint, xt);
            for (const auto& [pos, row] : expected) {
                for (int v = 0; v < joint.K(); ++v) {
                    worst = std::max(worst, std::abs(pred.at(pos)[static_cast<std::size_t>(v)] -
                                                     row[static_cast<std::size_t>(v)]));
                }
            }
        }
        if (r.pass) {
            r.pass = worst <= 1e-12;
            r.detail = "max |engine - enumeration| = " + std::to_string(worst);
        }
        results.push_back(r);
    }

    {
        CheckResult r{"conditional-row-normalization", true, ""};
        double worst = 0.0;
        const mdm::Prediction pred =
            mdm::exact_conditional(joint, mdm::fully_masked(vocab, joint.L()));
        for (std::size_t j = 0; j < pred.size(); ++j) {
            mdm::KahanSum sum;
            for (double p : pred.row(j)) sum.add(p);
            worst = std::max(worst, std::abs(sum.value() - 1.0));
        }
        r.pass = worst <= 1e-12;
        r.detail = "max |row sum - 1| = " + std::to_string(worst);
        results.push_back(r);
    }

    {
        CheckResult r{"chain-rule-vs-exact", true, ""};
        const mdm::OracleModel model(std::make_shared<mdm::TabularJoint>(joint));
        mdm::EvalConfig ec;
        ec.method = mdm::EvalMethod::chain_rule;
        double worst = 0.0;
        mdm::Rng rng(mdm::derive_seed(seed, 2));
        for (int trial = 0; trial < 20; ++trial) {
            const mdm::Sequence full = mdm::sample_joint(joint, rng);
            const int p_len = rng.uniform_int(joint.L());
            const mdm::Sequence prompt(full.begin(), full.begin() + p_len);
            const mdm::Sequence response(full.begin() + p_len, full.end());
            const double ll = mdm::chain_rule_ll(model, prompt, response, ec);
            worst =
                std::max(worst, std::abs(ll + mdm::exact_conditional_nll(joint, response, prompt)));
        }
        r.pass = worst <= 1e-9;
        r.detail = "max |chain + exact| = " + std::to_string(worst);
        results.push_back(r);
    }

    if (joint.L() <= 3) {
        CheckResult r{"estimator-expectation-equality", true, ""};
        const mdm::OracleModel model(std::make_shared<mdm::TabularJoint>(joint));
        bool full_support = true;
        for (double p : joint.probs()) full_support = full_support && p > 0.0;
        if (!full_support) {
            r.detail = "skipped: joint lacks full support";
        } else {
            auto factorial = [](int n) {
                double f = 1.0;
                for (int i = 2; i <= n; ++i) f *= i;
                return f;
            };
            double worst = 0.0;
            const int l = joint.L();
            mdm::Rng rng(mdm::derive_seed(seed, 3));
            for (int trial = 0; trial < 5; ++trial) {
                const mdm::Sequence x0 = mdm::sample_joint(joint, rng);
                double e_count = 0.0, e_t = 0.0;
                for (unsigned pattern = 1; pattern < (1u << l); ++pattern) {
                    const int m = __builtin_popcount(pattern);
                    mdm::TrainItem item;
                    item.xt = mdm::MaskedSequence{x0, vocab.mask_id()};
                    for (int i = 0; i < l; ++i) {
                        if (pattern & (1u << i)) {
                            item.xt.tokens[static_cast<std::size_t>(i)] = vocab.mask_id();
                            item.targets.emplace_back(i, x0[static_cast<std::size_t>(i)]);
                        }
                    }
                    item.weight = 1.0;
                    const double f = mdm::item_loss(model, item);
                    const double beta = factorial(m - 1) * factorial(l - m) / factorial(l);
                    e_t += f * beta;
                    const double choose = factorial(l) / (factorial(m) * factorial(l - m));
                    e_count += f * (static_cast<double>(l) / m) / (l * choose);
                }
                worst = std::max(worst, std::abs(e_count - e_t));
            }
            r.pass = worst <= 1e-10;
            r.detail = "max |E_count - E_t| = " + std::to_string(worst);
        }
        results.push_back(r);
    }

    if (joint.num_states() <= 256) {
        CheckResult r{"table-sampling-tv", true, ""};
        mdm::Rng rng(mdm::derive_seed(seed, 4));
        const int draws = 100000;
        std::vector<double> counts(joint.num_states(), 0.0);
        for (int i = 0; i < draws; ++i) counts[joint.encode(mdm::sample_joint(joint, rng))] += 1.0;
        double tv = 0.0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            tv += std::abs(counts[i] / draws - joint.probs()[i]);
        }
        tv *= 0.5;
        r.pass = tv < 0.02;
        r.detail = "TV = " + std::to_string(tv);
        results.push_back(r);
    }

    if (joint.num_states() <= 81) {
        CheckResult r{"ancestral-reverse-tv", true, ""};
        const mdm::OracleModel model(std::make_shared<mdm::TabularJoint>(joint));
        mdm::SampleConfig sc;
        sc.steps = joint.L();
        sc.length = joint.L();
        mdm::Rng rng(mdm::derive_seed(seed, 5));
        const int draws = 20000;
        std::vector<double> counts(joint.num_states(), 0.0);
        for (int i = 0; i < draws; ++i) {
            counts[joint.encode(mdm::ancestral_sample(model, sc, {}, rng).tokens)] += 1.0;
        }
        double tv = 0.0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            tv += std::abs(counts[i] / draws - joint.probs()[i]);
        }
        tv *= 0.5;
        r.pass = tv < 0.05;
        r.detail = "TV = " + std::to_string(tv);
        results.push_back(r);
    }

    return results;
}

int run_oracle_check(const std::string& config_path, const std::string& out_path,
                     std::optional<std::uint64_t> seed_override) {
    const Stopwatch watch;
    std::vector<std::pair<std::string, mdm::TabularJoint>> joints;
    std::uint64_t seed = 20260810;
    if (!config_path.empty()) {
        const json config = load_json_file(config_path);
        reject_unknown_keys(config, {"joints", "seed"}, "config");
        seed = get_or<std::uint64_t>(config, "seed", "config", seed);
        if (config.contains("joints")) {
            for (const auto& entry : config.at("joints")) {
                const std::string path = entry.get<std::string>();
                joints.emplace_back(path, mdm::joint_from_json(load_json_file(path)));
            }
        }
    }
    if (seed_override) seed = *seed_override;
    if (joints.empty()) {
        // Shipped fixtures: two full-support bigram chains.
        mdm::BigramSource a;
        a.K = 2;
        a.initial = {0.7, 0.3};
        a.transition = {0.9, 0.1, 0.2, 0.8};
        joints.emplace_back("builtin:bigram-k2-l3", mdm::joint_from_bigram(a, 3));
        mdm::BigramSource b;
        b.K = 3;
        b.initial = {0.5, 0.3, 0.2};
        b.transition = {0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.25, 0.25, 0.5};
        joints.emplace_back("builtin:bigram-k3-l3", mdm::joint_from_bigram(b, 3));
    }

    bool all_pass = true;
    json report = json::array();
    for (const auto& [name, joint] : joints) {
        std::cout << name << ":\n";
        json checks = json::array();
        for (const CheckResult& r : run_oracle_checks(joint, seed)) {
            all_pass = all_pass && r.pass;
            std::cout << "  [" << (r.pass ? " ok " : "FAIL") << "] " << r.name << " (" << r.detail
                      << ")\n";
            checks.push_back(json{{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
        }
        report.push_back(json{{"joint", name}, {"checks", checks}});
    }
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw UsageError("cannot open output " + out_path);
        out << json{{"pass", all_pass}, {"joints", report}}.dump(2) << "\n";
        write_sidecar(out_path, "oracle-check", watch.seconds());
    }
    if (!all_pass) {
        std::cerr << "oracle-check: invariant violation detected\n";
        return 2;
    }
    return 0;
}

// --- reversal-demo -----------------------------------------------------------

int run_reversal_demo(const std::string& config_path, const std::string& out_path,
                      std::optional<std::uint64_t> seed_override) {
    const Stopwatch watch;
    const json config = load_json_file(config_path);
    reject_unknown_keys(config, {"reversal"}, "config");
    const json& r = require_key(config, "reversal", "config");
    reject_unknown_keys(r,
                        {"K", "name_len", "desc_len", "num_facts", "model_kind", "embed_dim",
                         "hidden_dim", "train", "guidance", "seed", "seeds"},
                        "reversal");

    mdm::ReversalConfig rc;
    rc.k = get_or<int>(r, "K", "reversal", rc.k);
    rc.name_len = get_or<int>(r, "name_len", "reversal", rc.name_len);
    rc.desc_len = get_or<int>(r, "desc_len", "reversal", rc.desc_len);
    rc.num_facts = get_or<int>(r, "num_facts", "reversal", rc.num_facts);
    rc.model_kind = get_or<std::string>(r, "model_kind", "reversal", rc.model_kind);
    rc.embed_dim = get_or<int>(r, "embed_dim", "reversal", rc.embed_dim);
    rc.hidden_dim = get_or<int>(r, "hidden_dim", "reversal", rc.hidden_dim);
    rc.train = parse_train_block(require_key(r, "train", "reversal"), "reversal.train");
    rc.guidance = r.contains("guidance")
                      ? parse_guidance(r.at("guidance"), "reversal.guidance")
                      : mdm::GuidanceConfig{mdm::GuidanceMode::unsupervised, 0.8};

    std::vector<std::uint64_t> seeds;
    if (r.contains("seeds")) {
        seeds = r.at("seeds").get<std::vector<std::uint64_t>>();
    } else {
        seeds.push_back(get_or<std::uint64_t>(r, "seed", "reversal", 0));
    }
    if (seed_override) seeds = {*seed_override};
    if (seeds.empty()) throw UsageError("reversal.seeds: need at least one seed");

    json runs = json::array();
    double fwd_sum = 0.0, rev_sum = 0.0;
    double min_rev_z = std::numeric_limits<double>::infinity();
    for (const std::uint64_t seed : seeds) {
        rc.seed = seed;
        const mdm::ReversalReport rep = mdm::reversal_experiment(rc);
        fwd_sum += rep.forward_accuracy;
        rev_sum += rep.reverse_accuracy;
        min_rev_z = std::min(min_rev_z, rep.reverse_z);
        runs.push_back(json{{"seed", seed},
                            {"forward_accuracy", rep.forward_accuracy},
                            {"reverse_accuracy", rep.reverse_accuracy},
                            {"forward_chance", rep.forward_chance},
                            {"reverse_chance", rep.reverse_chance},
                            {"forward_z", rep.forward_z},
                            {"reverse_z", rep.reverse_z},
                            {"final_train_loss", rep.final_train_loss}});
    }
    const double n_seeds = static_cast<double>(seeds.size());
    const json report{{"runs", runs},
                      {"aggregate", json{{"mean_forward_accuracy", fwd_sum / n_seeds},
                                         {"mean_reverse_accuracy", rev_sum / n_seeds},
                                         {"min_reverse_z", min_rev_z},
                                         {"n_seeds", seeds.size()}}}};
    if (out_path.empty()) {
        std::cout << report.dump(2) << "\n";
    } else {
        std::ofstream out(out_path);
        if (!out) throw UsageError("cannot open output " + out_path);
        out << report.dump(2) << "\n";
        write_sidecar(out_path, "reversal-demo", watch.seconds());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"masked-diffusion sequence engine"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, out_path;
    std::string in_path, baseline_path, curve_path;
    std::uint64_t seed_value = 0;
    bool seed_given = false;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed_value, "override the config seed")
            ->each([&](const std::string&) { seed_given = true; });
    };

    CLI::App* train = app.add_subcommand("train", "train a model; writes checkpoint + log CSV");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--out", out_path, "output path prefix (overrides config out)");
    add_seed(train);

    CLI::App* sample = app.add_subcommand("sample", "generate sequences; writes JSONL");
    sample->add_option("--config", config_path, "run config JSON")->required();
    sample->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    sample->add_option("--out", out_path, "output JSONL path")->required();
    add_seed(sample);

    CLI::App* eval = app.add_subcommand("eval", "evaluate a dataset; writes JSON report");
    eval->add_option("--config", config_path, "run config JSON")->required();
    eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    eval->add_option("--out", out_path, "report path (stdout when omitted)");
    add_seed(eval);

    CLI::App* fit = app.add_subcommand("fit-scaling", "fit IsoFLOP parabolas and the power law");
    fit->add_option("--in", in_path, "runs CSV (columns N,D,loss)")->required();
    fit->add_option("--baseline", baseline_path, "second family's runs CSV for the compute gap");
    fit->add_option("--out", out_path, "report path (stdout when omitted)");
    fit->add_option("--curve-out", curve_path, "CSV of (C, L*) optima");

    CLI::App* check = app.add_subcommand("oracle-check", "run the oracle-vs-engine property suite");
    check->add_option("--config", config_path, "optional config with joint fixture paths");
    check->add_option("--out", out_path, "report path");
    add_seed(check);

    CLI::App* reversal = app.add_subcommand("reversal-demo", "synthetic bidirectional-recall demo");
    reversal->add_option("--config", config_path, "run config JSON")->required();
    reversal->add_option("--out", out_path, "report path (stdout when omitted)");
    add_seed(reversal);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    const std::optional<std::uint64_t> seed_override =
        seed_given ? std::optional<std::uint64_t>(seed_value) : std::nullopt;

    try {
        if (train->parsed()) return run_train(config_path, out_path, seed_override);
        if (sample->parsed()) return run_sample(config_path, checkpoint_path, out_path, seed_override);
        if (eval->parsed()) return run_eval(config_path, checkpoint_path, out_path, seed_override);
        if (fit->parsed()) return run_fit_scaling(in_path, baseline_path, out_path, curve_path);
        if (check->parsed()) return run_oracle_check(config_path, out_path, seed_override);
        if (reversal->parsed()) return run_reversal_demo(config_path, out_path, seed_override);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::domain_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::logic_error& e) {
        // Reserved for broken internal invariants, never user input.
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
