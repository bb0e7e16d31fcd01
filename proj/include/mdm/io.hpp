#pragma once

// File formats: JSON fixtures for joints and bigram sources, JSONL eval
// datasets, model checkpoints (JSON header line + little-endian float64
// parameter block), train-log CSV, and the scaling-run CSV.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdm/evaluate.hpp"
#include "mdm/guidance.hpp"
#include "mdm/model.hpp"
#include "mdm/oracle.hpp"
#include "mdm/scaling.hpp"
#include "mdm/types.hpp"

namespace mdm {

using json = nlohmann::json;

// --- JSON fixtures ---------------------------------------------------------

inline json to_json(const TabularJoint& joint) {
    return json{{"K", joint.K()}, {"L", joint.L()}, {"probs", joint.probs()}};
}

inline TabularJoint joint_from_json(const json& j, std::size_t state_cap = kDefaultStateCap) {
    return TabularJoint(j.at("K").get<int>(), j.at("L").get<int>(),
                        j.at("probs").get<std::vector<double>>(), state_cap);
}

inline json to_json(const BigramSource& src) {
    std::vector<std::vector<double>> rows;
    for (int r = 0; r < src.K; ++r) {
        rows.emplace_back(src.transition.begin() + static_cast<std::ptrdiff_t>(r) * src.K,
                          src.transition.begin() + static_cast<std::ptrdiff_t>(r + 1) * src.K);
    }
    return json{{"K", src.K}, {"initial", src.initial}, {"transition", rows}};
}

inline BigramSource bigram_from_json(const json& j) {
    BigramSource src;
    src.K = j.at("K").get<int>();
    src.initial = j.at("initial").get<std::vector<double>>();
    for (const auto& row : j.at("transition")) {
        const auto vals = row.get<std::vector<double>>();
        src.transition.insert(src.transition.end(), vals.begin(), vals.end());
    }
    src.validate();
    return src;
}

inline json to_json(const GuidanceConfig& cfg) {
    return json{{"mode", to_string(cfg.mode)}, {"scale", cfg.scale}};
}

inline GuidanceConfig guidance_from_json(const json& j) {
    GuidanceConfig cfg;
    cfg.mode = guidance_mode_from_string(j.at("mode").get<std::string>());
    cfg.scale = j.value("scale", 0.0);
    cfg.validate();
    return cfg;
}

// --- Checkpoints -------------------------------------------------------------
//
// Layout: one line of JSON metadata terminated by '\n', then the flat
// parameter block as little-endian IEEE-754 float64, in parameter order.

namespace detail {

inline void write_f64_le(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(buf, 8);
}

inline double read_f64_le(std::istream& in) {
    char buf[8];
    in.read(buf, 8);
    if (!in) throw std::invalid_argument("checkpoint: truncated parameter block");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
    }
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const PredictiveModel& model,
                            std::uint64_t seed) {
    json header{{"kind", model.kind()},
                {"K", model.K()},
                {"L", model.L()},
                {"N", model.parameter_count()},
                {"seed", seed}};
    std::span<const double> params;
    std::vector<double> oracle_probs;
    if (const auto* trainable = dynamic_cast<const TrainableModel*>(&model)) {
        params = trainable->parameters();
        header["params"] = trainable->num_params();
        if (const auto* compact = dynamic_cast<const CompactModel*>(&model)) {
            header["embed_dim"] = compact->embed_dim();
            header["hidden_dim"] = compact->hidden_dim();
        }
    } else if (const auto* oracle = dynamic_cast<const OracleModel*>(&model)) {
        oracle_probs = oracle->joint().probs();
        params = oracle_probs;
        header["params"] = oracle_probs.size();
    } else {
        throw std::invalid_argument("save_checkpoint: unknown model kind " + model.kind());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::invalid_argument("save_checkpoint: cannot open " + path);
    out << header.dump() << '\n';
    for (double p : params) detail::write_f64_le(out, p);
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline std::unique_ptr<PredictiveModel> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("load_checkpoint: cannot open " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) {
        throw std::invalid_argument("load_checkpoint: missing header line");
    }
    const json header = json::parse(header_line);
    const std::string kind = header.at("kind").get<std::string>();
    const int k = header.at("K").get<int>();
    const int l = header.at("L").get<int>();
    const std::size_t count = header.at("params").get<std::size_t>();
    std::vector<double> params(count);
    for (std::size_t i = 0; i < count; ++i) params[i] = detail::read_f64_le(in);

    if (kind == "oracle") {
        auto joint = std::make_shared<TabularJoint>(k, l, std::move(params));
        return std::make_unique<OracleModel>(std::move(joint));
    }
    std::unique_ptr<TrainableModel> model;
    if (kind == "tabular") {
        model = std::make_unique<TabularModel>(k, l);
    } else if (kind == "compact") {
        model = std::make_unique<CompactModel>(k, l, header.at("embed_dim").get<int>(),
                                               header.at("hidden_dim").get<int>());
    } else {
        throw std::invalid_argument("load_checkpoint: unknown model kind " + kind);
    }
    if (model->num_params() != count) {
        throw std::invalid_argument("load_checkpoint: parameter count mismatch");
    }
    std::copy(params.begin(), params.end(), model->parameters().begin());
    return model;
}

// --- CSV ---------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    return out;
}

} // namespace detail

inline void write_train_log_csv(const std::string& path, const TrainLog& log) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("write_train_log_csv: cannot open " + path);
    out << "step,loss,tokens_seen,flops\n";
    for (const TrainLogRow& row : log.rows) {
        out << row.step << ',' << detail::fmt_double(row.loss) << ',' << row.tokens_seen << ','
            << detail::fmt_double(row.flops) << '\n';
    }
}

// Scaling-run CSV: header "N,D,loss"; C is derived as 6*N*D.
inline std::vector<RunRecord> read_runs_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("read_runs_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || detail::split_csv_line(line) != std::vector<std::string>{"N", "D", "loss"}) {
        throw std::invalid_argument("read_runs_csv: expected header N,D,loss in " + path);
    }
    std::vector<RunRecord> runs;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != 3) {
            throw std::invalid_argument("read_runs_csv: line " + std::to_string(line_no) +
                                        ": expected 3 fields");
        }
        RunRecord r;
        try {
            r.n_params = std::stod(fields[0]);
            r.tokens = std::stod(fields[1]);
            r.loss = std::stod(fields[2]);
        } catch (const std::exception&) {
            throw std::invalid_argument("read_runs_csv: line " + std::to_string(line_no) +
                                        ": malformed number");
        }
        r.flops = 6.0 * r.n_params * r.tokens;
        try {
            r.validate();
        } catch (const std::exception& e) {
            throw std::invalid_argument("read_runs_csv: line " + std::to_string(line_no) + ": " +
                                        e.what());
        }
        runs.push_back(r);
    }
    return runs;
}

// --- JSONL eval datasets -----------------------------------------------------

struct EvalDataset {
    std::vector<MultipleChoiceItem> choice_items;
    std::vector<std::pair<Sequence, Sequence>> pairs;  // (prompt, response)
};

inline EvalDataset read_eval_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("read_eval_jsonl: cannot open " + path);
    EvalDataset out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::invalid_argument("read_eval_jsonl: line " + std::to_string(line_no) + ": " +
                                        e.what());
        }
        if (j.contains("options")) {
            MultipleChoiceItem item;
            item.prompt = j.at("prompt").get<Sequence>();
            for (const auto& opt : j.at("options")) item.options.push_back(opt.get<Sequence>());
            item.gold = j.at("gold").get<int>();
            item.validate();
            out.choice_items.push_back(std::move(item));
        } else if (j.contains("response")) {
            out.pairs.emplace_back(j.at("prompt").get<Sequence>(), j.at("response").get<Sequence>());
        } else {
            throw std::invalid_argument("read_eval_jsonl: line " + std::to_string(line_no) +
                                        ": need either options+gold or response");
        }
    }
    return out;
}

} // namespace mdm
