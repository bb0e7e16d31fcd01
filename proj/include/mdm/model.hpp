#pragma once

// Data-prediction models p(x0^i | xt), the masked cross-entropy training
// objective with closed-form gradients, Monte-Carlo loss estimation, SGD
// training, and compute accounting C = 6*N*D.
//
// Two trainable parameterizations ship here: a tabular softmax model keyed on
// full masked contexts (exact capacity; its optimum is the oracle
// conditionals) and a compact embedding+MLP model as a desk-scale stand-in
// for a sequence encoder. Both take only the token/mask pattern as input, so
// predictions are invariant to the noise level by construction.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdm/oracle.hpp"
#include "mdm/process.hpp"
#include "mdm/rng.hpp"
#include "mdm/types.hpp"

namespace mdm {

// Model probabilities are floored at this value inside -log so the objective
// stays finite at zero predicted mass; estimators report when the floor fires.
constexpr double kProbFloor = 1e-12;

inline void softmax_inplace(std::span<double> row) {
    double max_v = row[0];
    for (double v : row) max_v = std::max(max_v, v);
    double sum = 0.0;
    for (double& v : row) {
        v = std::exp(v - max_v);
        sum += v;
    }
    for (double& v : row) v /= sum;
}

class PredictiveModel {
public:
    virtual ~PredictiveModel() = default;

    virtual int K() const = 0;
    virtual int L() const = 0;
    // Non-embedding parameter count N used in compute accounting.
    virtual std::int64_t parameter_count() const = 0;
    virtual std::string kind() const = 0;
    // Valid categorical over the K data tokens at each masked position of xt.
    virtual Prediction predict(const MaskedSequence& xt) const = 0;

protected:
    void require_input(const MaskedSequence& xt) const {
        if (xt.length() != L()) {
            throw std::invalid_argument(kind() + "::predict: sequence length " +
                                        std::to_string(xt.length()) + " != model L " +
                                        std::to_string(L()));
        }
        if (xt.mask_id != K()) {
            throw std::invalid_argument(kind() + "::predict: mask id mismatch");
        }
        for (Token t : xt.tokens) {
            if (t < 0 || t > K()) {
                throw std::invalid_argument(kind() + "::predict: token outside alphabet+mask");
            }
        }
    }
};

// Ground-truth conditionals looked up from an exact joint table.
class OracleModel final : public PredictiveModel {
public:
    explicit OracleModel(std::shared_ptr<const TabularJoint> joint) : joint_(std::move(joint)) {
        if (!joint_) throw std::invalid_argument("OracleModel: null joint");
    }

    int K() const override { return joint_->K(); }
    int L() const override { return joint_->L(); }
    std::int64_t parameter_count() const override {
        return static_cast<std::int64_t>(joint_->num_states());
    }
    std::string kind() const override { return "oracle"; }

    Prediction predict(const MaskedSequence& xt) const override {
        require_input(xt);
        return exact_conditional(*joint_, xt);
    }

    const TabularJoint& joint() const { return *joint_; }
    std::shared_ptr<const TabularJoint> joint_ptr() const { return joint_; }

private:
    std::shared_ptr<const TabularJoint> joint_;
};

// One training example: a noised input, the clean tokens to score (a subset
// of the masked positions), and the importance weight from the estimator that
// produced it (1/t or L/l).
struct TrainItem {
    MaskedSequence xt;
    std::vector<std::pair<int, Token>> targets;
    double weight = 1.0;
};

class TrainableModel : public PredictiveModel {
public:
    virtual std::size_t num_params() const = 0;
    virtual std::span<double> parameters() = 0;
    virtual std::span<const double> parameters() const = 0;

    // Mean over the batch of weight * summed masked cross-entropy, with the
    // matching gradient accumulated into grad (not zeroed here). Items are
    // reduced in batch order, so accumulation is deterministic.
    virtual double loss_and_grad(std::span<const TrainItem> batch, std::span<double> grad) const = 0;
};

// Softmax lookup table keyed by the full masked context and position.
// Contexts are length-L strings over the K+1 symbols (data tokens + mask).
class TabularModel final : public TrainableModel {
public:
    TabularModel(int k, int l, std::size_t param_cap = 10'000'000)
        : k_(k), l_(l), contexts_(checked_state_count(k + 1, l, param_cap)) {
        const std::size_t table = contexts_ * static_cast<std::size_t>(l_) * static_cast<std::size_t>(k_);
        if (table > param_cap) {
            throw CapacityError("TabularModel: logit table of " + std::to_string(table) +
                                " entries exceeds cap " + std::to_string(param_cap));
        }
        logits_.assign(table, 0.0);
    }

    int K() const override { return k_; }
    int L() const override { return l_; }
    std::int64_t parameter_count() const override { return static_cast<std::int64_t>(logits_.size()); }
    std::string kind() const override { return "tabular"; }

    std::size_t num_params() const override { return logits_.size(); }
    std::span<double> parameters() override { return logits_; }
    std::span<const double> parameters() const override { return logits_; }

    std::size_t context_index(const MaskedSequence& xt) const {
        std::size_t idx = 0;
        for (Token t : xt.tokens) {
            idx = idx * static_cast<std::size_t>(k_ + 1) + static_cast<std::size_t>(t);
        }
        return idx;
    }

    Prediction predict(const MaskedSequence& xt) const override {
        require_input(xt);
        const std::size_t ctx = context_index(xt);
        Prediction pred;
        for (int i = 0; i < l_; ++i) {
            if (!xt.is_masked(i)) continue;
            std::vector<double> row(logits_.begin() + static_cast<std::ptrdiff_t>(row_offset(ctx, i)),
                                    logits_.begin() +
                                        static_cast<std::ptrdiff_t>(row_offset(ctx, i) + static_cast<std::size_t>(k_)));
            softmax_inplace(row);
            pred.add(i, std::move(row));
        }
        return pred;
    }

    double loss_and_grad(std::span<const TrainItem> batch, std::span<double> grad) const override {
        if (grad.size() != logits_.size()) {
            throw std::invalid_argument("TabularModel::loss_and_grad: grad size mismatch");
        }
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        double loss = 0.0;
        std::vector<double> row(static_cast<std::size_t>(k_));
        for (const TrainItem& item : batch) {
            require_input(item.xt);
            const std::size_t ctx = context_index(item.xt);
            const double scale = item.weight * inv_b;
            for (const auto& [pos, truth] : item.targets) {
                const std::size_t off = row_offset(ctx, pos);
                for (int v = 0; v < k_; ++v) row[static_cast<std::size_t>(v)] = logits_[off + static_cast<std::size_t>(v)];
                softmax_inplace(row);
                loss += scale * -std::log(std::max(row[static_cast<std::size_t>(truth)], kProbFloor));
                for (int v = 0; v < k_; ++v) {
                    grad[off + static_cast<std::size_t>(v)] +=
                        scale * (row[static_cast<std::size_t>(v)] - (v == truth ? 1.0 : 0.0));
                }
            }
        }
        return loss;
    }

private:
    std::size_t row_offset(std::size_t ctx, int pos) const {
        return (ctx * static_cast<std::size_t>(l_) + static_cast<std::size_t>(pos)) *
               static_cast<std::size_t>(k_);
    }

    int k_;
    int l_;
    std::size_t contexts_;
    std::vector<double> logits_;
};

// Token+position embeddings -> one dense tanh layer over the concatenated
// sequence -> per-position linear heads to K logits. Small enough to
// backpropagate by hand, big enough to share structure across contexts.
class CompactModel final : public TrainableModel {
public:
    CompactModel(int k, int l, int embed_dim, int hidden_dim, std::uint64_t init_seed = 0)
        : k_(k), l_(l), d_(embed_dim), h_(hidden_dim) {
        if (k < 2 || l < 1 || embed_dim < 1 || hidden_dim < 1) {
            throw std::invalid_argument("CompactModel: all dimensions must be positive, K >= 2");
        }
        params_.assign(total_params(), 0.0);
        Rng rng(derive_seed(init_seed, 0x636d696eULL));
        const double scale = 0.5 / std::sqrt(static_cast<double>(l_ * d_));
        for (double& p : params_) p = (2.0 * rng.uniform() - 1.0) * scale;
    }

    int K() const override { return k_; }
    int L() const override { return l_; }
    int embed_dim() const { return d_; }
    int hidden_dim() const { return h_; }
    std::string kind() const override { return "compact"; }

    // N counts non-embedding parameters only (hidden layer + output heads).
    std::int64_t parameter_count() const override {
        const std::int64_t hl = static_cast<std::int64_t>(h_) * (static_cast<std::int64_t>(l_) * d_) + h_;
        const std::int64_t heads = static_cast<std::int64_t>(l_) * k_ * h_ + static_cast<std::int64_t>(l_) * k_;
        return hl + heads;
    }

    std::size_t num_params() const override { return params_.size(); }
    std::span<double> parameters() override { return params_; }
    std::span<const double> parameters() const override { return params_; }

    Prediction predict(const MaskedSequence& xt) const override {
        require_input(xt);
        Scratch s(*this);
        forward(xt, s);
        Prediction pred;
        for (int i = 0; i < l_; ++i) {
            if (!xt.is_masked(i)) continue;
            std::vector<double> row(static_cast<std::size_t>(k_));
            head_logits(s.hidden, i, row);
            softmax_inplace(row);
            pred.add(i, std::move(row));
        }
        return pred;
    }

    double loss_and_grad(std::span<const TrainItem> batch, std::span<double> grad) const override {
        if (grad.size() != params_.size()) {
            throw std::invalid_argument("CompactModel::loss_and_grad: grad size mismatch");
        }
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        double loss = 0.0;
        Scratch s(*this);
        std::vector<double> row(static_cast<std::size_t>(k_));
        std::vector<double> d_hidden(static_cast<std::size_t>(h_));
        std::vector<double> d_embed(static_cast<std::size_t>(l_) * static_cast<std::size_t>(d_));
        for (const TrainItem& item : batch) {
            require_input(item.xt);
            forward(item.xt, s);
            const double scale = item.weight * inv_b;
            std::fill(d_hidden.begin(), d_hidden.end(), 0.0);
            for (const auto& [pos, truth] : item.targets) {
                head_logits(s.hidden, pos, row);
                softmax_inplace(row);
                loss += scale * -std::log(std::max(row[static_cast<std::size_t>(truth)], kProbFloor));
                // d logits = scale * (softmax - onehot); fan out to W2/b2 and hidden.
                for (int v = 0; v < k_; ++v) {
                    const double dl = scale * (row[static_cast<std::size_t>(v)] - (v == truth ? 1.0 : 0.0));
                    const std::size_t head = head_row(pos, v);
                    const std::size_t w2_off = off_w2() + head * static_cast<std::size_t>(h_);
                    for (int j = 0; j < h_; ++j) {
                        grad[w2_off + static_cast<std::size_t>(j)] += dl * s.hidden[static_cast<std::size_t>(j)];
                        d_hidden[static_cast<std::size_t>(j)] +=
                            dl * params_[w2_off + static_cast<std::size_t>(j)];
                    }
                    grad[off_b2() + head] += dl;
                }
            }
            // Through tanh and the dense layer back to the embeddings.
            std::fill(d_embed.begin(), d_embed.end(), 0.0);
            const std::size_t in_dim = static_cast<std::size_t>(l_) * static_cast<std::size_t>(d_);
            for (int j = 0; j < h_; ++j) {
                const double hj = s.hidden[static_cast<std::size_t>(j)];
                const double dz = d_hidden[static_cast<std::size_t>(j)] * (1.0 - hj * hj);
                if (dz == 0.0) continue;
                const std::size_t w1_off = off_w1() + static_cast<std::size_t>(j) * in_dim;
                for (std::size_t i = 0; i < in_dim; ++i) {
                    grad[w1_off + i] += dz * s.embed[i];
                    d_embed[i] += dz * params_[w1_off + i];
                }
                grad[off_b1() + static_cast<std::size_t>(j)] += dz;
            }
            for (int i = 0; i < l_; ++i) {
                const Token t = item.xt.tokens[static_cast<std::size_t>(i)];
                const std::size_t tok_off = off_e_tok() + static_cast<std::size_t>(t) * static_cast<std::size_t>(d_);
                const std::size_t pos_off = off_e_pos() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d_);
                for (int c = 0; c < d_; ++c) {
                    const double de = d_embed[static_cast<std::size_t>(i) * static_cast<std::size_t>(d_) +
                                              static_cast<std::size_t>(c)];
                    grad[tok_off + static_cast<std::size_t>(c)] += de;
                    grad[pos_off + static_cast<std::size_t>(c)] += de;
                }
            }
        }
        return loss;
    }

private:
    struct Scratch {
        explicit Scratch(const CompactModel& m)
            : embed(static_cast<std::size_t>(m.l_) * static_cast<std::size_t>(m.d_)),
              hidden(static_cast<std::size_t>(m.h_)) {}
        std::vector<double> embed;
        std::vector<double> hidden;
    };

    std::size_t off_e_tok() const { return 0; }
    std::size_t off_e_pos() const {
        return static_cast<std::size_t>(k_ + 1) * static_cast<std::size_t>(d_);
    }
    std::size_t off_w1() const {
        return off_e_pos() + static_cast<std::size_t>(l_) * static_cast<std::size_t>(d_);
    }
    std::size_t off_b1() const {
        return off_w1() + static_cast<std::size_t>(h_) * static_cast<std::size_t>(l_) *
                              static_cast<std::size_t>(d_);
    }
    std::size_t off_w2() const { return off_b1() + static_cast<std::size_t>(h_); }
    std::size_t off_b2() const {
        return off_w2() + static_cast<std::size_t>(l_) * static_cast<std::size_t>(k_) *
                              static_cast<std::size_t>(h_);
    }
    std::size_t total_params() const {
        return off_b2() + static_cast<std::size_t>(l_) * static_cast<std::size_t>(k_);
    }
    std::size_t head_row(int pos, int v) const {
        return static_cast<std::size_t>(pos) * static_cast<std::size_t>(k_) + static_cast<std::size_t>(v);
    }

    void forward(const MaskedSequence& xt, Scratch& s) const {
        for (int i = 0; i < l_; ++i) {
            const Token t = xt.tokens[static_cast<std::size_t>(i)];
            const std::size_t tok_off = off_e_tok() + static_cast<std::size_t>(t) * static_cast<std::size_t>(d_);
            const std::size_t pos_off = off_e_pos() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d_);
            for (int c = 0; c < d_; ++c) {
                s.embed[static_cast<std::size_t>(i) * static_cast<std::size_t>(d_) + static_cast<std::size_t>(c)] =
                    params_[tok_off + static_cast<std::size_t>(c)] + params_[pos_off + static_cast<std::size_t>(c)];
            }
        }
        const std::size_t in_dim = static_cast<std::size_t>(l_) * static_cast<std::size_t>(d_);
        for (int j = 0; j < h_; ++j) {
            double z = params_[off_b1() + static_cast<std::size_t>(j)];
            const std::size_t w1_off = off_w1() + static_cast<std::size_t>(j) * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) z += params_[w1_off + i] * s.embed[i];
            s.hidden[static_cast<std::size_t>(j)] = std::tanh(z);
        }
    }

    void head_logits(const std::vector<double>& hidden, int pos, std::vector<double>& out) const {
        for (int v = 0; v < k_; ++v) {
            const std::size_t head = head_row(pos, v);
            double z = params_[off_b2() + head];
            const std::size_t w2_off = off_w2() + head * static_cast<std::size_t>(h_);
            for (int j = 0; j < h_; ++j) z += params_[w2_off + static_cast<std::size_t>(j)] * hidden[static_cast<std::size_t>(j)];
            out[static_cast<std::size_t>(v)] = z;
        }
    }

    int k_;
    int l_;
    int d_;
    int h_;
    std::vector<double> params_;
};

enum class LossMode { uniform_t, uniform_count };

inline std::string to_string(LossMode mode) {
    return mode == LossMode::uniform_t ? "uniform_t" : "uniform_count";
}

// One Monte-Carlo draw of the masked objective over the first active_len
// positions of x0; positions beyond active_len are held at the mask symbol
// and never scored (mask padding). Weight carries the estimator factor.
inline TrainItem draw_masked_item(const Vocabulary& vocab, const Sequence& x0, int active_len,
                                  LossMode mode, Rng& rng) {
    vocab.require_sequence(x0);
    const int len = static_cast<int>(x0.size());
    if (active_len < 1 || active_len > len) {
        throw std::invalid_argument("draw_masked_item: active_len out of range");
    }
    TrainItem item;
    item.xt = MaskedSequence{x0, vocab.mask_id()};
    for (int i = active_len; i < len; ++i) {
        item.xt.tokens[static_cast<std::size_t>(i)] = vocab.mask_id();
    }

    if (mode == LossMode::uniform_t) {
        const double t = 1.0 - rng.uniform();  // (0, 1]
        for (int i = 0; i < active_len; ++i) {
            if (rng.uniform() < t) {
                item.xt.tokens[static_cast<std::size_t>(i)] = vocab.mask_id();
                item.targets.emplace_back(i, x0[static_cast<std::size_t>(i)]);
            }
        }
        item.weight = item.targets.empty() ? 0.0 : 1.0 / t;
    } else {
        const int ell = 1 + rng.uniform_int(active_len);
        std::vector<int> order(static_cast<std::size_t>(active_len));
        for (int i = 0; i < active_len; ++i) order[static_cast<std::size_t>(i)] = i;
        for (int j = 0; j < ell; ++j) {
            const int swap_with = j + rng.uniform_int(active_len - j);
            std::swap(order[static_cast<std::size_t>(j)], order[static_cast<std::size_t>(swap_with)]);
        }
        for (int j = 0; j < ell; ++j) {
            const int pos = order[static_cast<std::size_t>(j)];
            item.xt.tokens[static_cast<std::size_t>(pos)] = vocab.mask_id();
            item.targets.emplace_back(pos, x0[static_cast<std::size_t>(pos)]);
        }
        std::sort(item.targets.begin(), item.targets.end());
        item.weight = static_cast<double>(active_len) / static_cast<double>(ell);
    }
    return item;
}

struct LossEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::int64_t floor_hits = 0;  // times -log hit the probability floor
    std::int64_t n_samples = 0;
};

// Weighted masked cross-entropy of one item under the model's predictions.
inline double item_loss(const PredictiveModel& model, const TrainItem& item,
                        std::int64_t* floor_hits = nullptr) {
    if (item.targets.empty()) return 0.0;
    const Prediction pred = model.predict(item.xt);
    double sum = 0.0;
    for (const auto& [pos, truth] : item.targets) {
        const double p = pred.at(pos)[static_cast<std::size_t>(truth)];
        if (p < kProbFloor && floor_hits != nullptr) ++(*floor_hits);
        sum += -std::log(std::max(p, kProbFloor));
    }
    return item.weight * sum;
}

// Unbiased Monte-Carlo estimate of the masked-diffusion NLL bound for x0.
inline LossEstimate loss_estimate(const PredictiveModel& model, const Sequence& x0, Rng& rng,
                                  std::int64_t n_samples, LossMode mode) {
    if (n_samples < 1) {
        throw std::invalid_argument("loss_estimate: n_samples must be >= 1");
    }
    if (static_cast<int>(x0.size()) != model.L()) {
        throw std::invalid_argument("loss_estimate: x0 length != model L");
    }
    const Vocabulary vocab(model.K());
    LossEstimate est;
    est.n_samples = n_samples;
    double mean = 0.0, m2 = 0.0;
    for (std::int64_t s = 0; s < n_samples; ++s) {
        const TrainItem item = draw_masked_item(vocab, x0, model.L(), mode, rng);
        const double term = item_loss(model, item, &est.floor_hits);
        const double delta = term - mean;
        mean += delta / static_cast<double>(s + 1);
        m2 += delta * (term - mean);
    }
    est.mean = mean;
    est.std_error = n_samples > 1
                        ? std::sqrt(m2 / static_cast<double>(n_samples - 1) / static_cast<double>(n_samples))
                        : 0.0;
    return est;
}

inline double flops(double n_params, double d_tokens) {
    if (!(n_params > 0.0) || !(d_tokens > 0.0)) {
        throw std::invalid_argument("flops: N and D must be positive");
    }
    return 6.0 * n_params * d_tokens;
}

struct TrainConfig {
    int steps = 0;
    int batch_size = 1;
    double learning_rate = 0.1;
    std::uint64_t seed = 0;
    double variable_length_fraction = 0.0;  // fraction of batches at U[1, l_max] length
    int l_max = 0;                          // 0 = model L
    LossMode mode = LossMode::uniform_count;
    double prompt_dropout_prob = 0.0;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (variable_length_fraction < 0.0 || variable_length_fraction > 1.0) {
            throw std::invalid_argument("TrainConfig: variable_length_fraction must be in [0,1]");
        }
        if (prompt_dropout_prob < 0.0 || prompt_dropout_prob > 1.0) {
            throw std::invalid_argument("TrainConfig: prompt_dropout_prob must be in [0,1]");
        }
        if (l_max < 0) throw std::invalid_argument("TrainConfig: l_max must be >= 0");
    }
};

struct TrainLogRow {
    int step = 0;
    double loss = 0.0;  // per-token, nats
    std::int64_t tokens_seen = 0;
    double flops = 0.0;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
    // Reporting convention: loss is normalized per token of the batch length.
    std::string loss_normalization = "per-token";
    std::string estimator;
};

using DataSampler = std::function<Sequence(Rng&)>;

inline DataSampler sampler_from_joint(std::shared_ptr<const TabularJoint> joint) {
    return [joint = std::move(joint)](Rng& rng) { return sample_joint(*joint, rng); };
}

inline DataSampler sampler_from_dataset(std::vector<Sequence> dataset) {
    if (dataset.empty()) {
        throw std::invalid_argument("sampler_from_dataset: empty dataset");
    }
    auto shared = std::make_shared<std::vector<Sequence>>(std::move(dataset));
    return [shared](Rng& rng) {
        return (*shared)[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(shared->size())))];
    };
}

// Plain SGD on the masked objective. A variable_length_fraction of batches
// trains on uniformly drawn prefix lengths, padded back to L with masks.
inline TrainLog train(TrainableModel& model, const DataSampler& draw, const TrainConfig& config,
                      Rng& rng) {
    config.validate();
    const int l_max = config.l_max == 0 ? model.L() : config.l_max;
    if (l_max < 1 || l_max > model.L()) {
        throw std::invalid_argument("train: l_max must be in [1, model L]");
    }
    const Vocabulary vocab(model.K());
    TrainLog log;
    log.estimator = to_string(config.mode);
    log.rows.reserve(static_cast<std::size_t>(config.steps));

    std::vector<double> grad(model.num_params());
    std::vector<TrainItem> batch(static_cast<std::size_t>(config.batch_size));
    std::int64_t tokens_seen = 0;
    const double n_params = static_cast<double>(model.parameter_count());

    for (int step = 1; step <= config.steps; ++step) {
        int len = l_max;
        if (config.variable_length_fraction > 0.0 &&
            rng.uniform() < config.variable_length_fraction) {
            len = 1 + rng.uniform_int(l_max);
        }
        for (int b = 0; b < config.batch_size; ++b) {
            Sequence x0 = draw(rng);
            if (static_cast<int>(x0.size()) != model.L()) {
                throw std::invalid_argument("train: data sampler returned wrong-length sequence");
            }
            batch[static_cast<std::size_t>(b)] = draw_masked_item(vocab, x0, len, config.mode, rng);
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        const double loss = model.loss_and_grad(batch, grad);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train: loss diverged (non-finite) at step " + std::to_string(step));
        }
        auto params = model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i] -= config.learning_rate * grad[i];
        }
        tokens_seen += static_cast<std::int64_t>(config.batch_size) * len;
        log.rows.push_back(TrainLogRow{step, loss / static_cast<double>(len), tokens_seen,
                                       flops(n_params, static_cast<double>(tokens_seen))});
    }
    return log;
}

// SFT-style example: prompt + response concatenated, response padded to
// total_len with the EOS token, prompt positions frozen in the forward
// process, loss only on masked response/padding positions. With probability
// prompt_dropout_prob the prompt is replaced by masks (the dummy condition),
// which trains the unconditional branch used by standard CFG.
inline TrainItem make_sft_item(const Vocabulary& vocab, const Sequence& prompt,
                               const Sequence& response, int total_len, Token eos_id, double t,
                               double prompt_dropout_prob, Rng& rng) {
    if (!vocab.valid_token(eos_id)) {
        throw std::invalid_argument("make_sft_item: eos_id must be a data-alphabet token");
    }
    const int p_len = static_cast<int>(prompt.size());
    const int r_len = static_cast<int>(response.size());
    if (p_len + r_len > total_len) {
        throw std::invalid_argument("make_sft_item: prompt+response longer than total_len");
    }
    Sequence full = prompt;
    full.insert(full.end(), response.begin(), response.end());
    full.resize(static_cast<std::size_t>(total_len), eos_id);
    vocab.require_sequence(full);

    const bool drop_prompt = prompt_dropout_prob > 0.0 && rng.uniform() < prompt_dropout_prob;

    std::vector<int> frozen(static_cast<std::size_t>(p_len));
    for (int i = 0; i < p_len; ++i) frozen[static_cast<std::size_t>(i)] = i;

    TrainItem item;
    item.xt = forward_mask_frozen(vocab, full, t, frozen, rng);
    if (drop_prompt) {
        for (int i = 0; i < p_len; ++i) {
            item.xt.tokens[static_cast<std::size_t>(i)] = vocab.mask_id();
        }
    }
    for (int i = p_len; i < total_len; ++i) {
        if (item.xt.is_masked(i)) {
            item.targets.emplace_back(i, full[static_cast<std::size_t>(i)]);
        }
    }
    item.weight = item.targets.empty() ? 0.0 : 1.0 / t;
    return item;
}

// One gradient evaluation of the SFT objective at noise level t.
inline double sft_step(const TrainableModel& model, const Sequence& prompt, const Sequence& response,
                       double t, Token eos_id, double prompt_dropout_prob, Rng& rng,
                       std::span<double> grad) {
    if (!(t > 0.0 && t <= 1.0)) {
        throw std::domain_error("sft_step: t must lie in (0,1]");
    }
    const Vocabulary vocab(model.K());
    const TrainItem item =
        make_sft_item(vocab, prompt, response, model.L(), eos_id, t, prompt_dropout_prob, rng);
    return model.loss_and_grad(std::span<const TrainItem>(&item, 1), grad);
}

// SGD over an SFT corpus: each batch item draws a pair and a noise level
// t ~ U(0,1], noises only the response (plus EOS padding), and weights the
// masked cross-entropy by 1/t.
inline TrainLog train_sft(TrainableModel& model, const std::vector<std::pair<Sequence, Sequence>>& pairs,
                          const TrainConfig& config, Token eos_id, Rng& rng) {
    config.validate();
    if (pairs.empty()) {
        throw std::invalid_argument("train_sft: empty paired corpus");
    }
    const Vocabulary vocab(model.K());
    TrainLog log;
    log.estimator = "uniform_t";
    log.rows.reserve(static_cast<std::size_t>(config.steps));
    std::vector<double> grad(model.num_params());
    std::vector<TrainItem> batch(static_cast<std::size_t>(config.batch_size));
    std::int64_t tokens_seen = 0;
    const double n_params = static_cast<double>(model.parameter_count());
    for (int step = 1; step <= config.steps; ++step) {
        for (int b = 0; b < config.batch_size; ++b) {
            const auto& [prompt, response] =
                pairs[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pairs.size())))];
            const double t = 1.0 - rng.uniform();
            batch[static_cast<std::size_t>(b)] = make_sft_item(
                vocab, prompt, response, model.L(), eos_id, t, config.prompt_dropout_prob, rng);
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        const double loss = model.loss_and_grad(batch, grad);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train_sft: loss diverged (non-finite) at step " +
                                     std::to_string(step));
        }
        auto params = model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i] -= config.learning_rate * grad[i];
        }
        tokens_seen += static_cast<std::int64_t>(config.batch_size) * model.L();
        log.rows.push_back(TrainLogRow{step, loss / static_cast<double>(model.L()), tokens_seen,
                                       flops(n_params, static_cast<double>(tokens_seen))});
    }
    return log;
}

} // namespace mdm
