#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cgdetect/common.hpp"
#include "cgdetect/dataset.hpp"
#include "cgdetect/swin.hpp"
#include "cgdetect/tensor.hpp"

namespace cgdetect {

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (learning_rate < 0) throw SpecError("train config: learning_rate must be >= 0");
        if (epochs < 1) throw SpecError("train config: epochs must be >= 1");
        if (batch_size < 1) throw SpecError("train config: batch_size must be >= 1");
    }
};

// Mean negative log-likelihood computed from logits via log-sum-exp; the
// softmax is never materialized on the loss path.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.shape[0] != labels.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t b = logits.shape[0];
    const std::size_t c = logits.shape[1];
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= c) {
            throw SpecError("cross_entropy: label " + std::to_string(l) + " outside [0," +
                            std::to_string(c) + ")");
        }
    }
    const T* pz = logits.data->data();
    std::vector<double> per_sample(b);
    for (std::size_t i = 0; i < b; ++i) {
        const T* row = pz + i * c;
        T mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        per_sample[i] = static_cast<double>(mx) + std::log(sum) -
                        static_cast<double>(row[static_cast<std::size_t>(labels[i])]);
    }
    Tensor<T> out = detail::make_result<T>({1}, logits.requires_grad);
    (*out.data)[0] = static_cast<T>(pairwise_sum(per_sample) / static_cast<double>(b));

    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    detail::attach_node(out, {logits}, [labels_copy, b, c](Node<T>& node) {
        const Tensor<T>& logits = node.parents[0];
        if (!logits.requires_grad) return;
        ensure_grad(logits);
        const T g = node.out_grad->v[0];
        const T* pz = logits.data->data();
        T* pg = logits.grad->v.data();
        const T inv_b = T(1) / static_cast<T>(b);
        for (std::size_t i = 0; i < b; ++i) {
            const T* row = pz + i * c;
            T mx = row[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            T sum = T(0);
            for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
            const T inv_sum = T(1) / sum;
            for (std::size_t j = 0; j < c; ++j) {
                const T p = std::exp(row[j] - mx) * inv_sum;
                const T y = (static_cast<std::size_t>((*labels_copy)[i]) == j) ? T(1) : T(0);
                pg[i * c + j] += g * (p - y) * inv_b;
            }
        }
    });
    return out;
}

// One elementwise Adam update with bias correction, no weight decay.
// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
void adam_step(std::vector<T>& values, const std::vector<T>& grads, std::vector<T>& m,
               std::vector<T>& v, std::size_t t, const TrainConfig& cfg) {
    if (grads.size() != values.size() || m.size() != values.size() || v.size() != values.size()) {
        throw SpecError("adam_step: state/gradient sizes do not match parameters");
    }
    if (t < 1) throw SpecError("adam_step: step counter must be >= 1");
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T lr = static_cast<T>(cfg.learning_rate);
    const T eps = static_cast<T>(cfg.eps);
    const T corr1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(t)));
    const T corr2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(t)));
    parallel_for(values.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const T g = grads[i];
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            const T m_hat = m[i] / corr1;
            const T v_hat = v[i] / corr2;
            values[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    });
}

// Adam over a named parameter collection. Missing gradients count as zero.
template <typename T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(TrainConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    void step(std::map<std::string, Tensor<T>>& params) {
        ++t_;
        for (auto& [name, p] : params) {
            auto& state = state_[name];
            if (state.m.empty()) {
                state.m.assign(p.numel(), T(0));
                state.v.assign(p.numel(), T(0));
            }
            const std::vector<T>* g;
            if (p.has_grad()) {
                g = &p.grad->v;
            } else {
                zero_scratch_.assign(p.numel(), T(0));
                g = &zero_scratch_;
            }
            adam_step(*p.data, *g, state.m, state.v, t_, cfg_);
        }
    }

    std::size_t steps() const { return t_; }

private:
    struct State {
        std::vector<T> m, v;
    };
    TrainConfig cfg_;
    std::map<std::string, State> state_;
    std::vector<T> zero_scratch_;
    std::size_t t_ = 0;
};

struct EpochStats {
    double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
};

struct EvalOutputs {
    double loss = 0;
    double accuracy = 0;
    std::vector<int> labels;
    std::vector<int> predictions;
    std::vector<double> scores;  // positive-class (CGI) probability
};

// Sequential full pass over a manifest; no graph is recorded.
template <typename T>
EvalOutputs evaluate(const SwinModel<T>& model, const Manifest& manifest, ColorSpace space,
                     std::size_t batch_size) {
    NoGradGuard ng;
    BatchStream stream(manifest, batch_size, 0, space, model.config.input_size);
    EvalOutputs out;
    std::vector<double> losses;
    for (std::size_t start = 0; start < manifest.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(manifest.size(), start + batch_size); ++i) {
            idx.push_back(i);
        }
        Batch batch = stream.load(idx);
        if (batch.labels.empty()) continue;
        ForwardResult<T> fwd = model.forward(batch.images);
        const std::size_t b = batch.labels.size();
        const std::size_t c = fwd.logits.shape[1];
        const T* pz = fwd.logits.data->data();
        for (std::size_t i = 0; i < b; ++i) {
            const T* row = pz + i * c;
            T mx = row[0];
            std::size_t argmax = 0;
            for (std::size_t j = 1; j < c; ++j) {
                if (row[j] > mx) {
                    mx = row[j];
                    argmax = j;
                }
            }
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
            const double lse = static_cast<double>(mx) + std::log(sum);
            losses.push_back(lse - static_cast<double>(row[static_cast<std::size_t>(batch.labels[i])]));
            out.labels.push_back(batch.labels[i]);
            out.predictions.push_back(static_cast<int>(argmax));
            out.scores.push_back(std::exp(static_cast<double>(row[1]) - lse));
        }
    }
    if (losses.empty()) throw DataError("evaluate: no decodable records");
    out.loss = pairwise_sum(losses) / static_cast<double>(losses.size());
    std::vector<double> hits(out.labels.size());
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
        hits[i] = out.labels[i] == out.predictions[i] ? 1.0 : 0.0;
    }
    out.accuracy = pairwise_sum(hits) / static_cast<double>(hits.size());
    return out;
}

struct TrainResult {
    TrainHistory history;
    std::size_t best_epoch = 0;  // 1-based epoch index of the best validation accuracy
};

// Epochs x batches of forward/backward/adam. Checkpoints final.swnt and
// best.swnt are written when checkpoint_dir is non-empty. Deterministic
// end-to-end for a fixed seed.
template <typename T>
TrainResult train(SwinModel<T>& model, const Manifest& train_manifest, const Manifest& val_manifest,
                  ColorSpace space, const TrainConfig& cfg, const std::string& checkpoint_dir = "",
                  const std::function<void(std::size_t, const EpochStats&)>& on_epoch = nullptr) {
    cfg.validate();
    if (train_manifest.empty() || val_manifest.empty()) {
        throw DataError("train: manifests must be non-empty");
    }
    AdamOptimizer<T> adam(cfg);
    BatchStream stream(train_manifest, cfg.batch_size, cfg.seed, space, model.config.input_size);
    TrainResult result;
    double best_val_acc = -1.0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto plan = stream.plan_epoch(epoch);
        for (std::size_t bi = 0; bi < plan.size(); ++bi) {
            Batch batch = stream.load(plan[bi]);
            if (batch.labels.empty()) continue;
            ForwardResult<T> fwd = model.forward(batch.images);
            Tensor<T> loss = cross_entropy(fwd.logits, batch.labels);
            if (!std::isfinite(static_cast<double>(loss.item()))) {
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                   ", batch " + std::to_string(bi));
            }
            for (auto& [name, p] : model.params()) p.zero_grad();
            backward(loss, /*release_intermediates=*/true);
            adam.step(model.params());
        }
        EpochStats stats;
        const EvalOutputs train_eval = evaluate(model, train_manifest, space, cfg.batch_size);
        const EvalOutputs val_eval = evaluate(model, val_manifest, space, cfg.batch_size);
        stats.train_loss = train_eval.loss;
        stats.train_acc = train_eval.accuracy;
        stats.val_loss = val_eval.loss;
        stats.val_acc = val_eval.accuracy;
        result.history.epochs.push_back(stats);
        if (val_eval.accuracy > best_val_acc) {
            best_val_acc = val_eval.accuracy;
            result.best_epoch = epoch + 1;
            if (!checkpoint_dir.empty()) {
                save_model(model, (std::filesystem::path(checkpoint_dir) / "best.swnt").string());
            }
        }
        if (on_epoch) on_epoch(epoch + 1, stats);
    }
    if (!checkpoint_dir.empty()) {
        save_model(model, (std::filesystem::path(checkpoint_dir) / "final.swnt").string());
    }
    return result;
}

inline void save_history(const TrainHistory& history, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("history: cannot write " + path);
    os << "epoch,train_loss,train_acc,val_loss,val_acc\n";
    for (std::size_t i = 0; i < history.epochs.size(); ++i) {
        const EpochStats& e = history.epochs[i];
        os << (i + 1) << ',' << format_number(e.train_loss) << ',' << format_number(e.train_acc)
           << ',' << format_number(e.val_loss) << ',' << format_number(e.val_acc) << '\n';
    }
}

}  // namespace cgdetect
