#pragma once

// Training protocol: Adam (lr 1e-3), batches of 128, stratified 0.7/0.1/0.2
// split, learning-rate decay on a 50-epoch validation plateau, best-validation
// checkpoint retention. Deterministic end to end for a fixed seed: batch
// order, dropout masks and logit draws all derive from the master seed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "twinuq/dataset_io.hpp"
#include "twinuq/errors.hpp"
#include "twinuq/layers.hpp"
#include "twinuq/losses.hpp"
#include "twinuq/rng.hpp"
#include "twinuq/tensor.hpp"

namespace twinuq {

// ---------------------------------------------------------------------------
// Model inputs assembled from a dataset
// ---------------------------------------------------------------------------

enum class InputKind { raw, twin_mean, twin_stats };

inline std::string to_string(InputKind k) {
    switch (k) {
        case InputKind::raw: return "raw";
        case InputKind::twin_mean: return "twin_mean";
        default: return "twin_stats";
    }
}
inline InputKind input_kind_from_string(const std::string& s) {
    if (s == "raw") return InputKind::raw;
    if (s == "twin_mean") return InputKind::twin_mean;
    if (s == "twin_stats") return InputKind::twin_stats;
    throw config_error("unknown input kind '" + s + "'");
}

struct SampleSet {
    Tensor means;      // [N x window_len]
    Tensor variances;  // [N x window_len] for twin_stats inputs, empty otherwise
    std::vector<int> labels;
    std::vector<float> kappas;
    std::vector<int> twin_ids;  // 0 for fused (mean / stats) rows
    InputKind kind = InputKind::raw;

    std::size_t size() const { return labels.size(); }
    bool has_variance() const { return !variances.empty(); }
};

namespace detail {

inline std::vector<double> window_as_double(const LabeledWindow& w) {
    return std::vector<double>(w.samples.begin(), w.samples.end());
}

}  // namespace detail

// One row per (twin, condition), twins pooled in the given order.
inline SampleSet raw_window_set(const Dataset& ds, const std::vector<std::size_t>& twin_indices,
                                const std::vector<std::size_t>& conditions) {
    if (twin_indices.empty()) throw contract_error("raw_window_set: no twins selected");
    const std::size_t n = ds.manifest.window_len;
    SampleSet set;
    set.kind = InputKind::raw;
    std::vector<double> flat;
    flat.reserve(twin_indices.size() * conditions.size() * n);
    for (std::size_t ti : twin_indices) {
        for (std::size_t c : conditions) {
            const LabeledWindow& w = ds.window(ti, c);
            for (float s : w.samples) flat.push_back(static_cast<double>(s));
            set.labels.push_back(w.class_label);
            set.kappas.push_back(w.kappa);
            set.twin_ids.push_back(w.twin_id);
        }
    }
    set.means = Tensor({set.labels.size(), n}, std::move(flat));
    return set;
}

// One row per condition: the point-wise mean of the selected twins' windows
// (information fusion); with twin_stats also the unbiased cross-twin variance.
inline SampleSet fused_set(const Dataset& ds, const std::vector<std::size_t>& twin_indices,
                           const std::vector<std::size_t>& conditions, InputKind kind) {
    if (kind == InputKind::twin_stats && twin_indices.size() < 2) {
        throw contract_error("fused_set: cross-twin variance is undefined for " +
                             std::to_string(twin_indices.size()) + " twin(s)");
    }
    if (twin_indices.empty()) throw contract_error("fused_set: no twins selected");
    const std::size_t n = ds.manifest.window_len;
    SampleSet set;
    set.kind = kind;
    std::vector<double> means, vars;
    means.reserve(conditions.size() * n);
    if (kind == InputKind::twin_stats) vars.reserve(conditions.size() * n);
    std::vector<const LabeledWindow*> group(twin_indices.size());
    for (std::size_t c : conditions) {
        for (std::size_t k = 0; k < twin_indices.size(); ++k) group[k] = &ds.window(twin_indices[k], c);
        if (twin_indices.size() == 1) {
            for (float s : group[0]->samples) means.push_back(static_cast<double>(s));
        } else {
            GaussianActivation stats = window_stats(group);
            means.insert(means.end(), stats.mean.data().begin(), stats.mean.data().end());
            if (kind == InputKind::twin_stats)
                vars.insert(vars.end(), stats.variance.data().begin(), stats.variance.data().end());
        }
        set.labels.push_back(group[0]->class_label);
        set.kappas.push_back(group[0]->kappa);
        set.twin_ids.push_back(0);
    }
    set.means = Tensor({set.labels.size(), n}, std::move(means));
    if (kind == InputKind::twin_stats) set.variances = Tensor({set.labels.size(), n}, std::move(vars));
    return set;
}

inline SampleSet subset(const SampleSet& s, const std::vector<std::size_t>& rows) {
    const std::size_t n = s.means.dim(1);
    SampleSet out;
    out.kind = s.kind;
    std::vector<double> means, vars;
    means.reserve(rows.size() * n);
    for (std::size_t r : rows) {
        for (std::size_t j = 0; j < n; ++j) means.push_back(s.means.at(r, j));
        if (s.has_variance())
            for (std::size_t j = 0; j < n; ++j) vars.push_back(s.variances.at(r, j));
        out.labels.push_back(s.labels[r]);
        out.kappas.push_back(s.kappas[r]);
        out.twin_ids.push_back(s.twin_ids[r]);
    }
    out.means = Tensor({rows.size(), n}, std::move(means));
    if (s.has_variance()) out.variances = Tensor({rows.size(), n}, std::move(vars));
    return out;
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

// Disjoint, exhaustive, stratified by class, deterministic per seed. Per-class
// allocation uses largest-remainder apportionment so proportions hold within
// one sample per class per split.
inline SplitIndices split_dataset(const std::vector<int>& labels, const std::array<double, 3>& fractions,
                                  std::uint64_t seed) {
    if (labels.empty()) throw contract_error("split_dataset: empty dataset");
    double fsum = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw contract_error("split_dataset: negative fraction");
        fsum += f;
    }
    if (std::abs(fsum - 1.0) > 1e-9) {
        throw contract_error("split_dataset: fractions sum to " + std::to_string(fsum) + ", expected 1");
    }
    std::unordered_map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    std::vector<int> classes;
    for (const auto& [c, _] : by_class) classes.push_back(c);
    std::sort(classes.begin(), classes.end());

    SplitIndices out;
    for (int c : classes) {
        auto& members = by_class[c];
        Rng rng(derive_seed(seed, {0x5B117u, static_cast<std::uint64_t>(c)}));
        rng.shuffle(members);
        const std::size_t n = members.size();
        std::array<std::size_t, 3> take{};
        std::array<double, 3> remainder{};
        std::size_t assigned = 0;
        for (int k = 0; k < 3; ++k) {
            const double exact = fractions[static_cast<std::size_t>(k)] * static_cast<double>(n);
            take[static_cast<std::size_t>(k)] = static_cast<std::size_t>(std::floor(exact));
            remainder[static_cast<std::size_t>(k)] = exact - std::floor(exact);
            assigned += take[static_cast<std::size_t>(k)];
        }
        while (assigned < n) {
            int best = 0;
            for (int k = 1; k < 3; ++k)
                if (remainder[static_cast<std::size_t>(k)] > remainder[static_cast<std::size_t>(best)])
                    best = k;
            take[static_cast<std::size_t>(best)] += 1;
            remainder[static_cast<std::size_t>(best)] = -1.0;
            ++assigned;
        }
        std::size_t pos = 0;
        for (std::size_t i = 0; i < take[0]; ++i) out.train.push_back(members[pos++]);
        for (std::size_t i = 0; i < take[1]; ++i) out.val.push_back(members[pos++]);
        for (std::size_t i = 0; i < take[2]; ++i) out.test.push_back(members[pos++]);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

// ---------------------------------------------------------------------------
// Adam optimizer
// ---------------------------------------------------------------------------

class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), 0.0);
            v_[i].assign(params_[i].numel(), 0.0);
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

    // Standard bias-corrected update; parameters without a gradient entry are
    // treated as zero-gradient (their moments still decay).
    void step(const std::unordered_map<std::uint64_t, Tensor>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            auto it = grads.find(p.id());
            const std::vector<double>* g = it == grads.end() ? nullptr : &it->second.data();
            std::vector<double> next = p.data();
            for (std::size_t j = 0; j < next.size(); ++j) {
                const double gj = g ? (*g)[j] : 0.0;
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * gj;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                next[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
            p.assign(next);
        }
    }

private:
    std::vector<Tensor> params_;
    double lr_, beta1_, beta2_, eps_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Plateau learning-rate schedule
// ---------------------------------------------------------------------------

class PlateauScheduler {
public:
    PlateauScheduler(std::size_t patience, double factor, double min_delta = 1e-6)
        : patience_(patience), factor_(factor), min_delta_(min_delta) {
        if (patience_ < 1) throw contract_error("PlateauScheduler: patience must be >= 1");
    }

    // Feed one validation loss; returns the (possibly reduced) learning rate.
    double observe(double val_loss, double lr) {
        if (val_loss < best_ - min_delta_) {
            best_ = val_loss;
            since_ = 0;
            return lr;
        }
        if (++since_ >= patience_) {
            since_ = 0;  // no double-fire on the epoch after a reduction
            return lr * factor_;
        }
        return lr;
    }

private:
    std::size_t patience_;
    double factor_;
    double min_delta_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t since_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    ModelKind kind = ModelKind::plain;
    Arch arch = Arch::fc;
    double learning_rate = 1e-3;
    std::size_t epochs = 500;
    std::size_t batch_size = 128;
    std::size_t plateau_patience = 50;
    double lr_decay_factor = 0.1;
    std::array<double, 3> split_fractions{0.7, 0.1, 0.2};
    std::uint64_t seed = 1;
    double dropout_p = 0.2;
    std::size_t t_train = 50;  // logit draws per loss evaluation while training
    std::size_t t_eval = 100;  // logit draws at evaluation

    void validate() const {
        if (batch_size < 1) throw contract_error("TrainConfig: batch_size must be >= 1");
        double s = 0.0;
        for (double f : split_fractions) s += f;
        if (std::abs(s - 1.0) > 1e-9) throw contract_error("TrainConfig: split fractions must sum to 1");
        if (learning_rate <= 0.0) throw contract_error("TrainConfig: learning rate must be positive");
        if (epochs < 1) throw contract_error("TrainConfig: epochs must be >= 1");
    }
};

struct EpochMetrics {
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    Model model;  // best-validation weights, rounded to float32
    std::vector<EpochMetrics> history;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;      // evaluated with the rounded weights
    double best_val_accuracy = 0.0;  // evaluated with the rounded weights
    SplitIndices split;
};

namespace detail {

// Snapshot of everything the checkpoint stores: trainable tensors and the
// batchnorm running statistics, all rounded through float32 (the blob type).
struct ModelSnapshot {
    std::vector<std::vector<double>> params;
    std::vector<std::vector<double>> running;
};

inline double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline ModelSnapshot snapshot_model(const Model& m) {
    ModelSnapshot snap;
    for (const Tensor& p : m.parameters()) {
        std::vector<double> rounded(p.numel());
        for (std::size_t i = 0; i < rounded.size(); ++i) rounded[i] = round_f32(p.at(i));
        snap.params.push_back(std::move(rounded));
    }
    auto push_running = [&snap](const std::vector<double>& v) {
        std::vector<double> rounded(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) rounded[i] = round_f32(v[i]);
        snap.running.push_back(std::move(rounded));
    };
    for (const Layer& l : m.trunk) {
        if (l.kind == LayerKind::batchnorm) {
            push_running(l.running_mean);
            push_running(l.running_var);
        }
    }
    return snap;
}

inline void restore_model(Model& m, const ModelSnapshot& snap) {
    auto params = m.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].assign(snap.params[i]);
    std::size_t r = 0;
    for (Layer& l : m.trunk) {
        if (l.kind == LayerKind::batchnorm) {
            l.running_mean = snap.running[r++];
            l.running_var = snap.running[r++];
        }
    }
}

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& order, std::size_t lo,
                          std::size_t hi) {
    const std::size_t n = t.dim(1);
    std::vector<double> out;
    out.reserve((hi - lo) * n);
    for (std::size_t k = lo; k < hi; ++k)
        for (std::size_t j = 0; j < n; ++j) out.push_back(t.at(order[k], j));
    return Tensor({hi - lo, n}, std::move(out));
}

}  // namespace detail

// Model-kind-appropriate loss on a batch; `rng` drives the logit draws for the
// sampled losses, dropout masks come from `mask_rng` inside the forward call.
inline Tensor batch_loss(Model& model, const Tensor& means, const Tensor& variances,
                         const std::vector<int>& labels, PassMode mode, std::size_t t_samples,
                         Rng& mask_rng, Rng& loss_rng, GradientTape* tape) {
    switch (model.kind) {
        case ModelKind::plain: {
            Tensor logits = forward_deterministic(model, means, mode, mask_rng, tape);
            return cross_entropy_plain(logits, labels, tape);
        }
        case ModelKind::het: {
            HetOutput out = forward_het(model, means, mode, mask_rng, tape);
            return het_classification_loss(out, labels, t_samples, loss_rng, tape);
        }
        default: {
            GaussianActivation logits =
                forward_adf(model, GaussianActivation(means, variances), mode, mask_rng, tape);
            return adf_classification_loss(logits, labels, t_samples, loss_rng, tape);
        }
    }
}

// Mean logits of a sample set under eval mode (dropout off, running stats).
inline Tensor eval_logits(Model& model, const SampleSet& set) {
    Rng unused(0);
    if (model.kind == ModelKind::adf) {
        Tensor vars = set.has_variance() ? set.variances : Tensor::zeros(set.means.shape());
        return forward_adf(model, GaussianActivation(set.means, vars), PassMode::eval, unused).mean;
    }
    if (model.kind == ModelKind::het) {
        return forward_het(model, set.means, PassMode::eval, unused).mu;
    }
    return forward_deterministic(model, set.means, PassMode::eval, unused);
}

inline double accuracy_from_logits(const Tensor& logits, const std::vector<int>& labels) {
    if (labels.empty()) throw contract_error("accuracy: empty evaluation set");
    std::size_t correct = 0;
    const std::size_t n = logits.dim(1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        int best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (logits.at(i, j) > logits.at(i, static_cast<std::size_t>(best))) best = static_cast<int>(j);
        if (best == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Deterministic validation loss: eval-mode forward, fixed draw stream per call
// so the plateau scheduler sees comparable numbers across epochs.
inline double validation_loss(Model& model, const SampleSet& val, std::size_t t_eval, std::uint64_t seed) {
    Rng mask_unused(0);
    Rng loss_rng(derive_seed(seed, {0x7A15EDu}));
    Tensor vars = val.has_variance() ? val.variances : Tensor();
    Tensor loss =
        batch_loss(model, val.means, vars, val.labels, PassMode::eval, t_eval, mask_unused, loss_rng, nullptr);
    return loss.value();
}

inline TrainResult train_model(const SampleSet& data, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.kind == ModelKind::adf && !data.has_variance()) {
        throw config_error("ADF training requires mean/variance inputs (twin_stats), got " +
                           to_string(data.kind));
    }
    if (cfg.kind != ModelKind::adf && data.has_variance()) {
        throw config_error(to_string(cfg.kind) + " training expects deterministic inputs, got twin_stats");
    }
    if (data.size() == 0) throw config_error("train_model: empty sample set");

    TrainResult result;
    result.split = split_dataset(data.labels, cfg.split_fractions, cfg.seed);
    if (result.split.train.empty() || result.split.val.empty()) {
        throw config_error("train_model: split produced an empty train or validation set");
    }
    SampleSet val = subset(data, result.split.val);

    Rng init_rng(derive_seed(cfg.seed, {0x1217u}));
    result.model = build_model(cfg.arch, cfg.kind, data.means.dim(1), *std::max_element(
                                   data.labels.begin(), data.labels.end()) + 1,
                               init_rng, cfg.dropout_p);
    Model& model = result.model;

    Adam optimizer(model.parameters(), cfg.learning_rate);
    PlateauScheduler scheduler(cfg.plateau_patience, cfg.lr_decay_factor);

    double best_val = std::numeric_limits<double>::infinity();
    detail::ModelSnapshot best_snapshot = detail::snapshot_model(model);
    result.best_epoch = 0;

    std::vector<std::size_t> order = result.split.train;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, {0x50FFu, epoch}));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t lo = 0, batch_index = 0; lo < order.size(); lo += cfg.batch_size, ++batch_index) {
            const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
            if (hi - lo < 2) continue;  // batch statistics are undefined for one sample
            Tensor means = detail::gather_rows(data.means, order, lo, hi);
            Tensor vars = data.has_variance() ? detail::gather_rows(data.variances, order, lo, hi) : Tensor();
            std::vector<int> labels;
            labels.reserve(hi - lo);
            for (std::size_t k = lo; k < hi; ++k) labels.push_back(data.labels[order[k]]);

            Rng mask_rng(derive_seed(cfg.seed, {0xD80Du, epoch, batch_index}));
            Rng loss_rng(derive_seed(cfg.seed, {0x105Du, epoch, batch_index}));
            GradientTape tape;
            Tensor loss = batch_loss(model, means, vars, labels, PassMode::train, cfg.t_train, mask_rng,
                                     loss_rng, &tape);
            epoch_loss += loss.value() * static_cast<double>(hi - lo);
            seen += hi - lo;
            optimizer.step(tape.backward(loss));
        }

        EpochMetrics metrics;
        metrics.train_loss = seen ? epoch_loss / static_cast<double>(seen) : 0.0;
        metrics.val_loss = validation_loss(model, val, cfg.t_eval, cfg.seed);
        metrics.val_accuracy = accuracy_from_logits(eval_logits(model, val), val.labels);
        metrics.lr = optimizer.lr();
        result.history.push_back(metrics);

        if (metrics.val_loss < best_val) {
            best_val = metrics.val_loss;
            best_snapshot = detail::snapshot_model(model);
            result.best_epoch = epoch;
        }
        optimizer.set_lr(scheduler.observe(metrics.val_loss, optimizer.lr()));
    }

    detail::restore_model(model, best_snapshot);
    result.best_val_loss = validation_loss(model, val, cfg.t_eval, cfg.seed);
    result.best_val_accuracy = accuracy_from_logits(eval_logits(model, val), val.labels);
    return result;
}

}  // namespace twinuq
