#pragma once

// Epistemic uncertainty via Monte-Carlo dropout, per-pass aleatoric variance
// extraction, and total-variance assembly. For classification all variances
// are computed on softmax probabilities of the predicted class so the
// aleatoric and epistemic components share units.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "twinuq/adf.hpp"
#include "twinuq/errors.hpp"
#include "twinuq/layers.hpp"
#include "twinuq/rng.hpp"
#include "twinuq/tensor.hpp"

namespace twinuq {

struct UncertaintyReport {
    int predicted_class = 0;
    std::vector<double> class_probabilities;  // sums to 1 within 1e-9
    double confidence = 0.0;                  // probability of the predicted class
    double sigma2_al = 0.0;
    double sigma2_ep = 0.0;
    double sigma2_total = 0.0;  // always exactly sigma2_al + sigma2_ep
    std::size_t k_passes = 0;
    std::size_t t_samples = 0;
    bool epistemic_degenerate = false;  // K == 1, epistemic reported as 0
};

inline double total_variance(double sigma2_al, double sigma2_ep) {
    if (sigma2_al < 0.0 || sigma2_ep < 0.0) {
        throw contract_error("total_variance: components must be non-negative, got " +
                             std::to_string(sigma2_al) + " and " + std::to_string(sigma2_ep));
    }
    return sigma2_al + sigma2_ep;
}

inline double aleatoric_aggregate(const std::vector<double>& per_pass) {
    if (per_pass.empty()) throw contract_error("aleatoric_aggregate: no passes");
    double s = 0.0;
    for (double v : per_pass) s += v;
    return s / static_cast<double>(per_pass.size());
}

namespace detail {

inline int argmax_lowest_tie(const std::vector<double>& v) {
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

inline std::vector<double> softmax_vec(const std::vector<double>& logits) {
    double hi = logits[0];
    for (double v : logits) hi = std::max(hi, v);
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - hi);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

// Unbiased variance (1 / (n-1)); zero when n < 2.
inline double unbiased_variance(const std::vector<double>& xs, double mean) {
    if (xs.size() < 2) return 0.0;
    double s = 0.0;
    for (double x : xs) s += (x - mean) * (x - mean);
    return s / static_cast<double>(xs.size() - 1);
}

}  // namespace detail

// One MC-dropout pass of a classification model, reduced to per-class
// statistics of the softmax probabilities.
struct ClassificationPass {
    std::vector<double> prob_mean;  // mean softmax probability per class (over T draws)
    std::vector<double> prob_var;   // unbiased variance of softmax probability per class
    std::vector<double> logit_var;  // propagated logit variance per class (ADF only)
};

// Aggregated K-pass MC-dropout prediction.
struct McDropoutResult {
    std::vector<ClassificationPass> passes;  // size K
    std::vector<double> mean_probs;          // mu_y per class
    int predicted_class = 0;
    double sigma2_ep = 0.0;  // unbiased over passes, on the predicted class probability
    bool degenerate_k = false;
};

namespace detail {

// Mean/variance over T sampled softmax vectors drawn from N(mu, diag sigma^2)
// in logit space. The draw stream comes from eps_rng; sigma == 0 collapses to
// a single deterministic softmax evaluation repeated T times.
inline void sampled_softmax_stats(const std::vector<double>& mu, const std::vector<double>& sigma,
                                  std::size_t t_samples, Rng& eps_rng, std::vector<double>& prob_mean,
                                  std::vector<double>& prob_var) {
    const std::size_t n = mu.size();
    prob_mean.assign(n, 0.0);
    std::vector<std::vector<double>> draws;
    draws.reserve(t_samples);
    std::vector<double> logits(n);
    for (std::size_t t = 0; t < t_samples; ++t) {
        for (std::size_t j = 0; j < n; ++j) logits[j] = mu[j] + sigma[j] * eps_rng.normal();
        draws.push_back(softmax_vec(logits));
        for (std::size_t j = 0; j < n; ++j) prob_mean[j] += draws.back()[j];
    }
    for (double& v : prob_mean) v /= static_cast<double>(t_samples);
    prob_var.assign(n, 0.0);
    if (t_samples >= 2) {
        for (const auto& d : draws)
            for (std::size_t j = 0; j < n; ++j)
                prob_var[j] += (d[j] - prob_mean[j]) * (d[j] - prob_mean[j]);
        for (double& v : prob_var) v /= static_cast<double>(t_samples - 1);
    }
}

}  // namespace detail

// Runs K stochastic forward passes of one sample (dropout masks active) and
// aggregates. `var_row` must be non-empty for ADF models and empty otherwise.
// Per-pass dropout streams split deterministically from `seed`; the T logit
// draws reuse one stream across passes so that p = 0 yields identical passes
// and exactly zero epistemic variance.
inline McDropoutResult mc_dropout_predict(Model& model, const std::vector<double>& mean_row,
                                          const std::vector<double>& var_row, std::size_t k_passes,
                                          std::size_t t_samples, std::uint64_t seed) {
    if (k_passes == 0) throw contract_error("mc_dropout_predict: K must be >= 1");
    if (t_samples == 0) throw contract_error("mc_dropout_predict: T must be >= 1");
    if (mean_row.size() != model.input_len) {
        throw contract_error("mc_dropout_predict: input length " + std::to_string(mean_row.size()) +
                             " does not match model input " + std::to_string(model.input_len));
    }
    const bool is_adf = model.kind == ModelKind::adf;
    if (is_adf && var_row.size() != mean_row.size()) {
        throw contract_error("mc_dropout_predict: ADF model needs an input variance row");
    }

    Tensor x({1, mean_row.size()}, mean_row);
    Tensor v = is_adf ? Tensor({1, var_row.size()}, var_row) : Tensor();

    McDropoutResult result;
    result.passes.reserve(k_passes);
    const std::uint64_t eps_seed = derive_seed(seed, {0xE525u});
    for (std::size_t k = 0; k < k_passes; ++k) {
        Rng mask_rng(derive_seed(seed, {0xD209u, k}));
        Rng eps_rng(eps_seed);
        ClassificationPass pass;
        if (model.kind == ModelKind::plain) {
            Tensor logits = forward_deterministic(model, x, PassMode::eval_mc, mask_rng);
            pass.prob_mean = detail::softmax_vec(logits.data());
            pass.prob_var.assign(pass.prob_mean.size(), 0.0);
        } else if (model.kind == ModelKind::het) {
            HetOutput out = forward_het(model, x, PassMode::eval_mc, mask_rng);
            std::vector<double> sigma(out.log_var.numel());
            for (std::size_t j = 0; j < sigma.size(); ++j) sigma[j] = std::exp(0.5 * out.log_var.at(j));
            detail::sampled_softmax_stats(out.mu.data(), sigma, t_samples, eps_rng, pass.prob_mean,
                                          pass.prob_var);
        } else {
            GaussianActivation logits =
                forward_adf(model, GaussianActivation(x, v), PassMode::eval_mc, mask_rng);
            std::vector<double> sigma(logits.variance.numel());
            for (std::size_t j = 0; j < sigma.size(); ++j)
                sigma[j] = std::sqrt(std::max(logits.variance.at(j), 0.0));
            detail::sampled_softmax_stats(logits.mean.data(), sigma, t_samples, eps_rng, pass.prob_mean,
                                          pass.prob_var);
            pass.logit_var = logits.variance.data();
        }
        result.passes.push_back(std::move(pass));
    }

    const std::size_t n = result.passes.front().prob_mean.size();
    result.mean_probs.assign(n, 0.0);
    for (const auto& p : result.passes)
        for (std::size_t j = 0; j < n; ++j) result.mean_probs[j] += p.prob_mean[j];
    for (double& v2 : result.mean_probs) v2 /= static_cast<double>(k_passes);
    result.predicted_class = detail::argmax_lowest_tie(result.mean_probs);

    std::vector<double> picked(k_passes);
    for (std::size_t k = 0; k < k_passes; ++k)
        picked[k] = result.passes[k].prob_mean[static_cast<std::size_t>(result.predicted_class)];
    result.degenerate_k = k_passes < 2;
    result.sigma2_ep = detail::unbiased_variance(
        picked, result.mean_probs[static_cast<std::size_t>(result.predicted_class)]);
    return result;
}

// Per-pass aleatoric variance for the reported class: explicit models read the
// propagated logit variance, implicit models the softmax-probability variance
// over the T draws. Plain models have no aleatoric channel.
inline std::vector<double> aleatoric_per_pass(ModelKind kind, const McDropoutResult& result,
                                              int target_class) {
    if (kind == ModelKind::plain) {
        throw contract_error("aleatoric_per_pass: plain model has no aleatoric channel");
    }
    std::vector<double> out;
    out.reserve(result.passes.size());
    for (const auto& pass : result.passes) {
        if (kind == ModelKind::adf) {
            out.push_back(pass.logit_var[static_cast<std::size_t>(target_class)]);
        } else {
            out.push_back(pass.prob_var[static_cast<std::size_t>(target_class)]);
        }
    }
    return out;
}

// Full per-sample report: Eq-style decomposition sigma2_total = al + ep.
inline UncertaintyReport assemble_report(ModelKind kind, const McDropoutResult& mc, std::size_t t_samples) {
    UncertaintyReport r;
    r.predicted_class = mc.predicted_class;
    r.class_probabilities = mc.mean_probs;
    r.confidence = mc.mean_probs[static_cast<std::size_t>(mc.predicted_class)];
    r.sigma2_ep = mc.sigma2_ep;
    r.sigma2_al =
        kind == ModelKind::plain ? 0.0 : aleatoric_aggregate(aleatoric_per_pass(kind, mc, mc.predicted_class));
    r.sigma2_total = total_variance(r.sigma2_al, r.sigma2_ep);
    r.k_passes = mc.passes.size();
    r.t_samples = t_samples;
    r.epistemic_degenerate = mc.degenerate_k;
    return r;
}

// Regression-path MC dropout for models whose heads emit a mean (and for HET a
// log-variance): per-pass predictive means and aleatoric variances.
struct McRegressionResult {
    std::vector<double> pass_means;      // K predictions (first output)
    std::vector<double> pass_aleatoric;  // K per-pass variances
    double mu_y = 0.0;
    double sigma2_ep = 0.0;
    double sigma2_al = 0.0;
    double sigma2_total = 0.0;
};

inline McRegressionResult mc_dropout_regress(Model& model, const std::vector<double>& mean_row,
                                             std::size_t k_passes, std::uint64_t seed) {
    if (k_passes == 0) throw contract_error("mc_dropout_regress: K must be >= 1");
    Tensor x({1, mean_row.size()}, mean_row);
    McRegressionResult r;
    r.pass_means.reserve(k_passes);
    for (std::size_t k = 0; k < k_passes; ++k) {
        Rng mask_rng(derive_seed(seed, {0xD209u, k}));
        if (model.kind == ModelKind::het) {
            HetOutput out = forward_het(model, x, PassMode::eval_mc, mask_rng);
            r.pass_means.push_back(out.mu.at(0));
            r.pass_aleatoric.push_back(std::exp(out.log_var.at(0)));
        } else {
            Tensor out = forward_deterministic(model, x, PassMode::eval_mc, mask_rng);
            r.pass_means.push_back(out.at(0));
            r.pass_aleatoric.push_back(0.0);
        }
    }
    double s = 0.0;
    for (double m : r.pass_means) s += m;
    r.mu_y = s / static_cast<double>(k_passes);
    r.sigma2_ep = detail::unbiased_variance(r.pass_means, r.mu_y);
    r.sigma2_al = aleatoric_aggregate(r.pass_aleatoric);
    r.sigma2_total = total_variance(r.sigma2_al, r.sigma2_ep);
    return r;
}

}  // namespace twinuq
