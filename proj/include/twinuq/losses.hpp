#pragma once

// Training losses for the three model kinds. Classification losses operate on
// logits; sampled variants draw T logit vectors from the predicted Gaussian
// and minimize the negative log of the Monte-Carlo average true-class softmax
// probability (the learned-loss-attenuation form). All log-sum-exp reductions
// are max-shifted, so losses stay finite for logits up to ~1e300.

#include <cmath>
#include <vector>

#include "twinuq/adf.hpp"
#include "twinuq/errors.hpp"
#include "twinuq/layers.hpp"
#include "twinuq/rng.hpp"
#include "twinuq/tensor.hpp"

namespace twinuq {

namespace detail {

inline void check_classes(const std::vector<int>& classes, std::size_t n_classes, std::size_t rows) {
    if (classes.size() != rows) {
        throw contract_error("classification loss: " + std::to_string(classes.size()) +
                             " labels for " + std::to_string(rows) + " samples");
    }
    for (int c : classes) {
        if (c < 0 || static_cast<std::size_t>(c) >= n_classes) {
            throw contract_error("classification loss: class index " + std::to_string(c) +
                                 " outside [0, " + std::to_string(n_classes) + ")");
        }
    }
}

inline Tensor as_batch(const Tensor& t, GradientTape* tape) {
    return t.ndim() == 1 ? reshape(t, {1, t.numel()}, tape) : t;
}

}  // namespace detail

// Gaussian negative log-likelihood with a log-variance parameterization:
// mean over all entries of  (y - mu)^2 / (2 exp(s)) + s / 2.
inline Tensor nll_regression(const Tensor& y, const Tensor& mu, const Tensor& log_var,
                             GradientTape* tape = nullptr) {
    detail::require_same_shape(y, mu, "nll_regression");
    detail::require_same_shape(mu, log_var, "nll_regression");
    Tensor residual = sub(y, mu, tape);
    Tensor precision = exp(neg(log_var, tape), tape);
    Tensor fit = scale(mul(square(residual, tape), precision, tape), 0.5, tape);
    Tensor penalty = scale(log_var, 0.5, tape);
    return mean_all(add(fit, penalty, tape), tape);
}

// T logit samples a~_t = mu + sigma o eps_t, eps_t ~ N(0, I). Deterministic
// given the rng state; rows are the draws.
inline Tensor sample_logits(const Tensor& mu, const Tensor& sigma, std::size_t t_samples, Rng& rng,
                            GradientTape* tape = nullptr) {
    if (t_samples == 0) throw contract_error("sample_logits: T must be >= 1");
    detail::require_same_shape(mu, sigma, "sample_logits");
    if (mu.ndim() != 1) throw contract_error("sample_logits: expected 1-D logits, got " + shape_str(mu.shape()));
    for (double s : sigma.data()) {
        if (s < 0.0) throw contract_error("sample_logits: negative sigma " + std::to_string(s));
    }
    const std::size_t n = mu.numel();
    std::vector<double> eps(t_samples * n);
    for (double& e : eps) e = rng.normal();
    Tensor noise({t_samples, n}, std::move(eps));
    Tensor mu_rows = tile_rows(mu, t_samples, tape);
    Tensor sigma_rows = tile_rows(sigma, t_samples, tape);
    return add(mu_rows, mul(sigma_rows, noise, tape), tape);
}

// Standard stable softmax cross-entropy, batched: logits [m x n], one label
// per row; mean over the batch.
inline Tensor cross_entropy_plain(const Tensor& logits_in, const std::vector<int>& classes,
                                  GradientTape* tape = nullptr) {
    Tensor logits = detail::as_batch(logits_in, tape);
    detail::check_classes(classes, logits.dim(1), logits.dim(0));
    Tensor lse = logsumexp_rows(logits, tape);
    Tensor picked = select_per_row(logits, classes, tape);
    return scale(sum_all(sub(lse, picked, tape), tape), 1.0 / static_cast<double>(logits.dim(0)), tape);
}

inline Tensor cross_entropy_plain(const Tensor& logits, int true_class, GradientTape* tape = nullptr) {
    return cross_entropy_plain(logits, std::vector<int>{true_class}, tape);
}

// -log[(1/T) sum_t softmax(a~_t)_c], averaged over the batch. With sigma = 0
// and T = 1 this reduces bit-for-bit to cross_entropy_plain.
inline Tensor nll_classification_sampled(const Tensor& mu_in, const Tensor& sigma_in,
                                         const std::vector<int>& classes, std::size_t t_samples, Rng& rng,
                                         GradientTape* tape = nullptr) {
    if (t_samples == 0) throw contract_error("nll_classification_sampled: T must be >= 1");
    Tensor mu = detail::as_batch(mu_in, tape);
    Tensor sigma = detail::as_batch(sigma_in, tape);
    detail::require_same_shape(mu, sigma, "nll_classification_sampled");
    detail::check_classes(classes, mu.dim(1), mu.dim(0));
    for (double s : sigma.data()) {
        if (s < 0.0) throw contract_error("nll_classification_sampled: negative sigma " + std::to_string(s));
    }
    const std::size_t batch = mu.dim(0), n = mu.dim(1);

    std::vector<double> eps(batch * t_samples * n);
    for (double& e : eps) e = rng.normal();
    Tensor noise({batch * t_samples, n}, std::move(eps));

    Tensor draws = add(repeat_rows(mu, t_samples, tape), mul(repeat_rows(sigma, t_samples, tape), noise, tape),
                       tape);
    Tensor lse = logsumexp_rows(draws, tape);
    std::vector<int> classes_rep(batch * t_samples);
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t t = 0; t < t_samples; ++t) classes_rep[i * t_samples + t] = classes[i];
    Tensor log_prob = sub(select_per_row(draws, classes_rep, tape), lse, tape);  // [batch*T]
    Tensor per_draw = reshape(log_prob, {batch, t_samples}, tape);
    Tensor log_mean_prob =
        add_scalar(logsumexp_rows(per_draw, tape), -std::log(static_cast<double>(t_samples)), tape);
    return scale(sum_all(log_mean_prob, tape), -1.0 / static_cast<double>(batch), tape);
}

inline Tensor nll_classification_sampled(const Tensor& mu, const Tensor& sigma, int true_class,
                                         std::size_t t_samples, Rng& rng, GradientTape* tape = nullptr) {
    return nll_classification_sampled(mu, sigma, std::vector<int>{true_class}, t_samples, rng, tape);
}

// Sampled classification loss on propagated logit moments; gradients flow
// through both the mean and the variance path.
inline Tensor adf_classification_loss(const GaussianActivation& logits, const std::vector<int>& classes,
                                      std::size_t t_samples, Rng& rng, GradientTape* tape = nullptr) {
    Tensor sigma = sqrt_guarded(logits.variance, tape);
    return nll_classification_sampled(logits.mean, sigma, classes, t_samples, rng, tape);
}

inline Tensor adf_classification_loss(const GaussianActivation& logits, int true_class,
                                      std::size_t t_samples, Rng& rng, GradientTape* tape = nullptr) {
    return adf_classification_loss(logits, std::vector<int>{true_class}, t_samples, rng, tape);
}

// Sampled classification loss on heteroscedastic head outputs; the head emits
// log-variances, so sigma = exp(s / 2) is positive by construction.
inline Tensor het_classification_loss(const HetOutput& out, const std::vector<int>& classes,
                                      std::size_t t_samples, Rng& rng, GradientTape* tape = nullptr) {
    Tensor sigma = exp(scale(out.log_var, 0.5, tape), tape);
    return nll_classification_sampled(out.mu, sigma, classes, t_samples, rng, tape);
}

}  // namespace twinuq
