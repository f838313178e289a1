#pragma once

// Assumed-density-filtering layer transforms. Each deterministic layer has a
// variational counterpart mapping a factorized Gaussian over activations to
// the next layer's factorized Gaussian by moment matching. Off-diagonal
// covariance is discarded after every transform; that is the defining
// approximation.

#include <cstdint>
#include <vector>

#include "twinuq/errors.hpp"
#include "twinuq/rng.hpp"
#include "twinuq/tensor.hpp"

namespace twinuq {

// Variances below this are treated as exactly deterministic, and divisions /
// square roots of variances are guarded at this floor.
inline constexpr double kVarGuard = 1e-12;

struct GaussianActivation {
    Tensor mean;
    Tensor variance;

    GaussianActivation(Tensor mean_in, Tensor variance_in)
        : mean(std::move(mean_in)), variance(std::move(variance_in)) {
        if (mean.shape() != variance.shape()) {
            throw contract_error("GaussianActivation: mean " + shape_str(mean.shape()) +
                                 " and variance " + shape_str(variance.shape()) + " differ");
        }
        for (double v : variance.data()) {
            if (v < 0.0) {
                throw contract_error("GaussianActivation: negative variance " + std::to_string(v));
            }
        }
    }

    static GaussianActivation deterministic(Tensor mean) {
        Tensor var = Tensor::zeros(mean.shape());
        return GaussianActivation(std::move(mean), std::move(var));
    }
};

// Exact propagation through an affine map: mean' = mean.W^T + b and
// variance' = variance.(W o W)^T under the factorized-independence assumption.
// mean may be [in] or [batch x in]; weights are [out x in].
inline GaussianActivation linear_adf(const GaussianActivation& in, const Tensor& weights,
                                     const Tensor& bias, GradientTape* tape = nullptr) {
    const bool vec = in.mean.ndim() == 1;
    Tensor mu = vec ? reshape(in.mean, {1, in.mean.numel()}, tape) : in.mean;
    Tensor va = vec ? reshape(in.variance, {1, in.variance.numel()}, tape) : in.variance;
    if (mu.ndim() != 2 || weights.ndim() != 2 || mu.dim(1) != weights.dim(1)) {
        throw contract_error("linear_adf: input " + shape_str(in.mean.shape()) +
                             " incompatible with weights " + shape_str(weights.shape()));
    }
    Tensor wt = transpose(weights, tape);
    Tensor mean_out = matmul(mu, wt, tape);
    if (!bias.empty()) mean_out = add_channel(mean_out, bias, 1, tape);
    Tensor var_out = matmul(va, transpose(square(weights, tape), tape), tape);
    if (vec) {
        mean_out = reshape(mean_out, {mean_out.numel()}, tape);
        var_out = reshape(var_out, {var_out.numel()}, tape);
    }
    return GaussianActivation(std::move(mean_out), std::move(var_out));
}

// Moments of the rectified Gaussian. With z = mu/sigma:
//   mean'     = mu.Phi(z) + sigma.phi(z)
//   variance' = (mu^2 + v).Phi(z) + mu.sigma.phi(z) - mean'^2
// Elements with v < kVarGuard collapse to the deterministic max(mu, 0) with
// zero variance, keeping exact zeros exact.
inline GaussianActivation relu_adf(const GaussianActivation& in, GradientTape* tape = nullptr) {
    const Tensor& mu = in.mean;
    const Tensor& v = in.variance;
    Tensor v_safe = clamp_min(v, kVarGuard, tape);
    Tensor sigma = sqrt_guarded(v_safe, tape);
    Tensor z = div(mu, sigma, tape);
    Tensor cdf = gauss_cdf(z, tape);
    Tensor pdf = gauss_pdf(z, tape);
    Tensor mean_smooth = add(mul(mu, cdf, tape), mul(sigma, pdf, tape), tape);
    Tensor second_moment =
        add(mul(add(square(mu, tape), v_safe, tape), cdf, tape), mul(mul(mu, sigma, tape), pdf, tape), tape);
    Tensor var_smooth = clamp_min(sub(second_moment, square(mean_smooth, tape), tape), 0.0, tape);

    std::vector<std::uint8_t> degenerate(v.numel());
    bool any = false;
    for (std::size_t i = 0; i < v.numel(); ++i) {
        degenerate[i] = v.data()[i] < kVarGuard;
        any |= degenerate[i] != 0;
    }
    if (!any) return GaussianActivation(std::move(mean_smooth), std::move(var_smooth));
    Tensor mean_out = select(degenerate, relu(mu, tape), mean_smooth, tape);
    Tensor var_out = select(degenerate, Tensor::zeros(v.shape()), var_smooth, tape);
    return GaussianActivation(std::move(mean_out), std::move(var_out));
}

// Channel-wise affine propagation of a convolution: the variance path uses the
// squared kernels and no bias.
inline GaussianActivation conv1d_adf(const GaussianActivation& in, const Tensor& kernels,
                                     const Tensor& bias, std::size_t stride,
                                     GradientTape* tape = nullptr) {
    Tensor mean_out = conv1d(in.mean, kernels, bias, stride, tape);
    Tensor var_out = conv1d(in.variance, square(kernels, tape), Tensor(), stride, tape);
    return GaussianActivation(std::move(mean_out), std::move(var_out));
}

// Frozen-statistics batchnorm as a fixed affine map:
//   a = gamma / sqrt(running_var + eps),  b = beta - a.running_mean
//   mean' = a.mean + b,  variance' = a^2.variance
// x is viewed as [outer x C x inner] like the deterministic layer.
inline GaussianActivation batchnorm_adf_eval(const GaussianActivation& in, const Tensor& gamma,
                                             const Tensor& beta, const std::vector<double>& running_mean,
                                             const std::vector<double>& running_var, std::size_t inner,
                                             double eps = 1e-5, GradientTape* tape = nullptr) {
    const std::size_t c = gamma.numel();
    if (running_mean.size() != c || running_var.size() != c) {
        throw contract_error("batchnorm_adf_eval: running statistics size mismatch");
    }
    std::vector<double> denom(c);
    for (std::size_t i = 0; i < c; ++i) {
        if (running_var[i] <= 0.0) {
            throw contract_error("batchnorm_adf_eval: running variance must be positive, got " +
                                 std::to_string(running_var[i]));
        }
        denom[i] = std::sqrt(running_var[i] + eps);
    }
    Tensor a = div(gamma, Tensor({c}, denom), tape);
    Tensor shift = sub(beta, mul(a, Tensor({c}, running_mean), tape), tape);
    Tensor mean_out = add_channel(mul_channel(in.mean, a, inner, tape), shift, inner, tape);
    Tensor var_out = mul_channel(in.variance, square(a, tape), inner, tape);
    return GaussianActivation(std::move(mean_out), std::move(var_out));
}

// Training-mode batchnorm under ADF: the mean channel is normalized with the
// batch statistics of the means; the variance channel is scaled by the same
// a^2 = gamma^2 / (batch_var + eps). Gradients flow through the batch
// statistics on both paths.
struct BatchNormAdfOut {
    GaussianActivation out;
    std::vector<double> batch_mean;
    std::vector<double> batch_var_unbiased;
};

inline BatchNormAdfOut batchnorm_adf_train(const GaussianActivation& in, const Tensor& gamma,
                                           const Tensor& beta, std::size_t channels, std::size_t inner,
                                           double eps = 1e-5, GradientTape* tape = nullptr) {
    auto bn = batchnorm_train(in.mean, gamma, beta, channels, inner, eps, tape);
    Tensor mu_ch = channel_mean(in.mean, channels, inner, tape);
    Tensor centered = sub_channel(in.mean, mu_ch, inner, tape);
    Tensor batch_var = channel_mean(square(centered, tape), channels, inner, tape);
    Tensor a2 = div(square(gamma, tape), add_scalar(batch_var, eps, tape), tape);
    Tensor var_out = mul_channel(in.variance, a2, inner, tape);
    GaussianActivation out(std::move(bn.y), std::move(var_out));
    return BatchNormAdfOut{std::move(out), std::move(bn.batch_mean), std::move(bn.batch_var_unbiased)};
}

// Bernoulli(1-p) mask scaled by 1/(1-p). The same mask multiplies the mean and
// (squared) the variance: a dropped unit carries no uncertainty. Masks are
// drawn only when `active` (training or an MC pass); otherwise identity.
inline Tensor dropout_mask(const Shape& shape, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw contract_error("dropout: p must lie in [0, 1)");
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> m(shape_numel(shape));
    for (double& v : m) v = rng.uniform() < p ? 0.0 : keep_scale;
    return Tensor(shape, std::move(m));
}

inline Tensor dropout_apply_det(const Tensor& x, double p, Rng& rng, bool active,
                                GradientTape* tape = nullptr) {
    if (!active || p == 0.0) {
        if (p < 0.0 || p >= 1.0) throw contract_error("dropout: p must lie in [0, 1)");
        return x;
    }
    return mul(x, dropout_mask(x.shape(), p, rng), tape);
}

inline GaussianActivation dropout_apply(const GaussianActivation& in, double p, Rng& rng, bool active,
                                        GradientTape* tape = nullptr) {
    if (!active || p == 0.0) {
        if (p < 0.0 || p >= 1.0) throw contract_error("dropout: p must lie in [0, 1)");
        return in;
    }
    Tensor mask = dropout_mask(in.mean.shape(), p, rng);
    Tensor mean_out = mul(in.mean, mask, tape);
    Tensor var_out = mul(in.variance, square(mask), tape);
    return GaussianActivation(std::move(mean_out), std::move(var_out));
}

}  // namespace twinuq
