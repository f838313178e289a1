#pragma once

// Layer stacks for the fault classifiers: a fully connected net (one hidden
// layer of 50) and a Conv1d net (4 convolutional layers with 4/2/2/2 filters of
// width 15, then a 100-unit dense layer). Batch normalization and dropout
// follow every layer except the prediction head; all activations are ReLU.
// Deterministic, heteroscedastic-head and ADF forward passes share the same
// parameters and the same layer sequence.

#include <cstddef>
#include <string>
#include <vector>

#include "twinuq/adf.hpp"
#include "twinuq/errors.hpp"
#include "twinuq/rng.hpp"
#include "twinuq/tensor.hpp"

namespace twinuq {

enum class Arch { fc, conv1d };
enum class ModelKind { plain, adf, het };

inline std::string to_string(Arch a) { return a == Arch::fc ? "fc" : "conv1d"; }
inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::plain: return "plain";
        case ModelKind::adf: return "adf";
        default: return "het";
    }
}

inline Arch arch_from_string(const std::string& s) {
    if (s == "fc") return Arch::fc;
    if (s == "conv1d") return Arch::conv1d;
    throw config_error("unknown architecture '" + s + "' (expected fc or conv1d)");
}
inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "plain") return ModelKind::plain;
    if (s == "adf") return ModelKind::adf;
    if (s == "het") return ModelKind::het;
    throw config_error("unknown model kind '" + s + "' (expected plain, adf or het)");
}

enum class LayerKind { linear, conv1d, relu, batchnorm, dropout, softmax, flatten };

enum class PassMode {
    train,    // batch statistics, dropout masks active, tape expected
    eval,     // running statistics, no dropout
    eval_mc,  // running statistics, dropout masks active (MC dropout pass)
};

struct Layer {
    LayerKind kind;

    // linear: weights [out x in]; conv1d: weights [c_out x c_in x w]
    Tensor weights;
    Tensor bias;
    std::size_t stride = 1;

    // batchnorm
    Tensor gamma, beta;
    std::vector<double> running_mean, running_var;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    // dropout
    double p = 0.0;

    static Layer linear(Tensor w, Tensor b) {
        Layer l{LayerKind::linear};
        l.weights = std::move(w);
        l.bias = std::move(b);
        return l;
    }
    static Layer conv(Tensor k, Tensor b, std::size_t stride) {
        Layer l{LayerKind::conv1d};
        l.weights = std::move(k);
        l.bias = std::move(b);
        l.stride = stride;
        return l;
    }
    static Layer relu() { return Layer{LayerKind::relu}; }
    static Layer flatten() { return Layer{LayerKind::flatten}; }
    static Layer softmax() { return Layer{LayerKind::softmax}; }
    static Layer batchnorm(std::size_t channels) {
        Layer l{LayerKind::batchnorm};
        l.gamma = Tensor::param({channels}, std::vector<double>(channels, 1.0));
        l.beta = Tensor::param({channels}, std::vector<double>(channels, 0.0));
        l.running_mean.assign(channels, 0.0);
        l.running_var.assign(channels, 1.0);
        return l;
    }
    static Layer dropout(double p) {
        if (p < 0.0 || p >= 1.0) throw contract_error("dropout: p must lie in [0, 1)");
        Layer l{LayerKind::dropout};
        l.p = p;
        return l;
    }
};

namespace detail {

inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> w(shape_numel(shape));
    for (double& v : w) v = rng.uniform(-bound, bound);
    return Tensor::param(std::move(shape), std::move(w));
}

inline void bn_update_running(Layer& l, const std::vector<double>& mean,
                              const std::vector<double>& var_unbiased) {
    for (std::size_t i = 0; i < l.running_mean.size(); ++i) {
        l.running_mean[i] = (1.0 - l.bn_momentum) * l.running_mean[i] + l.bn_momentum * mean[i];
        l.running_var[i] = (1.0 - l.bn_momentum) * l.running_var[i] + l.bn_momentum * var_unbiased[i];
    }
}

inline std::pair<std::size_t, std::size_t> bn_layout(const Tensor& x, const Layer& l) {
    const std::size_t channels = l.gamma.numel();
    const std::size_t inner = x.ndim() == 3 ? x.dim(2) : 1;
    const std::size_t have = x.ndim() == 3 ? x.dim(1) : x.dim(1);
    if (have != channels) {
        throw contract_error("batchnorm: expected " + std::to_string(channels) + " channels, got " +
                             shape_str(x.shape()));
    }
    return {channels, inner};
}

}  // namespace detail

struct Model {
    Arch arch = Arch::fc;
    ModelKind kind = ModelKind::plain;
    std::size_t input_len = 0;
    std::size_t n_classes = 0;
    double dropout_p = 0.2;

    std::vector<Layer> trunk;
    Layer head_mu;              // linear
    Layer head_logvar;          // linear, het models only
    bool has_logvar_head = false;

    // Trainable parameters in declaration order (checkpoint blob order).
    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        auto push_layer = [&out](const Layer& l) {
            switch (l.kind) {
                case LayerKind::linear:
                case LayerKind::conv1d:
                    out.push_back(l.weights);
                    out.push_back(l.bias);
                    break;
                case LayerKind::batchnorm:
                    out.push_back(l.gamma);
                    out.push_back(l.beta);
                    break;
                default: break;
            }
        };
        for (const Layer& l : trunk) push_layer(l);
        push_layer(head_mu);
        if (has_logvar_head) push_layer(head_logvar);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor& t : parameters()) n += t.numel();
        return n;
    }
};

// FC: input -> 50 -> classes. Conv1d: 4 conv layers (4/2/2/2 filters, width 15,
// stride 1) -> dense 100 -> classes. Weights use Kaiming-uniform fan-in
// scaling with zero biases; a heteroscedastic log-variance head starts at
// exactly zero so the initial predicted variance is one.
inline Model build_model(Arch arch, ModelKind kind, std::size_t input_len, std::size_t n_classes,
                         Rng& init_rng, double dropout_p = 0.2, std::size_t kernel_width = 15) {
    Model m;
    m.arch = arch;
    m.kind = kind;
    m.input_len = input_len;
    m.n_classes = n_classes;
    m.dropout_p = dropout_p;

    std::size_t trunk_out = 0;
    if (arch == Arch::fc) {
        const std::size_t hidden = 50;
        m.trunk.push_back(Layer::linear(detail::kaiming_uniform({hidden, input_len}, input_len, init_rng),
                                        Tensor::param({hidden}, std::vector<double>(hidden, 0.0))));
        m.trunk.push_back(Layer::batchnorm(hidden));
        m.trunk.push_back(Layer::relu());
        m.trunk.push_back(Layer::dropout(dropout_p));
        trunk_out = hidden;
    } else {
        const std::size_t filters[4] = {4, 2, 2, 2};
        std::size_t c_in = 1;
        std::size_t len = input_len;
        for (std::size_t i = 0; i < 4; ++i) {
            if (len < kernel_width) {
                throw contract_error("build_model: input length " + std::to_string(input_len) +
                                     " too short for 4 convolutions of width " +
                                     std::to_string(kernel_width));
            }
            const std::size_t c_out = filters[i];
            m.trunk.push_back(
                Layer::conv(detail::kaiming_uniform({c_out, c_in, kernel_width}, c_in * kernel_width, init_rng),
                            Tensor::param({c_out}, std::vector<double>(c_out, 0.0)), 1));
            m.trunk.push_back(Layer::batchnorm(c_out));
            m.trunk.push_back(Layer::relu());
            m.trunk.push_back(Layer::dropout(dropout_p));
            len = len - kernel_width + 1;
            c_in = c_out;
        }
        m.trunk.push_back(Layer::flatten());
        const std::size_t flat = c_in * len;
        const std::size_t hidden = 100;
        m.trunk.push_back(Layer::linear(detail::kaiming_uniform({hidden, flat}, flat, init_rng),
                                        Tensor::param({hidden}, std::vector<double>(hidden, 0.0))));
        m.trunk.push_back(Layer::batchnorm(hidden));
        m.trunk.push_back(Layer::relu());
        m.trunk.push_back(Layer::dropout(dropout_p));
        trunk_out = hidden;
    }

    m.head_mu = Layer::linear(detail::kaiming_uniform({n_classes, trunk_out}, trunk_out, init_rng),
                              Tensor::param({n_classes}, std::vector<double>(n_classes, 0.0)));
    if (kind == ModelKind::het) {
        m.head_logvar =
            Layer::linear(Tensor::param({n_classes, trunk_out},
                                        std::vector<double>(n_classes * trunk_out, 0.0)),
                          Tensor::param({n_classes}, std::vector<double>(n_classes, 0.0)));
        m.has_logvar_head = true;
    }
    return m;
}

namespace detail {

inline Tensor linear_forward(const Layer& l, const Tensor& x, GradientTape* tape) {
    Tensor y = matmul(x, transpose(l.weights, tape), tape);
    return add_channel(y, l.bias, 1, tape);
}

}  // namespace detail

// Composition of the deterministic layers; `x` is [batch x input_len]. Records
// onto `tape` when given (training). Dropout draws masks from `rng` only in
// train / eval_mc modes.
inline Tensor forward_trunk_deterministic(Model& m, const Tensor& x, PassMode mode, Rng& rng,
                                          GradientTape* tape = nullptr) {
    if (x.ndim() != 2 || x.dim(1) != m.input_len) {
        throw contract_error("forward: input " + shape_str(x.shape()) + " does not match input length " +
                             std::to_string(m.input_len));
    }
    Tensor h = x;
    if (m.arch == Arch::conv1d) h = reshape(h, {x.dim(0), 1, m.input_len}, tape);
    const bool masks_active = mode != PassMode::eval;
    for (Layer& l : m.trunk) {
        switch (l.kind) {
            case LayerKind::linear:
                h = detail::linear_forward(l, h, tape);
                break;
            case LayerKind::conv1d:
                h = conv1d(h, l.weights, l.bias, l.stride, tape);
                break;
            case LayerKind::relu:
                h = relu(h, tape);
                break;
            case LayerKind::flatten:
                h = reshape(h, {h.dim(0), h.dim(1) * h.dim(2)}, tape);
                break;
            case LayerKind::softmax:
                h = softmax_rows(h, tape);
                break;
            case LayerKind::batchnorm: {
                auto [channels, inner] = detail::bn_layout(h, l);
                if (mode == PassMode::train) {
                    auto bn = batchnorm_train(h, l.gamma, l.beta, channels, inner, l.bn_eps, tape);
                    detail::bn_update_running(l, bn.batch_mean, bn.batch_var_unbiased);
                    h = bn.y;
                } else {
                    GaussianActivation g = batchnorm_adf_eval(GaussianActivation::deterministic(h), l.gamma,
                                                              l.beta, l.running_mean, l.running_var, inner,
                                                              l.bn_eps, tape);
                    h = g.mean;
                }
                break;
            }
            case LayerKind::dropout:
                h = dropout_apply_det(h, l.p, rng, masks_active, tape);
                break;
        }
    }
    return h;
}

inline Tensor forward_deterministic(Model& m, const Tensor& x, PassMode mode, Rng& rng,
                                    GradientTape* tape = nullptr) {
    Tensor h = forward_trunk_deterministic(m, x, mode, rng, tape);
    return detail::linear_forward(m.head_mu, h, tape);
}

struct HetOutput {
    Tensor mu;       // [batch x classes]
    Tensor log_var;  // [batch x classes]
};

inline HetOutput forward_het(Model& m, const Tensor& x, PassMode mode, Rng& rng,
                             GradientTape* tape = nullptr) {
    if (!m.has_logvar_head) throw contract_error("forward_het: model has no log-variance head");
    Tensor h = forward_trunk_deterministic(m, x, mode, rng, tape);
    return HetOutput{detail::linear_forward(m.head_mu, h, tape),
                     detail::linear_forward(m.head_logvar, h, tape)};
}

// Layer-by-layer moment matching; emits the logit-space mean/variance pair.
// Softmax has no ADF closed form, so a softmax layer is rejected here and the
// losses / uncertainty code handles logit sampling instead.
inline GaussianActivation forward_adf(Model& m, const GaussianActivation& input, PassMode mode, Rng& rng,
                                      GradientTape* tape = nullptr) {
    if (input.mean.ndim() != 2 || input.mean.dim(1) != m.input_len) {
        throw contract_error("forward_adf: input " + shape_str(input.mean.shape()) +
                             " does not match input length " + std::to_string(m.input_len));
    }
    GaussianActivation g = input;
    if (m.arch == Arch::conv1d) {
        Shape s{input.mean.dim(0), 1, m.input_len};
        g = GaussianActivation(reshape(g.mean, s, tape), reshape(g.variance, s, tape));
    }
    const bool masks_active = mode != PassMode::eval;
    for (Layer& l : m.trunk) {
        switch (l.kind) {
            case LayerKind::linear:
                g = linear_adf(g, l.weights, l.bias, tape);
                break;
            case LayerKind::conv1d:
                g = conv1d_adf(g, l.weights, l.bias, l.stride, tape);
                break;
            case LayerKind::relu:
                g = relu_adf(g, tape);
                break;
            case LayerKind::flatten: {
                Shape s{g.mean.dim(0), g.mean.dim(1) * g.mean.dim(2)};
                g = GaussianActivation(reshape(g.mean, s, tape), reshape(g.variance, s, tape));
                break;
            }
            case LayerKind::softmax:
                throw contract_error("forward_adf: softmax has no ADF closed form");
            case LayerKind::batchnorm: {
                auto [channels, inner] = detail::bn_layout(g.mean, l);
                if (mode == PassMode::train) {
                    auto bn = batchnorm_adf_train(g, l.gamma, l.beta, channels, inner, l.bn_eps, tape);
                    detail::bn_update_running(l, bn.batch_mean, bn.batch_var_unbiased);
                    g = bn.out;
                } else {
                    g = batchnorm_adf_eval(g, l.gamma, l.beta, l.running_mean, l.running_var, inner,
                                           l.bn_eps, tape);
                }
                break;
            }
            case LayerKind::dropout:
                g = dropout_apply(g, l.p, rng, masks_active, tape);
                break;
        }
    }
    return linear_adf(g, m.head_mu.weights, m.head_mu.bias, tape);
}

}  // namespace twinuq
