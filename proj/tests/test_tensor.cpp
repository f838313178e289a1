#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "twinuq/rng.hpp"
#include "twinuq/tensor.hpp"

using namespace twinuq;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(shape_numel(shape));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

// Independent oracle: naive triple loop, summation left-to-right over the
// inner index, matching the documented accumulation order.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
            out[i * n + j] = s;
        }
    return out;
}

// Independent oracle: explicit sliding-window dot products (bias first, then
// channels and taps in order).
std::vector<double> conv1d_oracle(const Tensor& x, const Tensor& k, const Tensor& bias, std::size_t stride) {
    const std::size_t c_in = x.dim(0), n = x.dim(1);
    const std::size_t c_out = k.dim(0), w = k.dim(2);
    const std::size_t m = (n - w) / stride + 1;
    std::vector<double> out(c_out * m, 0.0);
    for (std::size_t oc = 0; oc < c_out; ++oc)
        for (std::size_t j = 0; j < m; ++j) {
            double s = bias.empty() ? 0.0 : bias.at(oc);
            for (std::size_t ic = 0; ic < c_in; ++ic)
                for (std::size_t u = 0; u < w; ++u) s += x.at(ic, j * stride + u) * k.at(oc, ic, u);
            out[oc * m + j] = s;
        }
    return out;
}

}  // namespace

TEST_CASE("matmul identities and hand sums") {
    Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    CHECK(matmul(eye, a).data() == std::vector<double>{1, 2, 3, 4});

    Tensor r = Tensor::matrix(1, 2, {1, 1});
    Tensor c = Tensor::matrix(2, 1, {2, 3});
    CHECK(matmul(r, c).data() == std::vector<double>{5});
}

TEST_CASE("matmul matches triple-loop oracle bit-for-bit") {
    Rng rng(42);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        CHECK(matmul(a, b).data() == matmul_oracle(a, b));
    }
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tensor a = Tensor::matrix(3, 4, std::vector<double>(12, 0.0));
    Tensor b = Tensor::matrix(5, 2, std::vector<double>(10, 0.0));
    CHECK_THROWS_MATCHES(matmul(a, b), contract_error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("[3x4]") &&
                                                         Catch::Matchers::ContainsSubstring("[5x2]")));
}

TEST_CASE("conv1d hand cases") {
    Tensor x = Tensor({1, 3}, {1, 2, 3});
    Tensor k = Tensor({1, 1, 2}, {1, 0});
    Tensor b = Tensor::row({0});
    CHECK(conv1d(x, k, b, 1).data() == std::vector<double>{1, 2});

    Tensor x2 = Tensor({1, 4}, {1, 1, 1, 1});
    Tensor k2 = Tensor({1, 1, 2}, {1, 1});
    CHECK(conv1d(x2, k2, b, 2).data() == std::vector<double>{2, 2});
}

TEST_CASE("conv1d matches sliding-window oracle bit-for-bit") {
    Rng rng(7);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor x = random_tensor({2, 17}, rng);
        Tensor k = random_tensor({3, 2, 5}, rng);
        Tensor b = random_tensor({3}, rng);
        for (std::size_t stride : {1u, 2u, 3u}) {
            CHECK(conv1d(x, k, b, stride).data() == conv1d_oracle(x, k, b, stride));
        }
    }
}

TEST_CASE("conv1d window shorter than kernel errors") {
    Tensor x = Tensor({1, 3}, {1, 2, 3});
    Tensor k = Tensor({1, 1, 5}, {1, 1, 1, 1, 1});
    CHECK_THROWS_AS(conv1d(x, k, Tensor(), 1), contract_error);
}

TEST_CASE("conv1d batched equals per-sample") {
    Rng rng(11);
    Tensor k = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2}, rng);
    std::vector<double> flat;
    std::vector<Tensor> singles;
    for (int s = 0; s < 3; ++s) {
        Tensor x = random_tensor({3, 10}, rng);
        singles.push_back(x);
        flat.insert(flat.end(), x.data().begin(), x.data().end());
    }
    Tensor batch({3, 3, 10}, flat);
    Tensor out = conv1d(batch, k, b, 2);
    for (std::size_t s = 0; s < 3; ++s) {
        Tensor one = conv1d(singles[s], k, b, 2);
        for (std::size_t i = 0; i < one.numel(); ++i) CHECK(out.data()[s * one.numel() + i] == one.data()[i]);
    }
}

TEST_CASE("backward on linear graph gives the fixed factor") {
    Tensor w = Tensor::param({3}, {0.5, -1.0, 2.0});
    Tensor x = Tensor::row({1.0, 2.0, 3.0});
    GradientTape tape;
    Tensor loss = sum_all(mul(w, x, &tape), &tape);
    auto grads = tape.backward(loss);
    REQUIRE(grads.count(w.id()) == 1);
    CHECK(grads.at(w.id()).data() == x.data());
    CHECK(tape.size() == 0);  // cleared for reuse
}

TEST_CASE("backward of sum(relu(w)) in the active region is ones") {
    Tensor w = Tensor::param({4}, {0.1, 2.0, 3.5, 0.7});
    GradientTape tape;
    Tensor loss = sum_all(relu(w, &tape), &tape);
    auto grads = tape.backward(loss);
    CHECK(grads.at(w.id()).data() == std::vector<double>(4, 1.0));
}

TEST_CASE("backward requires scalar loss") {
    Tensor w = Tensor::param({2}, {1.0, 2.0});
    GradientTape tape;
    Tensor y = square(w, &tape);
    CHECK_THROWS_AS(tape.backward(y), contract_error);
}

TEST_CASE("composite graph gradient matches manual central differences") {
    Rng rng(3);
    Tensor w = random_tensor({4, 3}, rng, true);
    Tensor b = random_tensor({3}, rng, true);
    Tensor x = random_tensor({2, 4}, rng);

    auto f = [&x](const Tensor& wv, const Tensor& bv, GradientTape* tape) {
        Tensor h = relu(add_channel(matmul(x, wv, tape), bv, 1, tape), tape);
        Tensor p = softmax_rows(add_scalar(h, 0.1, tape), tape);
        return mean_all(square(p, tape), tape);
    };

    GradientTape tape;
    Tensor loss = f(w, b, &tape);
    auto grads = tape.backward(loss);
    const double eps = 1e-5;
    for (std::size_t j = 0; j < w.numel(); ++j) {
        std::vector<double> d = w.data();
        d[j] += eps;
        const double up = f(Tensor(w.shape(), d), b, nullptr).value();
        d[j] -= 2 * eps;
        const double down = f(Tensor(w.shape(), d), b, nullptr).value();
        const double cd = (up - down) / (2 * eps);
        const double analytic = grads.at(w.id()).at(j);
        CHECK(std::abs(analytic - cd) / std::max({std::abs(analytic), std::abs(cd), 1e-8}) < 1e-4);
    }
}

TEST_CASE("grad_check on a quadratic form is tight") {
    Rng rng(5);
    Tensor q = random_tensor({3, 3}, rng);
    Tensor v = random_tensor({1, 3}, rng, true);
    auto f = [&q](const std::vector<Tensor>& in, GradientTape* tape) {
        Tensor row = matmul(in[0], q, tape);
        return sum_all(mul(row, in[0], tape), tape);
    };
    CHECK(grad_check(f, {v}) < 1e-7);
}

TEST_CASE("grad_check on a constant reports exact zero") {
    Tensor v = Tensor::param({3}, {1.0, 2.0, 3.0});
    auto f = [](const std::vector<Tensor>&, GradientTape*) { return Tensor::scalar(4.0); };
    CHECK(grad_check(f, {v}) == 0.0);
}

TEST_CASE("every primitive passes finite-difference checks over 100 seeds") {
    // Interleaves all differentiable primitives across seeds; inputs are kept
    // away from kinks (relu zero, clamp edges) and singularities.
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(derive_seed(900, {seed}));
        switch (seed % 5) {
            case 0: {  // elementwise chain
                Tensor a = random_tensor({2, 3}, rng, true, 0.3, 1.7);
                Tensor b = random_tensor({2, 3}, rng, true, 0.4, 1.5);
                auto f = [](const std::vector<Tensor>& in, GradientTape* t) {
                    Tensor z = div(mul(in[0], in[1], t), add_scalar(square(in[1], t), 0.5, t), t);
                    Tensor u = add(exp(neg(z, t), t), log(add_scalar(in[0], 1.0, t), t), t);
                    Tensor w = sub(sqrt_guarded(add_scalar(u, 0.2, t), t), scale(in[1], 0.25, t), t);
                    return sum_all(mul(w, gauss_cdf(in[0], t), t), t);
                };
                worst = std::max(worst, grad_check(f, {a, b}));
                break;
            }
            case 1: {  // matmul / transpose / channel ops
                Tensor w = random_tensor({4, 3}, rng, true);
                Tensor b = random_tensor({3}, rng, true, 0.5, 1.5);
                Tensor x = random_tensor({2, 4}, rng);
                auto f = [&x](const std::vector<Tensor>& in, GradientTape* t) {
                    Tensor y = matmul(x, in[0], t);
                    y = div_channel(sub_channel(y, in[1], 1, t), in[1], 1, t);
                    Tensor z = matmul(transpose(y, t), y, t);
                    return mean_all(z, t);
                };
                worst = std::max(worst, grad_check(f, {w, b}));
                break;
            }
            case 2: {  // conv1d + batchnorm over channel layout
                Tensor x = random_tensor({2, 2, 9}, rng, true);
                Tensor k = random_tensor({2, 2, 3}, rng, true);
                Tensor bias = random_tensor({2}, rng, true);
                Tensor gamma = random_tensor({2}, rng, true, 0.5, 1.5);
                Tensor beta = random_tensor({2}, rng, true);
                Tensor wt = random_tensor({2, 2, 7}, rng);
                // Bias is checked without normalization: a uniform channel
                // shift has exactly zero gradient through batchnorm, which
                // turns the finite-difference quotient into pure noise.
                auto f_conv = [&wt](const std::vector<Tensor>& in, GradientTape* t) {
                    Tensor y = mul(conv1d(in[0], in[1], in[2], 1, t), wt, t);
                    return add(sum_all(y, t), sum_all(square(y, t), t), t);
                };
                worst = std::max(worst, grad_check(f_conv, {x, k, bias}));
                auto f_bn = [&wt, &bias](const std::vector<Tensor>& in, GradientTape* t) {
                    Tensor y = conv1d(in[0], in[1], bias, 1, t);
                    auto bn = batchnorm_train(y, in[2], in[3], 2, y.dim(2), 1e-5, t);
                    Tensor weighted = mul(bn.y, wt, t);
                    return add(sum_all(weighted, t), sum_all(square(weighted, t), t), t);
                };
                worst = std::max(worst, grad_check(f_bn, {x, k, gamma, beta}));
                break;
            }
            case 3: {  // softmax / logsumexp / row selection
                Tensor a = random_tensor({3, 4}, rng, true);
                std::vector<int> idx{1, 3, 0};
                auto f = [idx](const std::vector<Tensor>& in, GradientTape* t) {
                    Tensor p = softmax_rows(in[0], t);
                    Tensor l = logsumexp_rows(scale(in[0], 1.3, t), t);
                    Tensor picked = select_per_row(p, idx, t);
                    return add(sum_all(picked, t), mean_all(l, t), t);
                };
                worst = std::max(worst, grad_check(f, {a}));
                break;
            }
            default: {  // tiling / repetition / reductions / pdf / select
                Tensor v = random_tensor({3}, rng, true, -2.0, 2.0);
                Tensor m = random_tensor({2, 3}, rng, true, 0.5, 2.0);
                std::vector<std::uint8_t> mask{1, 0, 1, 0, 1, 0};
                auto f = [mask](const std::vector<Tensor>& in, GradientTape* t) {
                    Tensor tiles = tile_rows(in[0], 2, t);
                    Tensor reps = repeat_rows(in[1], 2, t);
                    Tensor mixed = select(mask, tiles, clamp_min(in[1], 0.75, t), t);
                    Tensor r = add(sum_axis0(mixed, t), sum_axis1(reshape(reps, {3, 4}, t), t), t);
                    return sum_all(mul(r, gauss_pdf(r, t), t), t);
                };
                worst = std::max(worst, grad_check(f, {v, m}));
                break;
            }
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("same seed replays to bit-identical gradients") {
    auto run = [] {
        Rng rng(99);
        Tensor w = random_tensor({5, 4}, rng, true);
        Tensor x = random_tensor({3, 5}, rng);
        GradientTape tape;
        Tensor y = relu(matmul(x, w, &tape), &tape);
        Tensor loss = mean_all(square(y, &tape), &tape);
        auto grads = tape.backward(loss);
        return grads.at(w.id()).data();
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("forward operations keep finite data finite") {
    Rng rng(123);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor x = random_tensor({4, 6}, rng, false, -3.0, 3.0);
        Tensor p = softmax_rows(x);
        Tensor l = logsumexp_rows(x);
        Tensor c = gauss_cdf(x);
        for (double v : p.data()) CHECK(std::isfinite(v));
        for (double v : l.data()) CHECK(std::isfinite(v));
        for (double v : c.data()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("tensor invariants are enforced at construction") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), contract_error);
    CHECK_THROWS_AS(Tensor({0}, {}), contract_error);
    Tensor t = Tensor::matrix(2, 2, {1, 2, 3, 4});
    CHECK(t.numel() == 4);
    CHECK_THROWS_AS(t.value(), contract_error);
}
