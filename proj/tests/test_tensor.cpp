#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "mars/grad_check.hpp"
#include "mars/ops.hpp"
#include "mars/random.hpp"

using namespace mars;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, float stddev = 1.0f, bool requires_grad = false) {
    std::vector<float> v(shape_numel(shape));
    for (float& x : v) x = static_cast<float>(rng.normal()) * stddev;
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

std::vector<std::int64_t> random_targets(Rng& rng, std::size_t rows, std::size_t cols) {
    std::vector<std::int64_t> t(rows);
    for (auto& x : t) x = static_cast<std::int64_t>(rng.below(cols));
    return t;
}

// Worst scaled error of the 32-bit reverse-mode gradients against central
// differences of a 64-bit copy. f builds the loss from a parameter list of
// either precision.
template <class F>
double check(F f, std::vector<Tensor> params) {
    std::vector<BasicTensor<double>> wide;
    for (const auto& p : params) wide.push_back(p.cast<double>());
    return grad_check_shadowed<float, double>([&] { return f(params); }, params, [&] { return f(wide); }, wide, 1e-3)
        .max_rel_error;
}

template <class P>
using scalar_of = typename P::value_type::value_type;

}  // namespace

TEST(Matmul, KnownProduct) {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor b({2, 2}, {5, 6, 7, 8});
    const Tensor c = matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 2}));
    EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{19, 22, 43, 50}));
}

TEST(Matmul, IdentityAndZero) {
    Rng rng(1);
    const Tensor x = random_tensor(rng, {2, 5});
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    const Tensor y = matmul(eye, x);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
    const Tensor z = matmul(Tensor::zeros({3, 2}), x);
    for (float v : z.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x5]"), std::string::npos);
    }
}

TEST(Matmul, AssociativeOnRandomMatrices) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5}), c = random_tensor(rng, {5, 2});
        const Tensor left = matmul(matmul(a, b), c);
        const Tensor right = matmul(a, matmul(b, c));
        double num = 0, den = 0;
        for (std::size_t i = 0; i < left.numel(); ++i) {
            num = std::max(num, std::abs(double(left.data()[i]) - right.data()[i]));
            den = std::max(den, std::abs(double(right.data()[i])));
        }
        EXPECT_LT(num / den, 1e-4);
    }
}

TEST(Softmax, Examples) {
    const std::vector<float> zeros{0, 0, 0};
    for (float p : softmax<float>(zeros)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-7);
    const std::vector<float> x{0.0f, static_cast<float>(std::log(3.0))};
    const auto p = softmax<float>(x);
    EXPECT_NEAR(p[0], 0.25, 1e-7);
    EXPECT_NEAR(p[1], 0.75, 1e-7);
}

TEST(Softmax, ShiftInvariantAndStable) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> x(17);
        for (float& v : x) v = static_cast<float>((rng.uniform() * 2 - 1) * 1e4);
        const auto p = softmax<float>(x);
        double sum = 0;
        for (float v : p) {
            EXPECT_GE(v, 0.0f);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);

        std::vector<float> small(5), shifted(5);
        for (std::size_t i = 0; i < 5; ++i) {
            small[i] = static_cast<float>(rng.normal());
            shifted[i] = small[i] + 3.5f;
        }
        const auto a = softmax<float>(small), b = softmax<float>(shifted);
        for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
    }
}

TEST(Softmax, RejectsNonFinite) {
    const std::vector<float> x{0.0f, NAN};
    EXPECT_THROW(softmax<float>(x), NumericError);
    const std::vector<float> y{0.0f, 1.0f};
    EXPECT_THROW(softmax<float>(y, 0.0f), NumericError);
}

TEST(LayerNorm, Examples) {
    const std::vector<float> ones(4, 1.0f), zeros(4, 0.0f);
    const std::vector<float> constant(4, 2.5f);
    for (float v : layer_norm<float>(constant, ones, zeros)) EXPECT_EQ(v, 0.0f);

    const std::vector<float> x{1.0f, -1.0f}, g{1.0f, 1.0f}, b{0.0f, 0.0f};
    const auto y = layer_norm<float>(x, g, b, 0.0f);
    EXPECT_FLOAT_EQ(y[0], 1.0f);
    EXPECT_FLOAT_EQ(y[1], -1.0f);

    const std::vector<float> beta{0.5f, -2.0f, 3.0f, 0.25f};
    const std::vector<float> xs{4.0f, -1.0f, 0.5f, 9.0f};
    const auto z = layer_norm<float>(xs, zeros, beta);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(z[i], beta[i]);
}

TEST(CrossEntropy, Examples) {
    const std::vector<float> uniform(10, 0.3f);
    EXPECT_NEAR(cross_entropy<float>(uniform, 4), std::log(10.0), 1e-6);
    const std::vector<float> confident{-50.0f, 60.0f, -50.0f};
    EXPECT_NEAR(cross_entropy<float>(confident, 1), 0.0, 1e-6);
    const std::vector<float> x{0.0f, static_cast<float>(std::log(3.0))};
    EXPECT_NEAR(cross_entropy<float>(x, 1), 0.28768207245178085, 1e-6);
    EXPECT_THROW(cross_entropy<float>(x, 2), IndexError);
}

TEST(CrossEntropyRows, RangeRestrictedAndSkippedRows) {
    const Tensor logits({2, 4}, {0, 0, 0, 0, 1, 2, 3, 4});
    const Tensor full = cross_entropy_rows(logits, {1, -1});
    EXPECT_NEAR(full.item(), std::log(4.0), 1e-6);
    const Tensor restricted = cross_entropy_rows(logits, {-1, 3}, 2, 4);
    const std::vector<float> tail{3, 4};
    EXPECT_NEAR(restricted.item(), cross_entropy<float>(tail, 1), 1e-6);
    EXPECT_THROW(cross_entropy_rows(logits, {0, 1}, 2, 4), IndexError);
}

TEST(GradCheck, QuadraticInDouble) {
    // f(x) = x·x as a 1×1 product of the leaf with itself
    BasicTensor<double> x({1, 1}, {3.0}, true);
    const auto r = grad_check<double>([&] { return matmul(x, x); }, {x}, 1e-3);
    EXPECT_LT(r.max_rel_error, 1e-6);
    EXPECT_NEAR(r.worst_analytic, 6.0, 1e-12);
}

TEST(GradCheck, LinearFunctionAgrees) {
    BasicTensor<double> w({1, 3}, {0.5, -1.0, 2.0}, true);
    const BasicTensor<double> x({3, 1}, {1.0, 2.0, 3.0});
    const auto r = grad_check<double>([&] { return matmul(w, x); }, {w}, 1e-3);
    EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, RejectsBadStepAndNonFiniteLoss) {
    Tensor w({1, 1}, {1.0f}, true);
    const Tensor x({1, 1}, {2.0f});
    EXPECT_THROW(grad_check<float>([&] { return matmul(w, x); }, {w}, 0.5f), NumericError);
    const Tensor inf({1, 1}, {INFINITY});
    EXPECT_THROW(grad_check<float>([&] { return matmul(w, inf); }, {w}, 1e-3f), NumericError);
}

TEST(Autograd, FrozenTensorsNeverAccumulate) {
    Rng rng(11);
    Tensor frozen = random_tensor(rng, {3, 3});
    Tensor live = random_tensor(rng, {3, 3}, 1.0f, true);
    const Tensor loss = cross_entropy_rows(matmul(frozen, live), {0, 1, 2});
    loss.backward();
    EXPECT_FALSE(frozen.has_grad());
    EXPECT_TRUE(frozen.grad().empty());
    double norm = 0;
    for (float g : live.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0);
}

TEST(Autograd, NoGraphWithoutTrainableInputs) {
    Rng rng(2);
    const Tensor a = random_tensor(rng, {2, 2}), b = random_tensor(rng, {2, 2});
    const Tensor c = matmul(a, b);
    EXPECT_FALSE(c.requires_grad());
}

// Every differentiable op against central differences on small random inputs.
class OpGradients : public ::testing::Test {
protected:
    Rng rng{2024};
};

TEST_F(OpGradients, Matmul) {
    Tensor a = random_tensor(rng, {3, 4}, 1.0f, true), b = random_tensor(rng, {4, 5}, 1.0f, true);
    const auto t = random_targets(rng, 3, 5);
    EXPECT_LT(check([&](const auto& p) { return cross_entropy_rows(matmul(p[0], p[1]), t); }, {a, b}), 1e-3);
}

TEST_F(OpGradients, AddScaleGelu) {
    Tensor a = random_tensor(rng, {3, 4}, 1.0f, true), b = random_tensor(rng, {3, 4}, 1.0f, true);
    const auto t = random_targets(rng, 3, 4);
    auto f = [&](const auto& p) {
        using T = scalar_of<std::decay_t<decltype(p)>>;
        return cross_entropy_rows(gelu(scale(add(p[0], p[1]), T(1.7))), t);
    };
    EXPECT_LT(check(f, {a, b}), 1e-3);
}

TEST_F(OpGradients, LayerNorm) {
    Tensor x = random_tensor(rng, {3, 6}, 1.0f, true);
    Tensor g = random_tensor(rng, {6}, 1.0f, true), b = random_tensor(rng, {6}, 1.0f, true);
    const auto t = random_targets(rng, 3, 6);
    EXPECT_LT(check([&](const auto& p) { return cross_entropy_rows(layer_norm(p[0], p[1], p[2]), t); }, {x, g, b}),
              1e-3);
}

TEST_F(OpGradients, GatherAndConcat) {
    Tensor a = random_tensor(rng, {3, 4}, 1.0f, true), b = random_tensor(rng, {2, 4}, 1.0f, true);
    Tensor c = random_tensor(rng, {5, 3}, 1.0f, true);
    const auto t = random_targets(rng, 5, 7);
    auto f = [&](const auto& p) {
        const auto rows = gather_rows(concat_rows(std::vector{p[0], p[1]}), {4, 0, 0, 2, 3});
        return cross_entropy_rows(concat_cols(rows, p[2]), t);
    };
    EXPECT_LT(check(f, {a, b, c}), 1e-3);
}

TEST_F(OpGradients, CausalAttention) {
    Tensor q = random_tensor(rng, {5, 4}, 1.0f, true), k = random_tensor(rng, {5, 4}, 1.0f, true);
    Tensor v = random_tensor(rng, {5, 4}, 1.0f, true);
    const auto t = random_targets(rng, 5, 4);
    EXPECT_LT(check([&](const auto& p) { return cross_entropy_rows(causal_attention(p[0], p[1], p[2], 2), t); },
                    {q, k, v}),
              1e-3);
}

// Without the wide shadow, fp32 rounding in f(θ±eps) is visible but bounded.
TEST_F(OpGradients, PlainFloatCheckIsNoiseLimited) {
    Tensor a = random_tensor(rng, {3, 4}, 1.0f, true), b = random_tensor(rng, {4, 5}, 1.0f, true);
    const auto t = random_targets(rng, 3, 5);
    const auto r = grad_check<float>([&] { return cross_entropy_rows(matmul(a, b), t); }, {a, b}, 1e-2f);
    EXPECT_LT(r.max_rel_error, 1e-2);
}

TEST(CausalAttention, RowsIgnoreLaterPositions) {
    Rng rng(5);
    const Tensor q = random_tensor(rng, {6, 4}), k = random_tensor(rng, {6, 4}), v = random_tensor(rng, {6, 4});
    const Tensor base = causal_attention(q, k, v, 2);
    Tensor k2 = k.clone(), v2 = v.clone();
    for (std::size_t j = 0; j < 4; ++j) {
        k2.mutable_data()[5 * 4 + j] += 3.0f;
        v2.mutable_data()[5 * 4 + j] -= 2.0f;
    }
    const Tensor changed = causal_attention(q, k2, v2, 2);
    for (std::size_t i = 0; i < 5 * 4; ++i) EXPECT_EQ(base.data()[i], changed.data()[i]);
}
