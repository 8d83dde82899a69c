#include <gtest/gtest.h>

#include "support.hpp"

using namespace moonbeam;
using namespace testing_support;
using T64 = Tensor<double>;

namespace {

constexpr double kTol = 1e-4;

} // namespace

TEST(Tensor, MatmulSmallExact) {
    const auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const auto b = Tensor<double>::from({3, 2}, {7, 8, 9, 10, 11, 12});
    EXPECT_EQ(matmul(a, b).values(), (std::vector<double>{58, 64, 139, 154}));
}

TEST(Tensor, MatmulMatchesLoopOracle) {
    std::mt19937_64 rng(1);
    const auto a = random_tensor<double>({2, 3, 4, 5}, rng, 1.0, false);
    const auto b = random_tensor<double>({2, 3, 5, 6}, rng, 1.0, false);
    const auto c = matmul(a, b);
    for (std::size_t z = 0; z < 6; ++z) {
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = 0; j < 6; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < 5; ++k) s += a[(z * 4 + i) * 5 + k] * b[(z * 5 + k) * 6 + j];
                EXPECT_NEAR(c[(z * 4 + i) * 6 + j], s, 1e-12);
            }
        }
    }
}

TEST(Tensor, SoftmaxOfZerosIsUniform) {
    const auto s = softmax(Tensor<double>::zeros({3}));
    for (double v : s.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
    try {
        add(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({4}));
        FAIL();
    } catch (const ShapeError& e) {
        const std::string m = e.what();
        EXPECT_NE(m.find("[2, 3]"), std::string::npos) << m;
        EXPECT_NE(m.find("[4]"), std::string::npos) << m;
    }
    EXPECT_THROW(matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({4, 2})), ShapeError);
}

TEST(Tensor, LeadingBatchBroadcastOnly) {
    const auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    const auto b = Tensor<double>::from({2}, {10, 20});
    EXPECT_EQ(add(x, b).values(), (std::vector<double>{11, 22, 13, 24}));
    EXPECT_THROW(add(x, Tensor<double>::zeros({2, 1})), ShapeError);
}

TEST(Tensor, CrossEntropyRangeAndIgnore) {
    const auto l = Tensor<double>::zeros({2, 3});
    EXPECT_THROW(cross_entropy(l, {0, 3}), RangeError);
    EXPECT_THROW(cross_entropy(l, {kIgnoreIndex, kIgnoreIndex}), InputError);
    EXPECT_NEAR(cross_entropy(l, {1, kIgnoreIndex}).item(), std::log(3.0), 1e-12);
}

TEST(Tensor, BackwardBasics) {
    auto x = Tensor<double>::from({3}, {1, -2, 3}, true);
    {
        Tape<double> tape;
        TapeScope<double> s(tape);
        backward(sum(x));
    }
    EXPECT_EQ(x.grad(), (std::vector<double>{1, 1, 1}));
    x.zero_grad();
    {
        Tape<double> tape;
        TapeScope<double> s(tape);
        backward(sum(mul(x, x)));
    }
    EXPECT_EQ(x.grad(), (std::vector<double>{2, -4, 6}));
}

TEST(Tensor, RepeatedBackwardAccumulates) {
    auto x = Tensor<double>::from({2}, {1, 2}, true);
    Tape<double> tape;
    TapeScope<double> s(tape);
    const auto loss = sum(mul(x, x));
    backward(loss);
    backward(loss);
    EXPECT_EQ(x.grad(), (std::vector<double>{4, 8}));
}

TEST(Tensor, BackwardOffTapeIsAnError) {
    auto x = Tensor<double>::from({2}, {1, 2}, true);
    EXPECT_THROW(backward(sum(x)), InvariantError);
    Tape<double> tape;
    TapeScope<double> s(tape);
    T64 y;
    {
        NoGradScope<double> off;
        y = sum(x);
    }
    EXPECT_THROW(backward(y), InvariantError);
}

TEST(Tensor, GradientsOfEveryOp) {
    const std::vector<OpCase> cases = op_cases();
    for (const OpCase& c : cases) {
        std::mt19937_64 rng(42);
        double worst = 0.0;
        for (int point = 0; point < 20; ++point) c.run(rng, worst);
        EXPECT_LT(worst, kTol) << c.name;
    }
}

TEST(Tensor, ForwardDeterministic) {
    std::mt19937_64 r1(3), r2(3);
    auto a = random_tensor<double>({4, 8}, r1), b = random_tensor<double>({8, 8}, r2);
    const auto x = softmax(matmul(a, b)).values();
    const auto y = softmax(matmul(a, b)).values();
    EXPECT_EQ(x, y);
}

TEST(Tensor, DetachAndNoGrad) {
    auto x = Tensor<double>::from({2}, {1, 2}, true);
    const auto d = x.detach();
    EXPECT_FALSE(d.requires_grad());
    Tape<double> tape;
    TapeScope<double> s(tape);
    {
        NoGradScope<double> off;
        (void)sum(x);
    }
    EXPECT_EQ(tape.size(), 0u);
}
