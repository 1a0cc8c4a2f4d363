#include <gtest/gtest.h>

#include <cmath>

#include "reenact/tensor.hpp"
#include "support.hpp"

using namespace reenact;
using testsup::gradcheck;
using testsup::numeric_grad;
using testsup::rel_err;

TEST(Matmul, IdentityCase) {
    Tensor I({2, 2}, {1, 0, 0, 1});
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(I, a);
    EXPECT_EQ(r.vec(), a.vec());
}

TEST(Matmul, Projector) {
    Tensor p({2, 2}, {1, 0, 0, 0});
    Tensor b({2, 2}, {5, 6, 7, 8});
    Tensor r = matmul(p, b);
    std::vector<double> expect{5, 6, 0, 0};
    EXPECT_EQ(r.vec(), expect);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a({2, 3});
    Tensor b({4, 2});
    try {
        matmul(a, b);
        FAIL() << "expected DimError";
    } catch (const DimError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
        EXPECT_NE(msg.find("[4, 2]"), std::string::npos);
    }
}

TEST(Matmul, GradMatchesFiniteDifferences) {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 3}, rng);
    Tensor b = Tensor::randn({3, 3}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    double err = gradcheck([&]() { return sum(matmul(a, b)); }, {&a, &b});
    EXPECT_LT(err, 1e-5);
}

TEST(Softmax, Uniform) {
    Tensor x({3}, {0, 0, 0});
    Tensor s = softmax(x);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(s.data()[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, NoOverflowAtLargeMagnitude) {
    Tensor x({2}, {1000, 0});
    Tensor s = softmax(x);
    EXPECT_NEAR(s.data()[0], 1.0, 1e-12);
    EXPECT_NEAR(s.data()[1], 0.0, 1e-12);
}

TEST(Softmax, RowsSumToOneUpTo1e4) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        double mag = (trial % 4 == 0) ? 1e4 : 10.0;
        Tensor x = Tensor::uniform({5, 7}, rng, -mag, mag);
        Tensor s = softmax(x);
        for (int64_t r = 0; r < 5; ++r) {
            double row = 0.0;
            for (int64_t i = 0; i < 7; ++i) row += s.at(r, i);
            EXPECT_NEAR(row, 1.0, 1e-9);
        }
    }
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
    Tensor x({3}, {0.3, -1.2, 2.0});
    x.set_requires_grad(true);
    // check every Jacobian row via one-hot contractions
    for (int j = 0; j < 3; ++j) {
        std::vector<double> onehot(3, 0.0);
        onehot[static_cast<size_t>(j)] = 1.0;
        Tensor w({3}, onehot);
        double err = gradcheck([&]() { return sum(mul(softmax(x), w)); }, {&x});
        EXPECT_LT(err, 1e-5) << "row " << j;
    }
}

TEST(LayerNorm, ConstantRowAbsorbedByEps) {
    Tensor x({2, 4}, std::vector<double>(8, 3.25));
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});
    Tensor y = layer_norm(x, gain, bias, 1e-5);
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], 0.0, 1e-12);
}

TEST(LayerNorm, AlreadyNormalizedRow) {
    Tensor x({1, 2}, {1, -1});
    Tensor gain = Tensor::full({2}, 1.0);
    Tensor bias = Tensor::zeros({2});
    Tensor y = layer_norm(x, gain, bias, 1e-12);
    EXPECT_NEAR(y.data()[0], 1.0, 1e-6);
    EXPECT_NEAR(y.data()[1], -1.0, 1e-6);
}

TEST(LayerNorm, GradMatchesFiniteDifferences) {
    Rng rng(11);
    Tensor x = Tensor::randn({4, 8}, rng);
    Tensor gain = Tensor::uniform({8}, rng, 0.5, 1.5);
    Tensor bias = Tensor::randn({8}, rng);
    Tensor w = Tensor::randn({4, 8}, rng);  // random contraction weights
    x.set_requires_grad(true);
    gain.set_requires_grad(true);
    bias.set_requires_grad(true);
    double err = gradcheck(
        [&]() { return sum(mul(layer_norm(x, gain, bias, 1e-5), w)); },
        {&x, &gain, &bias});
    EXPECT_LT(err, 1e-4);
}

TEST(Gelu, ZeroAndAsymptotes) {
    Tensor x({3}, {0.0, 30.0, -30.0});
    Tensor y = gelu(x);
    EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
    EXPECT_NEAR(y.data()[1], 30.0, 1e-9);
    EXPECT_NEAR(y.data()[2], 0.0, 1e-9);
}

TEST(Gelu, GradMatchesFiniteDifferences) {
    Tensor x({5}, {-3.0, -0.5, 0.0, 0.5, 3.0});
    x.set_requires_grad(true);
    Tensor w({5}, {1.0, -2.0, 0.7, 1.3, -0.4});
    double err = gradcheck([&]() { return sum(mul(gelu(x), w)); }, {&x});
    EXPECT_LT(err, 1e-4);
}

TEST(Concat, ShapesAndIdentity) {
    Rng rng(5);
    Tensor a = Tensor::randn({2, 3}, rng);
    Tensor b = Tensor::randn({2, 5}, rng);
    Tensor c = concat({a, b}, 1);
    EXPECT_EQ(c.shape(), (Shape{2, 8}));
    EXPECT_DOUBLE_EQ(c.at(1, 3), b.at(1, 0));

    Tensor only = concat({a}, 0);
    EXPECT_EQ(only.vec(), a.vec());
}

TEST(Concat, ShapeMismatchThrows) {
    Tensor a({2, 3});
    Tensor b({3, 3});
    EXPECT_THROW(concat({a, b}, 1), DimError);
}

TEST(Concat, GradientSlicesBack) {
    Rng rng(9);
    Tensor a = Tensor::randn({2, 3}, rng);
    Tensor b = Tensor::randn({4, 3}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    sum(concat({a, b}, 0)).backward();
    for (double g : a.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
    for (double g : b.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(SliceGather, GradChecks) {
    Rng rng(13);
    Tensor x = Tensor::randn({5, 4}, rng);
    x.set_requires_grad(true);
    Tensor w1 = Tensor::randn({2, 4}, rng);
    double err = gradcheck([&]() { return sum(mul(slice(x, 0, 1, 2), w1)); }, {&x});
    EXPECT_LT(err, 1e-6);

    x.zero_grad();
    Tensor w2 = Tensor::randn({3, 4}, rng);
    double err2 = gradcheck(
        [&]() { return sum(mul(gather_rows(x, {4, 0, 4}), w2)); }, {&x});
    EXPECT_LT(err2, 1e-6);
}

TEST(SliceGather, BoundsChecked) {
    Tensor x({3, 2});
    EXPECT_THROW(slice(x, 0, 2, 2), DimError);
    EXPECT_THROW(slice(x, 2, 0, 1), DimError);
    EXPECT_THROW(gather_rows(x, {3}), DimError);
}

TEST(RowVec, AffineGradChecks) {
    Rng rng(17);
    Tensor x = Tensor::randn({6, 4}, rng);
    Tensor v = Tensor::randn({4}, rng);
    Tensor w = Tensor::randn({6, 4}, rng);
    x.set_requires_grad(true);
    v.set_requires_grad(true);
    double err = gradcheck(
        [&]() { return sum(mul(add_rowvec(mul_rowvec(x, v), v), w)); }, {&x, &v});
    EXPECT_LT(err, 1e-5);

    Tensor u = Tensor::randn({3}, rng);
    u.set_requires_grad(true);
    Tensor w2 = Tensor::randn({5, 3}, rng);
    double err2 = gradcheck([&]() { return sum(mul(broadcast_row(u, 5), w2)); }, {&u});
    EXPECT_LT(err2, 1e-6);
}

TEST(Backward, SumGivesOnes) {
    Tensor w({4}, {0.5, -1.0, 2.0, 7.0});
    w.set_requires_grad(true);
    sum(w).backward();
    for (double g : w.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, HalfSumOfSquares) {
    Tensor w({2}, {1.0, 2.0});
    w.set_requires_grad(true);
    scale(sum(mul(w, w)), 0.5).backward();
    EXPECT_DOUBLE_EQ(w.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(w.grad()[1], 2.0);
}

TEST(Backward, TwoPathAccumulation) {
    // y = x*x + 3x used twice: dy/dx = 2x + 3
    Tensor x({1}, {2.5});
    x.set_requires_grad(true);
    add(mul(x, x), scale(x, 3.0)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0 * 2.5 + 3.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
    Tensor w({3}, {1, 2, 3});
    w.set_requires_grad(true);
    Tensor loss = sum(mul(w, w));
    loss.backward();
    loss.backward();
    EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);  // 2*1 twice
    w.zero_grad();
    loss.backward();
    EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
}

TEST(Backward, NonScalarLossIsContractError) {
    Tensor w({2}, {1, 2});
    w.set_requires_grad(true);
    Tensor y = mul(w, w);
    EXPECT_THROW(y.backward(), ContractError);
}

TEST(Backward, UntrackedLeafNeverAccumulates) {
    Tensor a({2}, {1, 2});  // requires_grad stays false
    Tensor w({2}, {3, 4});
    w.set_requires_grad(true);
    sum(mul(a, w)).backward();
    EXPECT_FALSE(a.has_grad());
    EXPECT_TRUE(w.has_grad());
}

TEST(Backward, NoGradGuardDisablesRecording) {
    Tensor w({2}, {1, 2});
    w.set_requires_grad(true);
    NoGradGuard ng;
    Tensor y = sum(mul(w, w));
    EXPECT_THROW(y.backward(), ContractError);
}

TEST(Mse, ValueAndGrad) {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 2}, {0, 2, 3, 2});
    EXPECT_DOUBLE_EQ(mse(a, b).value(), (1.0 + 0.0 + 0.0 + 4.0) / 4.0);

    Rng rng(23);
    Tensor x = Tensor::randn({3, 3}, rng);
    Tensor t = Tensor::randn({3, 3}, rng);
    x.set_requires_grad(true);
    double err = gradcheck([&]() { return mse(x, t); }, {&x});
    EXPECT_LT(err, 1e-6);
}

TEST(Transpose, ValueAndGrad) {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = transpose(a);
    EXPECT_EQ(t.shape(), (Shape{3, 2}));
    EXPECT_DOUBLE_EQ(t.at(2, 1), 6.0);

    Rng rng(29);
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor w = Tensor::randn({4, 3}, rng);
    x.set_requires_grad(true);
    double err = gradcheck([&]() { return sum(mul(transpose(x), w)); }, {&x});
    EXPECT_LT(err, 1e-6);
}

TEST(FusedOps, LinearMatchesComposition) {
    Rng rng(37);
    Tensor x = Tensor::randn({5, 3}, rng);
    Tensor w = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4}, rng);
    Tensor fused = linear(x, w, b);
    Tensor composed = add_rowvec(matmul(x, w), b);
    EXPECT_EQ(fused.shape(), composed.shape());
    for (int64_t i = 0; i < fused.numel(); ++i)
        EXPECT_NEAR(fused.data()[i], composed.data()[i], 1e-14);

    x.set_requires_grad(true);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    Tensor t = Tensor::randn({5, 4}, rng);
    double err = gradcheck([&]() { return mse(linear(x, w, b), t); }, {&x, &w, &b});
    EXPECT_LT(err, 1e-6);
    EXPECT_THROW(linear(x, Tensor({2, 4}), b), DimError);
}

TEST(FusedOps, LnModulateMatchesLayerNorm) {
    Rng rng(41);
    Tensor x = Tensor::randn({4, 6}, rng);
    Tensor shift = Tensor::randn({6}, rng);
    Tensor scl = Tensor::uniform({6}, rng, -0.5, 0.5);
    Tensor fused = ln_modulate(x, shift, scl);
    Tensor gain = add_scalar(scl, 1.0);
    Tensor composed = layer_norm(x, gain, shift);
    for (int64_t i = 0; i < fused.numel(); ++i)
        EXPECT_NEAR(fused.data()[i], composed.data()[i], 1e-13);

    x.set_requires_grad(true);
    shift.set_requires_grad(true);
    scl.set_requires_grad(true);
    Tensor t = Tensor::randn({4, 6}, rng);
    double err = gradcheck([&]() { return mse(ln_modulate(x, shift, scl), t); },
                           {&x, &shift, &scl});
    EXPECT_LT(err, 1e-4);
}

TEST(FusedOps, GateAddGradChecks) {
    Rng rng(43);
    Tensor x = Tensor::randn({5, 4}, rng);
    Tensor y = Tensor::randn({5, 4}, rng);
    Tensor g = Tensor::randn({4}, rng);
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    g.set_requires_grad(true);
    Tensor t = Tensor::randn({5, 4}, rng);
    double err = gradcheck([&]() { return mse(gate_add(x, y, g), t); }, {&x, &y, &g});
    EXPECT_LT(err, 1e-6);
}

TEST(FusedOps, AttentionMatchesCompositionAndGradChecks) {
    Rng rng(47);
    const int64_t sq = 3, skv = 5, d = 8;
    const int heads = 2;
    Tensor q = Tensor::randn({sq, d}, rng);
    Tensor k = Tensor::randn({skv, d}, rng);
    Tensor v = Tensor::randn({skv, d}, rng);

    Tensor fused = multi_head_attention(q, k, v, heads);
    // reference composition from the primitive ops
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice(q, 1, h * 4, 4), kh = slice(k, 1, h * 4, 4), vh = slice(v, 1, h * 4, 4);
        Tensor probs = softmax(scale(matmul(qh, transpose(kh)), 1.0 / 2.0));
        outs.push_back(matmul(probs, vh));
    }
    Tensor composed = concat(outs, 1);
    for (int64_t i = 0; i < fused.numel(); ++i)
        EXPECT_NEAR(fused.data()[i], composed.data()[i], 1e-13);

    q.set_requires_grad(true);
    k.set_requires_grad(true);
    v.set_requires_grad(true);
    Tensor t = Tensor::randn({sq, d}, rng);
    double err = gradcheck(
        [&]() { return mse(multi_head_attention(q, k, v, heads), t); }, {&q, &k, &v});
    EXPECT_LT(err, 1e-4);

    EXPECT_THROW(multi_head_attention(q, k, v, 3), DimError);
    EXPECT_THROW(multi_head_attention(q, slice(k, 1, 0, 4), v, 2), DimError);
}

// End-to-end composition: a d=8 single-head attention block with residual,
// checked against the finite-difference oracle in double precision.
TEST(Backward, ToyAttentionBlockMatchesFiniteDifferences) {
    Rng rng(31);
    const int64_t seq = 4, d = 8;
    Tensor x = Tensor::randn({seq, d}, rng);
    Tensor wq = Tensor::uniform({d, d}, rng, -0.4, 0.4);
    Tensor wk = Tensor::uniform({d, d}, rng, -0.4, 0.4);
    Tensor wv = Tensor::uniform({d, d}, rng, -0.4, 0.4);
    Tensor wo = Tensor::uniform({d, d}, rng, -0.4, 0.4);
    Tensor gain = Tensor::full({d}, 1.0);
    Tensor bias = Tensor::zeros({d});
    Tensor target = Tensor::randn({seq, d}, rng);
    for (Tensor* p : {&x, &wq, &wk, &wv, &wo, &gain, &bias}) p->set_requires_grad(true);

    auto block = [&]() {
        Tensor xn = layer_norm(x, gain, bias, 1e-5);
        Tensor q = matmul(xn, wq);
        Tensor k = matmul(xn, wk);
        Tensor v = matmul(xn, wv);
        Tensor attn = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(d))));
        Tensor out = matmul(matmul(attn, v), wo);
        return mse(add(x, out), target);
    };
    double err = gradcheck(block, {&x, &wq, &wk, &wv, &wo, &gain, &bias});
    EXPECT_LT(err, 1e-3);
}
