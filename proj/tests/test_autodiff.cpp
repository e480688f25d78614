#include <doctest.h>

#include <cmath>

#include "spcl/autodiff.hpp"
#include "spcl/gradcheck.hpp"
#include "spcl/rng.hpp"

using namespace spcl;

namespace {

Tensor rand_tensor(Shape shape, RandomStream& rng, double lo = -1.0, double hi = 1.0,
                   bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (long i = 0; i < t.size(); ++i) t.values()[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("matmul against identity returns the left operand") {
    RandomStream rng(11);
    Tensor a = rand_tensor({3, 4}, rng);
    Tensor eye = Tensor::zeros({4, 4});
    for (int i = 0; i < 4; ++i) eye.values()[i * 4 + i] = 1.0;
    Tensor out = matmul(a, eye);
    for (long i = 0; i < a.size(); ++i) CHECK(out.values()[i] == a.values()[i]);
}

TEST_CASE("add with zero is the identity and has unit gradient") {
    RandomStream rng(12);
    Tensor x = rand_tensor({2, 3}, rng, -1, 1, true);
    Tensor zero = Tensor::zeros({2, 3});
    Tape tape;
    Tensor y = add(x, zero);
    for (long i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
    tape.backward(reduce_sum(y));
    for (long i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("matmul gradient matches central finite differences") {
    RandomStream rng(13);
    Tensor a = rand_tensor({3, 4}, rng, -1, 1, true);
    Tensor b = rand_tensor({4, 2}, rng, -1, 1, true);
    Tensor w = rand_tensor({3, 2}, rng);
    const double err =
        gradcheck_max_rel_error([&] { return reduce_sum(mul(matmul(a, b), w)); }, {a, b});
    CHECK(err <= 1e-6);
}

TEST_CASE("conv2d with a channel-identity 1x1 kernel reproduces the input") {
    RandomStream rng(14);
    Tensor x = rand_tensor({5, 6, 3}, rng);
    Tensor k = Tensor::zeros({1, 1, 3, 3});
    for (int c = 0; c < 3; ++c) k.values()[c * 3 + c] = 1.0;
    Tensor y = conv2d(x, k, 1, 0);
    REQUIRE(y.shape() == Shape{5, 6, 3});
    for (long i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d zero kernel: zero output, kernel grad is the input correlation") {
    RandomStream rng(15);
    const int h = 6, w = 5, cin = 2, k = 3, cout = 2, stride = 1, pad = 1;
    Tensor x = rand_tensor({h, w, cin}, rng);
    Tensor kern = Tensor::zeros({k, k, cin, cout}, true);
    Tensor wgt = rand_tensor({h, w, cout}, rng);
    {
        Tape tape;
        Tensor out = conv2d(x, kern, stride, pad);
        for (long i = 0; i < out.size(); ++i) CHECK(out.values()[i] == 0.0);
        tape.backward(reduce_sum(mul(out, wgt)));
    }
    // Brute-force correlation of the input with the output gradient.
    for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
            for (int ci = 0; ci < cin; ++ci) {
                for (int co = 0; co < cout; ++co) {
                    double expect = 0.0;
                    for (int oh = 0; oh < h; ++oh) {
                        for (int ow = 0; ow < w; ++ow) {
                            const int ih = oh * stride - pad + ki;
                            const int iw = ow * stride - pad + kj;
                            if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                            expect += x.values()[(ih * w + iw) * cin + ci] *
                                      wgt.values()[(oh * w + ow) * cout + co];
                        }
                    }
                    const double got = kern.grad()[((ki * k + kj) * cin + ci) * cout + co];
                    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("conv2d stride-2 gradient matches finite differences") {
    RandomStream rng(16);
    Tensor x = rand_tensor({8, 8, 3}, rng, -1, 1, true);
    Tensor k = rand_tensor({3, 3, 3, 4}, rng, -1, 1, true);
    Tensor w = rand_tensor({4, 4, 4}, rng);
    const double err =
        gradcheck_max_rel_error([&] { return reduce_sum(mul(conv2d(x, k, 2, 1), w)); }, {x, k});
    CHECK(err <= 1e-5);
}

TEST_CASE("conv2d output extents are ceil(H/stride)") {
    RandomStream rng(17);
    Tensor k = rand_tensor({3, 3, 1, 1}, rng);
    CHECK(conv2d(rand_tensor({7, 9, 1}, rng), k, 2, 1).shape() == Shape{4, 5, 1});
    CHECK(conv2d(rand_tensor({8, 10, 1}, rng), k, 2, 1).shape() == Shape{4, 5, 1});
    CHECK(conv2d(rand_tensor({8, 10, 1}, rng), k, 1, 1).shape() == Shape{8, 10, 1});
}

TEST_CASE("conv2d rejects mismatched channels, bad stride and bad padding") {
    RandomStream rng(18);
    Tensor x = rand_tensor({4, 4, 3}, rng);
    CHECK_THROWS_AS(conv2d(x, rand_tensor({3, 3, 2, 4}, rng), 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(x, rand_tensor({3, 3, 3, 4}, rng), 3, 1), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(x, rand_tensor({3, 3, 3, 4}, rng), 1, 2), std::invalid_argument);
}

TEST_CASE("elementwise ops reject shape mismatches with a dimension message") {
    RandomStream rng(19);
    Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({3, 2}, rng);
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
    CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
    CHECK_THROWS_AS(matmul(a, rand_tensor({2, 2}, rng)), std::invalid_argument);
}

TEST_CASE("channel softmax of uniform logits is uniform") {
    Tensor x = Tensor::full({2, 2, 4}, 0.7);
    Tensor y = channel_softmax(x);
    for (long i = 0; i < y.size(); ++i) CHECK(y.values()[i] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("channel softmax is strictly positive and sums to one per pixel") {
    RandomStream rng(20);
    Tensor x = rand_tensor({5, 4, 7}, rng, -30.0, 30.0);
    Tensor y = channel_softmax(x);
    for (long p = 0; p < 20; ++p) {
        double sum = 0.0;
        for (int c = 0; c < 7; ++c) {
            const double v = y.values()[p * 7 + c];
            CHECK(v > 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
}

TEST_CASE("l2 normalization of the 3-4-5 triple") {
    Tensor x = Tensor::from_values({2}, std::vector<double>{3.0, 4.0});
    Tensor y = l2_normalize_channels(x);
    CHECK(y.values()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(y.values()[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("l2 normalization maps the zero vector to zero and keeps unit norms") {
    RandomStream rng(21);
    Tensor z = Tensor::zeros({1, 1, 4});
    Tensor yz = l2_normalize_channels(z);
    for (long i = 0; i < yz.size(); ++i) CHECK(yz.values()[i] == 0.0);

    Tensor x = rand_tensor({4, 4, 6}, rng, -2.0, 2.0);
    Tensor y = l2_normalize_channels(x);
    for (long p = 0; p < 16; ++p) {
        const double n = y.values().segment(p * 6, 6).matrix().norm();
        CHECK(n == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("bilinear upsample keeps constants constant and passes the gradient check") {
    Tensor c = Tensor::full({3, 3, 2}, 0.37);
    Tensor up = bilinear_upsample(c, 2);
    REQUIRE(up.shape() == Shape{6, 6, 2});
    for (long i = 0; i < up.size(); ++i) CHECK(up.values()[i] == doctest::Approx(0.37).epsilon(1e-15));

    RandomStream rng(22);
    Tensor x = rand_tensor({4, 4, 3}, rng, -1, 1, true);
    Tensor w = rand_tensor({8, 8, 3}, rng);
    const double err = gradcheck_max_rel_error(
        [&] { return reduce_sum(mul(bilinear_upsample(x, 2), w)); }, {x});
    CHECK(err <= 1e-5);
}

TEST_CASE("backward of a sum fills the gradient with ones") {
    RandomStream rng(23);
    Tensor x = rand_tensor({3, 5}, rng, -1, 1, true);
    Tape tape;
    tape.backward(reduce_sum(x));
    for (long i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward requires a scalar root and an active tape for the free function") {
    RandomStream rng(24);
    Tensor x = rand_tensor({2, 2}, rng, -1, 1, true);
    Tape tape;
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("backward of a composed loss matches finite differences") {
    RandomStream rng(25);
    Tensor x = rand_tensor({4, 4, 3}, rng, 0.1, 1.0, true);
    Tensor k = rand_tensor({3, 3, 3, 4}, rng, -0.7, 0.7, true);
    Tensor b = rand_tensor({4}, rng, 0.05, 0.2, true);
    Tensor w = rand_tensor({4, 4, 4}, rng);
    auto loss = [&] {
        Tensor y = relu(bias_add(conv2d(x, k, 1, 1), b));
        return reduce_sum(mul(channel_softmax(y), w));
    };
    CHECK(gradcheck_max_rel_error(loss, {x, k, b}) <= 1e-4);
}

TEST_CASE("running backward twice doubles every gradient exactly") {
    RandomStream rng(26);
    Tensor x = rand_tensor({3, 3}, rng, -1, 1, true);
    Tensor y = rand_tensor({3, 3}, rng, -1, 1, true);
    Tape tape;
    Tensor loss = reduce_sum(mul(mul(x, y), x));
    tape.backward(loss);
    const Eigen::ArrayXd gx = x.grad(), gy = y.grad();
    tape.backward(loss);
    for (long i = 0; i < x.size(); ++i) {
        CHECK(x.grad()[i] == 2.0 * gx[i]);
        CHECK(y.grad()[i] == 2.0 * gy[i]);
    }
}

TEST_CASE("gradient accumulation persists until explicitly zeroed") {
    Tensor x = Tensor::full({2}, 1.5, true);
    {
        Tape tape;
        tape.backward(reduce_sum(x));
    }
    {
        Tape tape;
        tape.backward(reduce_sum(x));
    }
    CHECK(x.grad()[0] == 2.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("forward evaluation is bit-deterministic") {
    auto run = [] {
        RandomStream rng(27);
        Tensor x = rand_tensor({8, 8, 3}, rng);
        Tensor k = rand_tensor({3, 3, 3, 4}, rng);
        Tensor y = channel_softmax(conv2d(x, k, 2, 1));
        return y;
    };
    Tensor a = run(), b = run();
    for (long i = 0; i < a.size(); ++i) CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("reductions over axes drop the right extents") {
    RandomStream rng(28);
    Tensor x = rand_tensor({2, 3, 4}, rng);
    CHECK(reduce_sum(x, {0}).shape() == Shape{3, 4});
    CHECK(reduce_sum(x, {0, 2}).shape() == Shape{3});
    CHECK(reduce_sum(x).shape() == Shape{1});
    double total = 0.0;
    for (long i = 0; i < x.size(); ++i) total += x.values()[i];
    CHECK(reduce_sum(x).value() == doctest::Approx(total).epsilon(1e-12));
    CHECK(reduce_mean(x).value() == doctest::Approx(total / 24.0).epsilon(1e-12));
}

TEST_CASE("no gradients are recorded without an active tape") {
    RandomStream rng(29);
    Tensor x = rand_tensor({2, 2}, rng, -1, 1, true);
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK_THROWS_AS(backward(y), std::logic_error);
}
