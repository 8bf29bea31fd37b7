#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "fpdn/errors.hpp"
#include "fpdn/ops.hpp"
#include "fpdn/rng.hpp"
#include "ref/reference_kernels.hpp"

using namespace fpdn;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        t.data()[i] = static_cast<float>(rng.uniform(lo, hi));
    }
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    }
    return m;
}

}  // namespace

TEST_CASE("conv2d 3x3 ones kernel on 3x3 ramp") {
    Tensor input({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor b = Tensor::zeros({1});
    Tensor out = ops::conv2d(input, w, b, ConvSpec::same3x3(1, 1, 1));
    CHECK(out.shape() == std::vector<int>{1, 1, 3, 3});
    CHECK(out.at(0, 0, 1, 1) == doctest::Approx(45.0f));
    // Matches the serial reference everywhere.
    Tensor ref = ref::conv2d_naive(input, w, b, 3, 1, 1, 1);
    CHECK(max_abs_diff(out, ref) < 1e-5);
}

TEST_CASE("conv2d dilation 2 on all-ones 5x5") {
    Tensor input = Tensor::full({1, 1, 5, 5}, 1.0f);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor b = Tensor::zeros({1});
    Tensor out = ops::conv2d(input, w, b, ConvSpec::same3x3(1, 1, 2));
    // All nine dilated taps land on the grid for the center output.
    CHECK(out.at(0, 0, 2, 2) == doctest::Approx(9.0f));
    Tensor ref = ref::conv2d_naive(input, w, b, 3, 2, 1, 2);
    CHECK(max_abs_diff(out, ref) < 1e-5);
}

TEST_CASE("conv2d 1x1 identity kernel") {
    Rng rng(7);
    Tensor input = random_tensor({2, 1, 4, 5}, rng);
    Tensor w({1, 1, 1, 1}, {1.0f});
    Tensor b = Tensor::zeros({1});
    Tensor out = ops::conv2d(input, w, b, ConvSpec::proj1x1(1, 1));
    CHECK(max_abs_diff(out, input) == 0.0);
}

TEST_CASE("conv2d matches naive reference over a shape/dilation grid") {
    Rng rng(123);
    for (int n : {1, 2}) {
        for (int ci : {1, 3}) {
            for (int co : {1, 2}) {
                for (int hw : {5, 8}) {
                    for (int d : {1, 2, 5}) {
                        Tensor input = random_tensor({n, ci, hw, hw}, rng);
                        Tensor w = random_tensor({co, ci, 3, 3}, rng);
                        Tensor b = random_tensor({co}, rng);
                        Tensor out = ops::conv2d(input, w, b, ConvSpec::same3x3(ci, co, d));
                        Tensor ref = ref::conv2d_naive(input, w, b, 3, d, 1, d);
                        CHECK(max_abs_diff(out, ref) < 1e-5);
                    }
                }
            }
        }
    }
}

TEST_CASE("conv2d stride 2 matches naive reference") {
    Rng rng(5);
    Tensor input = random_tensor({2, 2, 6, 6}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    ConvSpec spec{2, 3, 3, 1, 2, 1, false};
    Tensor out = ops::conv2d(input, w, b, spec);
    Tensor ref = ref::conv2d_naive(input, w, b, 3, 1, 2, 1);
    CHECK(out.shape() == ref.shape());
    CHECK(max_abs_diff(out, ref) < 1e-5);
}

TEST_CASE("conv2d errors") {
    Tensor input = Tensor::zeros({1, 2, 4, 4});
    Tensor w = Tensor::zeros({3, 2, 3, 3});
    Tensor b = Tensor::zeros({3});
    // Channel disagreement between input and spec.
    CHECK_THROWS_AS(ops::conv2d(input, w, b, ConvSpec::same3x3(4, 3, 1)), ShapeError);
    // Weight table disagreement with the spec.
    CHECK_THROWS_AS(ops::conv2d(input, w, b, ConvSpec::same3x3(2, 4, 1)), ShapeError);
    // Spatially too small for the effective kernel.
    Tensor tiny = Tensor::zeros({1, 2, 2, 2});
    CHECK_THROWS_AS(ops::conv2d(tiny, w, b, ConvSpec{2, 3, 3, 5, 1, 0, false}), ShapeError);
    // Non-finite input is rejected.
    Tensor bad = Tensor::zeros({1, 2, 4, 4});
    bad.data()[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(ops::conv2d(bad, w, b, ConvSpec::same3x3(2, 3, 1)), NumericError);
}

TEST_CASE("receptive field of one dilated conv") {
    // One-hot input; the output support is exactly the set of positions whose
    // dilated taps reach the hot pixel.
    const int H = 15, W = 15, d = 2;
    Tensor input = Tensor::zeros({1, 1, H, W});
    input.at(0, 0, 7, 7) = 1.0f;
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor b = Tensor::zeros({1});
    Tensor out = ops::conv2d(input, w, b, ConvSpec::same3x3(1, 1, d));
    for (int h = 0; h < H; ++h) {
        for (int ww = 0; ww < W; ++ww) {
            const bool hit = std::abs(h - 7) % d == 0 && std::abs(h - 7) <= d &&
                             std::abs(ww - 7) % d == 0 && std::abs(ww - 7) <= d;
            CHECK((out.at(0, 0, h, ww) != 0.0f) == hit);
        }
    }
}

TEST_CASE("transposed conv places the kernel per input value") {
    Tensor input({1, 1, 1, 1}, {3.0f});
    Tensor w({1, 1, 2, 2}, {0.5f, -1.0f, 2.0f, 0.25f});
    Tensor b = Tensor::zeros({1});
    Tensor out = ops::conv2d_transposed(input, w, b, ConvSpec::upsample2x(1, 1));
    CHECK(out.shape() == std::vector<int>{1, 1, 2, 2});
    CHECK(out.at(0, 0, 0, 0) == doctest::Approx(1.5f));
    CHECK(out.at(0, 0, 0, 1) == doctest::Approx(-3.0f));
    CHECK(out.at(0, 0, 1, 0) == doctest::Approx(6.0f));
    CHECK(out.at(0, 0, 1, 1) == doctest::Approx(0.75f));
}

TEST_CASE("transposed conv stride-2 placements do not overlap") {
    Tensor input = Tensor::full({1, 1, 2, 2}, 1.0f);
    Tensor w = Tensor::full({1, 1, 2, 2}, 1.0f);
    Tensor b = Tensor::zeros({1});
    Tensor out = ops::conv2d_transposed(input, w, b, ConvSpec::upsample2x(1, 1));
    CHECK(out.shape() == std::vector<int>{1, 1, 4, 4});
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 1.0f);
    Tensor ref = ref::conv2d_transposed_naive(input, w, b);
    CHECK(max_abs_diff(out, ref) == 0.0);
}

TEST_CASE("transposed conv matches scatter reference and adjoint identity") {
    Rng rng(11);
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    Tensor w = random_tensor({3, 2, 2, 2}, rng);
    Tensor zero_b2 = Tensor::zeros({2});
    Tensor zero_b3 = Tensor::zeros({3});
    Tensor up = ops::conv2d_transposed(x, w, zero_b2, ConvSpec::upsample2x(3, 2));
    Tensor ref = ref::conv2d_transposed_naive(x, w, zero_b2);
    CHECK(max_abs_diff(up, ref) < 1e-5);

    // <T(x), y> == <x, C(y)> where C is the stride-2 forward conv with the
    // same kernel array.
    Tensor y = random_tensor(up.shape(), rng);
    ConvSpec down{2, 3, 2, 1, 2, 0, false};
    Tensor cy = ops::conv2d(y, w, zero_b3, down);
    double lhs = 0.0, rhs = 0.0;
    for (std::int64_t i = 0; i < up.numel(); ++i) {
        lhs += static_cast<double>(up.data()[i]) * y.data()[i];
    }
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        rhs += static_cast<double>(x.data()[i]) * cy.data()[i];
    }
    CHECK(std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1.0}) < 1e-5);
}

TEST_CASE("transposed conv rejects unsupported geometry") {
    Tensor input = Tensor::zeros({1, 1, 2, 2});
    Tensor w = Tensor::zeros({1, 1, 2, 2});
    Tensor b = Tensor::zeros({1});
    ConvSpec bad = ConvSpec::upsample2x(1, 1);
    bad.stride = 1;
    CHECK_THROWS_AS(ops::conv2d_transposed(input, w, b, bad), UnsupportedError);
    CHECK_THROWS_AS(ops::conv2d_transposed(input, w, b, ConvSpec::same3x3(1, 1, 1)),
                    UnsupportedError);
}

TEST_CASE("max_pool2 basics") {
    Tensor input({1, 1, 2, 2}, {1, 2, 3, 4});
    PoolResult r = ops::max_pool2(input);
    CHECK(r.output.shape() == std::vector<int>{1, 1, 1, 1});
    CHECK(r.output.data()[0] == 4.0f);

    Tensor odd = Tensor::zeros({1, 1, 3, 4});
    CHECK_THROWS_AS(ops::max_pool2(odd), ShapeError);
}

TEST_CASE("max_pool2 tie-break routes gradient to the first window slot") {
    Tensor input = Tensor::full({1, 1, 2, 2}, 0.75f);
    GradTape tape;
    PoolResult r = ops::max_pool2(input, &tape);
    CHECK(r.output.data()[0] == 0.75f);
    CHECK(r.argmax[0] == 0);  // row-major first occurrence
    Tensor loss = ops::mse_loss(r.output, Tensor::zeros({1, 1, 1, 1}), &tape);
    tape.backward(loss);
    const Tensor* g = tape.gradient(input.id());
    REQUIRE(g != nullptr);
    CHECK(g->data()[0] != 0.0f);
    CHECK(g->data()[1] == 0.0f);
    CHECK(g->data()[2] == 0.0f);
    CHECK(g->data()[3] == 0.0f);
}

TEST_CASE("max_pool2 matches per-window brute force") {
    Rng rng(3);
    Tensor input = random_tensor({2, 3, 4, 4}, rng);
    PoolResult r = ops::max_pool2(input);
    CHECK(max_abs_diff(r.output, ref::max_pool2_naive(input)) == 0.0);
}

TEST_CASE("batch_norm constant input normalizes to zero") {
    Tensor input = Tensor::full({2, 1, 2, 2}, 3.25f);
    Tensor gamma = Tensor::full({1}, 1.0f);
    Tensor beta = Tensor::zeros({1});
    Tensor rm({1});
    Tensor rv = Tensor::full({1}, 1.0f);
    std::int64_t tracked = 0;
    Tensor out = ops::batch_norm(input, gamma, beta, rm, rv, tracked, Mode::kTrain);
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(std::abs(out.data()[i]) < 1e-3f);
    CHECK(tracked == 1);
}

TEST_CASE("batch_norm gamma=0 gives beta everywhere") {
    Rng rng(9);
    Tensor input = random_tensor({2, 2, 4, 4}, rng);
    Tensor gamma = Tensor::zeros({2});
    Tensor beta({2}, {0.5f, -1.5f});
    Tensor rm({2});
    Tensor rv = Tensor::full({2}, 1.0f);
    std::int64_t tracked = 0;
    Tensor out = ops::batch_norm(input, gamma, beta, rm, rv, tracked, Mode::kTrain);
    for (int c = 0; c < 2; ++c) {
        for (int n = 0; n < 2; ++n) {
            for (int i = 0; i < 16; ++i) {
                CHECK(out.data()[(n * 2 + c) * 16 + i] == beta.data()[c]);
            }
        }
    }
}

TEST_CASE("batch_norm normalizes per-channel statistics") {
    Rng rng(17);
    Tensor input = random_tensor({4, 3, 8, 8}, rng, -2.0, 5.0);
    Tensor gamma = Tensor::full({3}, 1.0f);
    Tensor beta = Tensor::zeros({3});
    Tensor rm({3});
    Tensor rv = Tensor::full({3}, 1.0f);
    std::int64_t tracked = 0;
    Tensor out = ops::batch_norm(input, gamma, beta, rm, rv, tracked, Mode::kTrain);
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, ssq = 0.0;
        int count = 0;
        for (int n = 0; n < 4; ++n) {
            for (int i = 0; i < 64; ++i) {
                const double v = out.data()[(n * 3 + c) * 64 + i];
                sum += v;
                ssq += v * v;
                ++count;
            }
        }
        const double mean = sum / count;
        const double var = ssq / count - mean * mean;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("batch_norm eval before any training fails") {
    Tensor input = Tensor::zeros({1, 1, 2, 2});
    Tensor gamma = Tensor::full({1}, 1.0f);
    Tensor beta = Tensor::zeros({1});
    Tensor rm({1});
    Tensor rv = Tensor::full({1}, 1.0f);
    std::int64_t tracked = 0;
    CHECK_THROWS_AS(ops::batch_norm(input, gamma, beta, rm, rv, tracked, Mode::kEval),
                    NumericError);
    // One train step unlocks eval.
    ops::batch_norm(input, gamma, beta, rm, rv, tracked, Mode::kTrain);
    CHECK_NOTHROW(ops::batch_norm(input, gamma, beta, rm, rv, tracked, Mode::kEval));
}

TEST_CASE("prelu definitional cases") {
    Tensor input({1, 1, 1, 2}, {-4.0f, 2.0f});
    Tensor alpha({1}, {0.25f});
    Tensor out = ops::prelu(input, alpha);
    CHECK(out.data()[0] == doctest::Approx(-1.0f));
    CHECK(out.data()[1] == doctest::Approx(2.0f));

    // alpha = 1 is the identity map.
    Tensor one({1}, {1.0f});
    Tensor out2 = ops::prelu(input, one);
    CHECK(max_abs_diff(out2, input) == 0.0);
}

TEST_CASE("prelu positive inputs leave alpha untouched") {
    Rng rng(21);
    Tensor input = random_tensor({1, 2, 4, 4}, rng, 0.1, 2.0);
    Tensor alpha = Tensor::full({2}, 0.25f);
    GradTape tape;
    Tensor out = ops::prelu(input, alpha, &tape);
    CHECK(max_abs_diff(out, input) == 0.0);
    Tensor loss = ops::mse_loss(out, Tensor::zeros({1, 2, 4, 4}), &tape);
    tape.backward(loss);
    const Tensor* ga = tape.gradient(alpha.id());
    REQUIRE(ga != nullptr);
    CHECK(ga->data()[0] == 0.0f);
    CHECK(ga->data()[1] == 0.0f);
}

TEST_CASE("dropout rate 0 and eval mode are exact identities") {
    Rng rng(33);
    Tensor input = random_tensor({2, 2, 4, 4}, rng);
    Rng r1(1);
    CHECK(max_abs_diff(ops::dropout(input, 0.0f, r1, Mode::kTrain), input) == 0.0);
    CHECK(max_abs_diff(ops::dropout(input, 0.0f, r1, Mode::kEval), input) == 0.0);
    CHECK(max_abs_diff(ops::dropout(input, 0.3f, r1, Mode::kEval), input) == 0.0);
    CHECK_THROWS_AS(ops::dropout(input, 1.0f, r1, Mode::kTrain), NumericError);
}

TEST_CASE("dropout preserves expectation via inverted scaling") {
    const std::int64_t n = 1'000'000;
    Tensor input = Tensor::full({1, 1, 1000, 1000}, 1.0f);
    Rng rng(1234);
    Tensor out = ops::dropout(input, 0.3f, rng, Mode::kTrain);
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) sum += out.data()[i];
    CHECK(std::abs(sum / static_cast<double>(n) - 1.0) < 0.01);
}

TEST_CASE("dropout is reproducible for a fixed seed") {
    Rng data_rng(2);
    Tensor input = random_tensor({1, 4, 8, 8}, data_rng);
    Rng r1(99), r2(99);
    Tensor a = ops::dropout(input, 0.3f, r1, Mode::kTrain);
    Tensor b = ops::dropout(input, 0.3f, r2, Mode::kTrain);
    CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("sigmoid, add, concat, mse basics") {
    Tensor zero = Tensor::zeros({1, 1, 1, 1});
    CHECK(ops::sigmoid(zero).data()[0] == doctest::Approx(0.5f));

    Rng rng(8);
    Tensor a = random_tensor({1, 2, 3, 3}, rng);
    Tensor b = random_tensor({1, 2, 3, 3}, rng);
    Tensor s = ops::add(a, b);
    for (std::int64_t i = 0; i < s.numel(); ++i) {
        CHECK(s.data()[i] == doctest::Approx(a.data()[i] + b.data()[i]));
    }
    CHECK_THROWS_AS(ops::add(a, Tensor::zeros({1, 2, 3, 4})), ShapeError);

    Tensor c = ops::concat_channels(a, b);
    CHECK(c.shape() == std::vector<int>{1, 4, 3, 3});
    CHECK(c.data()[0] == a.data()[0]);
    CHECK(c.data()[2 * 9] == b.data()[0]);
    CHECK_THROWS_AS(ops::concat_channels(a, Tensor::zeros({1, 2, 4, 3})), ShapeError);

    CHECK(ops::mse_loss(a, a).item() == 0.0f);
    Tensor ones = Tensor::full({2, 1, 3, 3}, 1.0f);
    Tensor zeros = Tensor::zeros({2, 1, 3, 3});
    CHECK(ops::mse_loss(ones, zeros).item() == doctest::Approx(1.0f));
    CHECK_THROWS_AS(ops::mse_loss(a, Tensor::zeros({2, 2, 3, 3})), ShapeError);
}

TEST_CASE("conv2d is bitwise deterministic across repeated runs") {
    Rng rng(77);
    Tensor input = random_tensor({2, 3, 16, 16}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor first = ops::conv2d(input, w, b, ConvSpec::same3x3(3, 4, 2));
    for (int rep = 0; rep < 3; ++rep) {
        Tensor again = ops::conv2d(input, w, b, ConvSpec::same3x3(3, 4, 2));
        CHECK(std::memcmp(again.data(), first.data(),
                          sizeof(float) * static_cast<size_t>(first.numel())) == 0);
    }
}
