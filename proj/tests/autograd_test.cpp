#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fpdn/errors.hpp"
#include "fpdn/gradcheck.hpp"
#include "fpdn/ops.hpp"

using namespace fpdn;

TEST_CASE("chain rule through a 1x1 conv head") {
    // loss = mse(w*x, t) with w=1, x=2, t=0  =>  d loss/d w = 2*(w*x-t)*x = 8.
    Tensor x({1, 1, 1, 1}, {2.0f});
    Tensor w({1, 1, 1, 1}, {1.0f});
    Tensor b = Tensor::zeros({1});
    Tensor t = Tensor::zeros({1, 1, 1, 1});
    GradTape tape;
    Tensor y = ops::conv2d(x, w, b, ConvSpec::proj1x1(1, 1), &tape);
    Tensor loss = ops::mse_loss(y, t, &tape);
    CHECK(loss.item() == doctest::Approx(4.0f));
    tape.backward(loss);
    const Tensor* gw = tape.gradient(w.id());
    REQUIRE(gw != nullptr);
    CHECK(gw->data()[0] == doctest::Approx(8.0f));
    const Tensor* gx = tape.gradient(x.id());
    REQUIRE(gx != nullptr);
    CHECK(gx->data()[0] == doctest::Approx(4.0f));  // 2*(wx-t)*w
}

TEST_CASE("fan-out gradients accumulate by summation") {
    // loss = mse(x+x, 0) = 4x^2  =>  d loss/d x = 8x.
    Tensor x({1, 1, 1, 1}, {1.0f});
    GradTape tape;
    Tensor y = ops::add(x, x, &tape);
    Tensor loss = ops::mse_loss(y, Tensor::zeros({1, 1, 1, 1}), &tape);
    tape.backward(loss);
    const Tensor* gx = tape.gradient(x.id());
    REQUIRE(gx != nullptr);
    CHECK(gx->data()[0] == doctest::Approx(8.0f));
}

TEST_CASE("tensors with no path to the loss have no gradient") {
    Tensor x({1, 1, 1, 1}, {2.0f});
    Tensor unused({1, 1, 1, 1}, {5.0f});
    GradTape tape;
    Tensor y = ops::sigmoid(x, &tape);
    Tensor spur = ops::sigmoid(unused, &tape);  // recorded but disconnected
    Tensor loss = ops::mse_loss(y, Tensor::zeros({1, 1, 1, 1}), &tape);
    tape.backward(loss);
    CHECK(tape.gradient(x.id()) != nullptr);
    CHECK(tape.gradient(unused.id()) == nullptr);
    CHECK(tape.gradient(spur.id()) == nullptr);
}

TEST_CASE("backward rejects losses that are not on the tape") {
    GradTape tape;
    Tensor loose = Tensor::scalar(1.0f);
    CHECK_THROWS_AS(tape.backward(loose), Error);

    Tensor x({1, 1, 1, 2}, {1.0f, 2.0f});
    Tensor y = ops::sigmoid(x, &tape);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);  // non-scalar
}

TEST_CASE("finite-difference suite passes for every op") {
    GradCheckReport report = run_gradcheck(20240817);
    for (const GradCheckEntry& e : report.entries) {
        INFO(e.name, " max_rel_err=", e.max_rel_err, " tol=", e.tolerance);
        CHECK(e.pass);
    }
    CHECK(report.all_pass);
}
