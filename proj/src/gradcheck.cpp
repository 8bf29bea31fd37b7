#include "fpdn/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "fpdn/model.hpp"
#include "fpdn/ops.hpp"

namespace fpdn {
namespace {

constexpr double kStep = 1e-3;
constexpr double kOpTolerance = 1e-3;
constexpr double kEndToEndTolerance = 1e-2;

// Scalar mean-squared loss evaluated in double, independent of ops::mse_loss.
double loss_value(const Tensor& out, const Tensor& target) {
    double acc = 0.0;
    const float* a = out.data();
    const float* b = target.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(out.numel());
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    float* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        p[i] = static_cast<float>(rng.uniform(lo, hi));
    }
    return t;
}

// Random values pushed away from zero, for ops with a kink at the origin.
Tensor random_tensor_gapped(std::vector<int> shape, Rng& rng, double gap) {
    Tensor t = random_tensor(std::move(shape), rng);
    float* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        p[i] += p[i] >= 0.0f ? static_cast<float>(gap) : static_cast<float>(-gap);
    }
    return t;
}

// One op check: `run` evaluates the op over `inputs` (recording on the tape
// when given) and returns the output tensor. Every element of every input
// slot is perturbed by +-h.
GradCheckEntry check_op(
    const std::string& name, std::vector<Tensor>& inputs, const Tensor& target,
    const std::function<Tensor(const std::vector<Tensor>&, GradTape*)>& run,
    double tolerance = kOpTolerance) {
    GradTape tape;
    Tensor out = run(inputs, &tape);
    Tensor loss = ops::mse_loss(out, target, &tape);
    tape.backward(loss);

    double max_rel = 0.0;
    for (Tensor& input : inputs) {
        const Tensor* grad = tape.gradient(input.id());
        for (std::int64_t i = 0; i < input.numel(); ++i) {
            const double analytic =
                grad ? static_cast<double>(grad->data()[i]) : 0.0;
            const float saved = input.data()[i];
            input.data()[i] = static_cast<float>(saved + kStep);
            const double up = loss_value(run(inputs, nullptr), target);
            input.data()[i] = static_cast<float>(saved - kStep);
            const double down = loss_value(run(inputs, nullptr), target);
            input.data()[i] = saved;
            const double fd = (up - down) / (2.0 * kStep);
            const double rel = std::abs(fd - analytic) /
                               std::max({std::abs(fd), std::abs(analytic), 1.0});
            max_rel = std::max(max_rel, rel);
        }
    }
    return GradCheckEntry{name, max_rel, tolerance, max_rel < tolerance};
}

GradCheckEntry check_conv(const std::string& name, Rng& rng, std::vector<int> in_shape, int out_ch,
                          int kernel, int dilation, int stride, int padding) {
    const int in_ch = in_shape[1];
    std::vector<Tensor> inputs;
    inputs.push_back(random_tensor(in_shape, rng));
    inputs.push_back(random_tensor({out_ch, in_ch, kernel, kernel}, rng));
    inputs.push_back(random_tensor({out_ch}, rng));
    const ConvSpec spec{in_ch, out_ch, kernel, dilation, stride, padding, false};
    auto run = [spec](const std::vector<Tensor>& in, GradTape* tape) {
        return ops::conv2d(in[0], in[1], in[2], spec, tape);
    };
    const Tensor probe = run(inputs, nullptr);
    Tensor target = random_tensor(probe.shape(), rng);
    return check_op(name, inputs, target, run);
}

GradCheckEntry check_end_to_end(Rng& rng) {
    ModelSpec spec;
    spec.base_channels = 2;
    spec.dropout_rate = 0.3f;
    Rng build_rng(rng.next_u64());
    ModelParams params = build_model(spec, build_rng);
    const Tensor input = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
    const Tensor target = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
    const std::uint64_t dropout_seed = rng.next_u64();

    auto eval_loss = [&](GradTape* tape) {
        Rng drop_rng(dropout_seed);  // identical mask on every evaluation
        Tensor out = forward(spec, params, input, Mode::kTrain, &drop_rng, tape);
        if (tape) {
            Tensor loss = ops::mse_loss(out, target, tape);
            const double v = loss.item();
            tape->backward(loss);
            return v;
        }
        return loss_value(out, target);
    };

    GradTape tape;
    eval_loss(&tape);

    // Spot-check one random scalar in a sample of parameter tensors.
    std::vector<ParamEntry> entries = parameter_iter(params, &tape);
    double max_rel = 0.0;
    for (size_t step = 0; step < 12; ++step) {
        ParamEntry& e = entries[static_cast<size_t>(rng.below(entries.size()))];
        const std::int64_t i = static_cast<std::int64_t>(rng.below(
            static_cast<std::uint64_t>(e.value->numel())));
        const double analytic = e.grad ? static_cast<double>(e.grad->data()[i]) : 0.0;
        const float saved = e.value->data()[i];
        e.value->data()[i] = static_cast<float>(saved + kStep);
        const double up = eval_loss(nullptr);
        e.value->data()[i] = static_cast<float>(saved - kStep);
        const double down = eval_loss(nullptr);
        e.value->data()[i] = saved;
        const double fd = (up - down) / (2.0 * kStep);
        const double rel =
            std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1.0});
        max_rel = std::max(max_rel, rel);
    }
    return GradCheckEntry{"end-to-end toy model", max_rel, kEndToEndTolerance,
                          max_rel < kEndToEndTolerance};
}

}  // namespace

GradCheckReport run_gradcheck(std::uint64_t seed) {
    Rng rng(seed);
    GradCheckReport report;
    auto push = [&report](GradCheckEntry e) {
        report.all_pass = report.all_pass && e.pass;
        report.entries.push_back(std::move(e));
    };

    push(check_conv("conv2d k3 d1", rng, {2, 2, 4, 4}, 3, 3, 1, 1, 1));
    push(check_conv("conv2d k3 d2", rng, {1, 2, 6, 6}, 2, 3, 2, 1, 2));
    push(check_conv("conv2d k3 d5", rng, {1, 1, 6, 6}, 2, 3, 5, 1, 5));
    push(check_conv("conv2d k1", rng, {2, 3, 3, 3}, 2, 1, 1, 1, 0));
    push(check_conv("conv2d k3 s2", rng, {1, 2, 6, 6}, 2, 3, 1, 2, 1));

    {
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor({2, 3, 3, 3}, rng));
        inputs.push_back(random_tensor({3, 2, 2, 2}, rng));
        inputs.push_back(random_tensor({2}, rng));
        const ConvSpec spec = ConvSpec::upsample2x(3, 2);
        auto run = [spec](const std::vector<Tensor>& in, GradTape* tape) {
            return ops::conv2d_transposed(in[0], in[1], in[2], spec, tape);
        };
        Tensor target = random_tensor(run(inputs, nullptr).shape(), rng);
        push(check_op("conv2d_transposed k2 s2", inputs, target, run));
    }
    {
        // Gap the values apart so +-h never reorders a pooling window.
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor_gapped({2, 3, 4, 4}, rng, 0.0));
        float* p = inputs[0].data();
        for (std::int64_t i = 0; i < inputs[0].numel(); ++i) {
            p[i] = std::round(p[i] * 50.0f) / 10.0f + static_cast<float>(i % 7) * 1e-2f;
        }
        auto run = [](const std::vector<Tensor>& in, GradTape* tape) {
            return ops::max_pool2(in[0], tape).output;
        };
        Tensor target = random_tensor(run(inputs, nullptr).shape(), rng);
        push(check_op("max_pool2", inputs, target, run));
    }
    {
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
        inputs.push_back(random_tensor({3}, rng, 0.5, 1.5));
        inputs.push_back(random_tensor({3}, rng));
        auto run = [](const std::vector<Tensor>& in, GradTape* tape) {
            Tensor rm({3});
            Tensor rv = Tensor::full({3}, 1.0f);
            std::int64_t tracked = 0;
            return ops::batch_norm(in[0], in[1], in[2], rm, rv, tracked, Mode::kTrain, tape);
        };
        Tensor target = random_tensor(run(inputs, nullptr).shape(), rng);
        push(check_op("batch_norm train", inputs, target, run));
    }
    {
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
        inputs.push_back(random_tensor({3}, rng, 0.5, 1.5));
        inputs.push_back(random_tensor({3}, rng));
        Tensor rm = random_tensor({3}, rng, -0.2, 0.2);
        Tensor rv = random_tensor({3}, rng, 0.5, 1.5);
        auto run = [rm, rv](const std::vector<Tensor>& in, GradTape* tape) {
            Tensor mean = rm;
            Tensor var = rv;
            std::int64_t tracked = 1;
            return ops::batch_norm(in[0], in[1], in[2], mean, var, tracked, Mode::kEval, tape);
        };
        Tensor target = random_tensor(run(inputs, nullptr).shape(), rng);
        push(check_op("batch_norm eval", inputs, target, run));
    }
    {
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor_gapped({2, 3, 4, 4}, rng, 0.05));
        inputs.push_back(random_tensor({3}, rng, 0.1, 0.5));
        auto run = [](const std::vector<Tensor>& in, GradTape* tape) {
            return ops::prelu(in[0], in[1], tape);
        };
        Tensor target = random_tensor({2, 3, 4, 4}, rng);
        push(check_op("prelu", inputs, target, run));
    }
    {
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor({2, 2, 4, 4}, rng));
        const std::uint64_t mask_seed = rng.next_u64();
        auto run = [mask_seed](const std::vector<Tensor>& in, GradTape* tape) {
            Rng r(mask_seed);
            return ops::dropout(in[0], 0.3f, r, Mode::kTrain, tape);
        };
        Tensor target = random_tensor({2, 2, 4, 4}, rng);
        push(check_op("dropout train", inputs, target, run));
    }
    {
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
        auto run = [](const std::vector<Tensor>& in, GradTape* tape) {
            return ops::sigmoid(in[0], tape);
        };
        Tensor target = random_tensor({2, 3, 4, 4}, rng);
        push(check_op("sigmoid", inputs, target, run));
    }
    {
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
        inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
        auto run = [](const std::vector<Tensor>& in, GradTape* tape) {
            return ops::add(in[0], in[1], tape);
        };
        Tensor target = random_tensor({2, 3, 4, 4}, rng);
        push(check_op("add", inputs, target, run));
    }
    {
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor({1, 2, 4, 4}, rng));
        inputs.push_back(random_tensor({1, 3, 4, 4}, rng));
        auto run = [](const std::vector<Tensor>& in, GradTape* tape) {
            return ops::concat_channels(in[0], in[1], tape);
        };
        Tensor target = random_tensor({1, 5, 4, 4}, rng);
        push(check_op("concat_channels", inputs, target, run));
    }
    {
        // mse_loss is its own scalar head: check both operand slots against
        // a target of zero (loss == mse itself).
        std::vector<Tensor> inputs;
        inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
        inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
        auto run = [](const std::vector<Tensor>& in, GradTape* tape) {
            return ops::mse_loss(in[0], in[1], tape);
        };
        Tensor target = Tensor::zeros({1});
        push(check_op("mse_loss", inputs, target, run));
    }

    push(check_end_to_end(rng));
    return report;
}

}  // namespace fpdn
