#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fpdn/ops.hpp"
#include "fpdn/rng.hpp"
#include "fpdn/tape.hpp"
#include "fpdn/tensor.hpp"

namespace fpdn {

// Architecture description. Four encoder blocks joined by 2x2 max pooling,
// channel count doubling per pool up to channel_cap, three decoder blocks
// with transposed-conv upsampling, encoder skips fed in by channel
// concatenation, and an additive residual shortcut inside each decoder block.
struct ModelSpec {
    int base_channels = 32;
    int channel_cap = 256;
    int encoder_blocks = 4;
    int decoder_blocks = 3;
    std::array<int, 3> dilations{1, 2, 5};
    float dropout_rate = 0.3f;
    int input_channels = 1;
    int output_channels = 1;

    void validate() const;

    // Channels of encoder block `i` (0-based): min(base_channels * 2^i, cap).
    int encoder_channels(int i) const;

    // Input H and W must be divisible by this (one halving per pool).
    int spatial_divisor() const { return 1 << (encoder_blocks - 1); }

    bool operator==(const ModelSpec&) const = default;
};

// Named learnable tensors plus batch-norm running stats. Keys are
// hierarchical ("enc2.conv1.weight", "dec1.bn2.gamma", "out.bias"); the map
// iterates lexicographically, which fixes the optimizer ordering.
struct ModelParams {
    std::map<std::string, Tensor> values;
    std::int64_t bn_batches_tracked = 0;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;

    // Running BN stats are carried in `values` but are not optimized.
    static bool learnable(const std::string& name);
};

struct ParamEntry {
    const std::string* name;
    Tensor* value;
    const Tensor* grad;  // nullptr when no gradient flowed or no tape given
};

// He-normal conv weights (std = sqrt(2/fan_in)), zero biases, unit gamma,
// zero beta, PReLU slopes 0.25. Deterministic for a given seed.
ModelParams build_model(const ModelSpec& spec, Rng& rng);

// The full name -> shape table build_model would produce, without drawing.
std::map<std::string, std::vector<int>> expected_param_shapes(const ModelSpec& spec);

// Learnable parameters in lexicographic name order with their gradients.
std::vector<ParamEntry> parameter_iter(ModelParams& params, const GradTape* tape = nullptr);

// Whole-network forward pass; output shape equals input shape and every
// output value lies in (0,1). Train mode needs an rng for dropout.
Tensor forward(const ModelSpec& spec, ModelParams& params, const Tensor& input, Mode mode,
               Rng* rng = nullptr, GradTape* tape = nullptr);

// Block-level entry points used by forward() and exercised directly in tests.
Tensor encoder_block(const ModelSpec& spec, ModelParams& params, const std::string& prefix,
                     const Tensor& input, Mode mode, Rng* rng, GradTape* tape);
Tensor decoder_block(const ModelSpec& spec, ModelParams& params, const std::string& prefix,
                     const Tensor& below, const Tensor& skip, Mode mode, Rng* rng, GradTape* tape);

}  // namespace fpdn
