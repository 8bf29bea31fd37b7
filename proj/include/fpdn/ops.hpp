#pragma once

#include <cstdint>
#include <vector>

#include "fpdn/rng.hpp"
#include "fpdn/tape.hpp"
#include "fpdn/tensor.hpp"

namespace fpdn {

enum class Mode { kTrain, kEval };

// Geometry of one convolution. Square kernels only; the network uses k=3
// dilated convs, k=1 projections, and k=2/s=2 transposed upsampling.
struct ConvSpec {
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 3;
    int dilation = 1;
    int stride = 1;
    int padding = 0;
    bool transposed = false;

    // Side of the dilated kernel footprint: kernel + (kernel-1)*(dilation-1).
    int effective_kernel() const { return kernel + (kernel - 1) * (dilation - 1); }

    // 3x3 conv that preserves HxW at stride 1 (padding == dilation).
    static ConvSpec same3x3(int in_ch, int out_ch, int dilation) {
        return ConvSpec{in_ch, out_ch, 3, dilation, 1, dilation, false};
    }
    static ConvSpec proj1x1(int in_ch, int out_ch) {
        return ConvSpec{in_ch, out_ch, 1, 1, 1, 0, false};
    }
    // k=2, s=2 transposed conv that exactly doubles HxW.
    static ConvSpec upsample2x(int in_ch, int out_ch) {
        return ConvSpec{in_ch, out_ch, 2, 1, 2, 0, true};
    }

    void validate() const;
};

struct PoolResult {
    Tensor output;
    std::vector<std::int32_t> argmax;  // flat input index per output element
};

namespace ops {

// Dilated cross-correlation with zero padding.
// input [N,Ci,H,W], weights [Co,Ci,k,k], bias [Co] -> [N,Co,H',W'] with
// H' = (H + 2*padding - effective_kernel)/stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
              const ConvSpec& spec, GradTape* tape = nullptr);

// Transposed conv, k=2/s=2/p=0 only. input [N,Ci,H,W], weights [Ci,Co,2,2],
// bias [Co] -> [N,Co,2H,2W]. Exact adjoint of the matching forward conv.
Tensor conv2d_transposed(const Tensor& input, const Tensor& weights, const Tensor& bias,
                         const ConvSpec& spec, GradTape* tape = nullptr);

// Disjoint 2x2 max pooling; H and W must be even. Ties resolve to the first
// position in row-major window order, and backward routes the gradient there.
PoolResult max_pool2(const Tensor& input, GradTape* tape = nullptr);

// Batch normalization over (N,H,W) per channel. Train mode normalizes by
// batch statistics and folds them into the running stats with momentum;
// eval mode uses running stats and requires batches_tracked > 0.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, std::int64_t& batches_tracked,
                  Mode mode, GradTape* tape = nullptr);

// out = x for x > 0, alpha_c * x otherwise; one learnable slope per channel.
Tensor prelu(const Tensor& input, const Tensor& alpha, GradTape* tape = nullptr);

// Inverted dropout: train mode zeroes elements with probability `rate` and
// scales survivors by 1/(1-rate); eval mode is the identity.
Tensor dropout(const Tensor& input, float rate, Rng& rng, Mode mode, GradTape* tape = nullptr);

Tensor sigmoid(const Tensor& input, GradTape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);

// Concatenates along the channel axis; N, H, W must match.
Tensor concat_channels(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);

// Scalar mean of (pred - target)^2 over every element in the batch.
Tensor mse_loss(const Tensor& pred, const Tensor& target, GradTape* tape = nullptr);

constexpr float kBatchNormEpsilon = 1e-5f;
constexpr float kBatchNormMomentum = 0.99f;

}  // namespace ops
}  // namespace fpdn
