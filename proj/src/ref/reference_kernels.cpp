#include "reference_kernels.hpp"

#include <algorithm>

#include "fpdn/errors.hpp"

namespace fpdn::ref {

Tensor conv2d_naive(const Tensor& input, const Tensor& weights, const Tensor& bias, int kernel,
                    int dilation, int stride, int padding) {
    const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = weights.dim(0);
    if (weights.dim(1) != Ci) {
        throw ShapeError("conv2d_naive: channel mismatch");
    }
    const int ek = kernel + (kernel - 1) * (dilation - 1);
    const int Ho = (H + 2 * padding - ek) / stride + 1;
    const int Wo = (W + 2 * padding - ek) / stride + 1;
    Tensor out({N, Co, Ho, Wo});
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = bias.data()[co];
                    for (int ci = 0; ci < Ci; ++ci) {
                        for (int kh = 0; kh < kernel; ++kh) {
                            for (int kw = 0; kw < kernel; ++kw) {
                                const int ih = oh * stride - padding + kh * dilation;
                                const int iw = ow * stride - padding + kw * dilation;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(
                                           weights.at(co, ci, kh, kw)) *
                                       input.at(n, ci, ih, iw);
                            }
                        }
                    }
                    out.at(n, co, oh, ow) = static_cast<float>(acc);
                }
            }
        }
    }
    return out;
}

Tensor conv2d_transposed_naive(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = weights.dim(1);
    Tensor out({N, Co, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            for (int oh = 0; oh < 2 * H; ++oh) {
                for (int ow = 0; ow < 2 * W; ++ow) {
                    out.at(n, co, oh, ow) = bias.data()[co];
                }
            }
        }
    }
    for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < Ci; ++ci) {
            for (int h = 0; h < H; ++h) {
                for (int w = 0; w < W; ++w) {
                    const float v = input.at(n, ci, h, w);
                    for (int co = 0; co < Co; ++co) {
                        for (int kh = 0; kh < 2; ++kh) {
                            for (int kw = 0; kw < 2; ++kw) {
                                out.at(n, co, 2 * h + kh, 2 * w + kw) +=
                                    v * weights.at(ci, co, kh, kw);
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor max_pool2_naive(const Tensor& input) {
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor out({N, C, H / 2, W / 2});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            for (int oh = 0; oh < H / 2; ++oh) {
                for (int ow = 0; ow < W / 2; ++ow) {
                    float best = input.at(n, c, 2 * oh, 2 * ow);
                    best = std::max(best, input.at(n, c, 2 * oh, 2 * ow + 1));
                    best = std::max(best, input.at(n, c, 2 * oh + 1, 2 * ow));
                    best = std::max(best, input.at(n, c, 2 * oh + 1, 2 * ow + 1));
                    out.at(n, c, oh, ow) = best;
                }
            }
        }
    }
    return out;
}

}  // namespace fpdn::ref
