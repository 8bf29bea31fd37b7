#include "fpdn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fpdn/errors.hpp"

namespace fpdn {

void ConvSpec::validate() const {
    if (in_channels <= 0 || out_channels <= 0) {
        throw ShapeError("conv spec: channel counts must be positive");
    }
    if (kernel != 1 && kernel != 2 && kernel != 3) {
        throw ShapeError("conv spec: kernel must be 1, 2 or 3, got " + std::to_string(kernel));
    }
    if (dilation <= 0 || stride <= 0 || padding < 0) {
        throw ShapeError("conv spec: dilation/stride must be positive, padding non-negative");
    }
}

namespace ops {
namespace {

void require_rank4(const Tensor& t, const char* what) {
    if (t.rank() != 4) {
        throw ShapeError(std::string(what) + ": expected a 4-D tensor, got rank " +
                         std::to_string(t.rank()));
    }
}

void check_conv_args(const Tensor& input, const Tensor& weights, const Tensor& bias,
                     const ConvSpec& spec, bool transposed) {
    spec.validate();
    require_rank4(input, "conv2d input");
    require_rank4(weights, "conv2d weights");
    const int wi = transposed ? 0 : 1;  // weight dim holding in_channels
    const int wo = transposed ? 1 : 0;
    if (weights.dim(wo) != spec.out_channels) {
        throw ShapeError("conv2d weights: out_channels dim is " + std::to_string(weights.dim(wo)) +
                         ", spec says " + std::to_string(spec.out_channels));
    }
    if (weights.dim(wi) != spec.in_channels) {
        throw ShapeError("conv2d weights: in_channels dim is " + std::to_string(weights.dim(wi)) +
                         ", spec says " + std::to_string(spec.in_channels));
    }
    if (weights.dim(2) != spec.kernel || weights.dim(3) != spec.kernel) {
        throw ShapeError("conv2d weights: kernel dims are " + std::to_string(weights.dim(2)) + "x" +
                         std::to_string(weights.dim(3)) + ", spec says " +
                         std::to_string(spec.kernel));
    }
    if (bias.rank() != 1 || bias.dim(0) != spec.out_channels) {
        throw ShapeError("conv2d bias: expected shape [" + std::to_string(spec.out_channels) +
                         "], got " + shape_str(bias.shape()));
    }
    if (input.dim(1) != spec.in_channels) {
        throw ShapeError("conv2d input: channel dim is " + std::to_string(input.dim(1)) +
                         ", spec says " + std::to_string(spec.in_channels));
    }
    require_finite(input, "conv2d input");
    require_finite(weights, "conv2d weights");
    require_finite(bias, "conv2d bias");
}

// ---- dilated conv, stride 1: shifted-axpy over whole rows -----------------

void conv2d_forward_s1(const float* in, const float* w, const float* bias, float* out, int N,
                       int Ci, int H, int W, int Co, int k, int d, int p, int Ho, int Wo) {
    const std::int64_t planes = static_cast<std::int64_t>(N) * Co;
#pragma omp parallel for schedule(static)
    for (std::int64_t plane = 0; plane < planes; ++plane) {
        const int n = static_cast<int>(plane / Co);
        const int co = static_cast<int>(plane % Co);
        float* out_plane = out + plane * Ho * Wo;
        std::fill(out_plane, out_plane + static_cast<std::int64_t>(Ho) * Wo, bias[co]);
        for (int ci = 0; ci < Ci; ++ci) {
            const float* in_plane = in + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
            const float* w_plane = w + (static_cast<std::int64_t>(co) * Ci + ci) * k * k;
            for (int kh = 0; kh < k; ++kh) {
                const int ih0 = kh * d - p;  // ih = oh + ih0
                const int oh_lo = std::max(0, -ih0);
                const int oh_hi = std::min(Ho, H - ih0);
                for (int kw = 0; kw < k; ++kw) {
                    const float wv = w_plane[kh * k + kw];
                    const int iw0 = kw * d - p;
                    const int ow_lo = std::max(0, -iw0);
                    const int ow_hi = std::min(Wo, W - iw0);
                    for (int oh = oh_lo; oh < oh_hi; ++oh) {
                        const float* in_row = in_plane + static_cast<std::int64_t>(oh + ih0) * W + iw0;
                        float* out_row = out_plane + static_cast<std::int64_t>(oh) * Wo;
                        for (int ow = ow_lo; ow < ow_hi; ++ow) {
                            out_row[ow] += wv * in_row[ow];
                        }
                    }
                }
            }
        }
    }
}

// Generic stride: per-output gather. Only the tests exercise stride > 1.
void conv2d_forward_generic(const float* in, const float* w, const float* bias, float* out, int N,
                            int Ci, int H, int W, int Co, int k, int d, int p, int s, int Ho,
                            int Wo) {
    const std::int64_t planes = static_cast<std::int64_t>(N) * Co;
#pragma omp parallel for schedule(static)
    for (std::int64_t plane = 0; plane < planes; ++plane) {
        const int n = static_cast<int>(plane / Co);
        const int co = static_cast<int>(plane % Co);
        float* out_plane = out + plane * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
                float acc = bias[co];
                for (int ci = 0; ci < Ci; ++ci) {
                    const float* in_plane = in + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
                    const float* w_plane = w + (static_cast<std::int64_t>(co) * Ci + ci) * k * k;
                    for (int kh = 0; kh < k; ++kh) {
                        const int ih = oh * s - p + kh * d;
                        if (ih < 0 || ih >= H) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const int iw = ow * s - p + kw * d;
                            if (iw < 0 || iw >= W) continue;
                            acc += w_plane[kh * k + kw] * in_plane[static_cast<std::int64_t>(ih) * W + iw];
                        }
                    }
                }
                out_plane[static_cast<std::int64_t>(oh) * Wo + ow] = acc;
            }
        }
    }
}

void conv2d_grad_input_s1(const float* gout, const float* w, float* gin, int N, int Ci, int H,
                          int W, int Co, int k, int d, int p, int Ho, int Wo) {
    const std::int64_t planes = static_cast<std::int64_t>(N) * Ci;
#pragma omp parallel for schedule(static)
    for (std::int64_t plane = 0; plane < planes; ++plane) {
        const int n = static_cast<int>(plane / Ci);
        const int ci = static_cast<int>(plane % Ci);
        float* gin_plane = gin + plane * H * W;
        for (int co = 0; co < Co; ++co) {
            const float* gout_plane = gout + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
            const float* w_plane = w + (static_cast<std::int64_t>(co) * Ci + ci) * k * k;
            for (int kh = 0; kh < k; ++kh) {
                const int oh0 = p - kh * d;  // oh = ih + oh0
                const int ih_lo = std::max(0, -oh0);
                const int ih_hi = std::min(H, Ho - oh0);
                for (int kw = 0; kw < k; ++kw) {
                    const float wv = w_plane[kh * k + kw];
                    const int ow0 = p - kw * d;
                    const int iw_lo = std::max(0, -ow0);
                    const int iw_hi = std::min(W, Wo - ow0);
                    for (int ih = ih_lo; ih < ih_hi; ++ih) {
                        const float* gout_row =
                            gout_plane + static_cast<std::int64_t>(ih + oh0) * Wo + ow0;
                        float* gin_row = gin_plane + static_cast<std::int64_t>(ih) * W;
                        for (int iw = iw_lo; iw < iw_hi; ++iw) {
                            gin_row[iw] += wv * gout_row[iw];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_grad_input_generic(const float* gout, const float* w, float* gin, int N, int Ci, int H,
                               int W, int Co, int k, int d, int p, int s, int Ho, int Wo) {
    const std::int64_t planes = static_cast<std::int64_t>(N) * Ci;
#pragma omp parallel for schedule(static)
    for (std::int64_t plane = 0; plane < planes; ++plane) {
        const int n = static_cast<int>(plane / Ci);
        const int ci = static_cast<int>(plane % Ci);
        float* gin_plane = gin + plane * H * W;
        for (int ih = 0; ih < H; ++ih) {
            for (int iw = 0; iw < W; ++iw) {
                float acc = 0.0f;
                for (int co = 0; co < Co; ++co) {
                    const float* gout_plane =
                        gout + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                    const float* w_plane = w + (static_cast<std::int64_t>(co) * Ci + ci) * k * k;
                    for (int kh = 0; kh < k; ++kh) {
                        const int num_h = ih + p - kh * d;
                        if (num_h < 0 || num_h % s != 0) continue;
                        const int oh = num_h / s;
                        if (oh >= Ho) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const int num_w = iw + p - kw * d;
                            if (num_w < 0 || num_w % s != 0) continue;
                            const int ow = num_w / s;
                            if (ow >= Wo) continue;
                            acc += w_plane[kh * k + kw] *
                                   gout_plane[static_cast<std::int64_t>(oh) * Wo + ow];
                        }
                    }
                }
                gin_plane[static_cast<std::int64_t>(ih) * W + iw] += acc;
            }
        }
    }
}

void conv2d_grad_weights(const float* gout, const float* in, float* gw, double* gb, int N, int Ci,
                         int H, int W, int Co, int k, int d, int p, int s, int Ho, int Wo) {
#pragma omp parallel for schedule(static)
    for (int co = 0; co < Co; ++co) {
        for (int ci = 0; ci < Ci; ++ci) {
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const float* gout_plane =
                            gout + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                        const float* in_plane =
                            in + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * s - p + kh * d;
                            if (ih < 0 || ih >= H) continue;
                            for (int ow = 0; ow < Wo; ++ow) {
                                const int iw = ow * s - p + kw * d;
                                if (iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(
                                           gout_plane[static_cast<std::int64_t>(oh) * Wo + ow]) *
                                       in_plane[static_cast<std::int64_t>(ih) * W + iw];
                            }
                        }
                    }
                    gw[((static_cast<std::int64_t>(co) * Ci + ci) * k + kh) * k + kw] =
                        static_cast<float>(acc);
                }
            }
        }
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* gout_plane = gout + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) {
                acc += gout_plane[i];
            }
        }
        gb[co] = acc;
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, const ConvSpec& spec,
              GradTape* tape) {
    if (spec.transposed) {
        throw UnsupportedError("conv2d: spec is transposed; use conv2d_transposed");
    }
    check_conv_args(input, weights, bias, spec, /*transposed=*/false);
    const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = spec.out_channels, k = spec.kernel, d = spec.dilation, p = spec.padding,
              s = spec.stride;
    const int ek = spec.effective_kernel();
    const int Ho = (H + 2 * p - ek) / s + 1;
    const int Wo = (W + 2 * p - ek) / s + 1;
    if (H + 2 * p < ek || Ho < 1) {
        throw ShapeError("conv2d: input height " + std::to_string(H) +
                         " too small for effective kernel " + std::to_string(ek));
    }
    if (W + 2 * p < ek || Wo < 1) {
        throw ShapeError("conv2d: input width " + std::to_string(W) +
                         " too small for effective kernel " + std::to_string(ek));
    }

    Tensor out({N, Co, Ho, Wo});
    if (s == 1) {
        conv2d_forward_s1(input.data(), weights.data(), bias.data(), out.data(), N, Ci, H, W, Co,
                          k, d, p, Ho, Wo);
    } else {
        conv2d_forward_generic(input.data(), weights.data(), bias.data(), out.data(), N, Ci, H, W,
                               Co, k, d, p, s, Ho, Wo);
    }

    if (tape) {
        Tensor saved_in = input;
        Tensor saved_w = weights;
        const std::int64_t in_id = input.id(), w_id = weights.id(), b_id = bias.id(),
                           out_id = out.id();
        tape->record(TapeNode{
            OpKind::kConv2d,
            {in_id, w_id, b_id},
            out_id,
            [saved_in, saved_w, spec, in_id, w_id, b_id, out_id, N, Ci, H, W, Co, k, d, p, s, Ho,
             Wo](GradTape& t) {
                const Tensor& gout = *t.gradient(out_id);
                Tensor gin({N, Ci, H, W});
                if (s == 1) {
                    conv2d_grad_input_s1(gout.data(), saved_w.data(), gin.data(), N, Ci, H, W, Co,
                                         k, d, p, Ho, Wo);
                } else {
                    conv2d_grad_input_generic(gout.data(), saved_w.data(), gin.data(), N, Ci, H, W,
                                              Co, k, d, p, s, Ho, Wo);
                }
                Tensor gw({Co, Ci, k, k});
                std::vector<double> gb(static_cast<size_t>(Co), 0.0);
                conv2d_grad_weights(gout.data(), saved_in.data(), gw.data(), gb.data(), N, Ci, H,
                                    W, Co, k, d, p, s, Ho, Wo);
                Tensor gbias({Co});
                for (int co = 0; co < Co; ++co) gbias.data()[co] = static_cast<float>(gb[co]);
                t.accumulate(in_id, std::move(gin));
                t.accumulate(w_id, std::move(gw));
                t.accumulate(b_id, std::move(gbias));
            }});
    }
    return out;
}

Tensor conv2d_transposed(const Tensor& input, const Tensor& weights, const Tensor& bias,
                         const ConvSpec& spec, GradTape* tape) {
    if (!spec.transposed || spec.kernel != 2 || spec.stride != 2 || spec.padding != 0 ||
        spec.dilation != 1) {
        throw UnsupportedError(
            "conv2d_transposed: only kernel=2, stride=2, padding=0 is supported");
    }
    check_conv_args(input, weights, bias, spec, /*transposed=*/true);
    const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = spec.out_channels;
    const int Ho = 2 * H, Wo = 2 * W;

    Tensor out({N, Co, Ho, Wo});
    const float* in = input.data();
    const float* w = weights.data();
    const float* b = bias.data();
    float* o = out.data();
    const std::int64_t planes = static_cast<std::int64_t>(N) * Co;
#pragma omp parallel for schedule(static)
    for (std::int64_t plane = 0; plane < planes; ++plane) {
        const int n = static_cast<int>(plane / Co);
        const int co = static_cast<int>(plane % Co);
        float* out_plane = o + plane * Ho * Wo;
        std::fill(out_plane, out_plane + static_cast<std::int64_t>(Ho) * Wo, b[co]);
        for (int ci = 0; ci < Ci; ++ci) {
            const float* in_plane = in + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
            const float* wp = w + (static_cast<std::int64_t>(ci) * Co + co) * 4;
            for (int oh = 0; oh < Ho; ++oh) {
                const float* in_row = in_plane + static_cast<std::int64_t>(oh / 2) * W;
                float* out_row = out_plane + static_cast<std::int64_t>(oh) * Wo;
                const float w0 = wp[(oh & 1) * 2 + 0];
                const float w1 = wp[(oh & 1) * 2 + 1];
                for (int iw = 0; iw < W; ++iw) {
                    out_row[2 * iw] += w0 * in_row[iw];
                    out_row[2 * iw + 1] += w1 * in_row[iw];
                }
            }
        }
    }

    if (tape) {
        Tensor saved_in = input;
        Tensor saved_w = weights;
        const std::int64_t in_id = input.id(), w_id = weights.id(), b_id = bias.id(),
                           out_id = out.id();
        tape->record(TapeNode{
            OpKind::kConv2dTransposed,
            {in_id, w_id, b_id},
            out_id,
            [saved_in, saved_w, in_id, w_id, b_id, out_id, N, Ci, H, W, Co, Ho,
             Wo](GradTape& t) {
                const Tensor& gout = *t.gradient(out_id);
                const float* go = gout.data();
                // grad wrt input: forward stride-2 conv with the same kernel.
                Tensor gin({N, Ci, H, W});
                float* gi = gin.data();
                const float* wd = saved_w.data();
                const std::int64_t gplanes = static_cast<std::int64_t>(N) * Ci;
#pragma omp parallel for schedule(static)
                for (std::int64_t plane = 0; plane < gplanes; ++plane) {
                    const int n = static_cast<int>(plane / Ci);
                    const int ci = static_cast<int>(plane % Ci);
                    float* gin_plane = gi + plane * H * W;
                    for (int h = 0; h < H; ++h) {
                        for (int iw = 0; iw < W; ++iw) {
                            float acc = 0.0f;
                            for (int co = 0; co < Co; ++co) {
                                const float* gout_plane =
                                    go + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                                const float* wp =
                                    wd + (static_cast<std::int64_t>(ci) * Co + co) * 4;
                                const float* g00 =
                                    gout_plane + static_cast<std::int64_t>(2 * h) * Wo + 2 * iw;
                                acc += wp[0] * g00[0] + wp[1] * g00[1] + wp[2] * g00[Wo] +
                                       wp[3] * g00[Wo + 1];
                            }
                            gin_plane[static_cast<std::int64_t>(h) * W + iw] = acc;
                        }
                    }
                }
                // grad wrt weights and bias.
                Tensor gw({Ci, Co, 2, 2});
                float* gwd = gw.data();
                const float* ind = saved_in.data();
#pragma omp parallel for schedule(static)
                for (int ci = 0; ci < Ci; ++ci) {
                    for (int co = 0; co < Co; ++co) {
                        for (int kh = 0; kh < 2; ++kh) {
                            for (int kw = 0; kw < 2; ++kw) {
                                double acc = 0.0;
                                for (int n = 0; n < N; ++n) {
                                    const float* in_plane =
                                        ind + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
                                    const float* gout_plane =
                                        go + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                                    for (int h = 0; h < H; ++h) {
                                        const float* gr =
                                            gout_plane +
                                            static_cast<std::int64_t>(2 * h + kh) * Wo + kw;
                                        const float* ir =
                                            in_plane + static_cast<std::int64_t>(h) * W;
                                        for (int iw = 0; iw < W; ++iw) {
                                            acc += static_cast<double>(ir[iw]) * gr[2 * iw];
                                        }
                                    }
                                }
                                gwd[((static_cast<std::int64_t>(ci) * Co + co) * 2 + kh) * 2 +
                                    kw] = static_cast<float>(acc);
                            }
                        }
                    }
                }
                Tensor gbias({Co});
#pragma omp parallel for schedule(static)
                for (int co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const float* gout_plane =
                            go + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) {
                            acc += gout_plane[i];
                        }
                    }
                    gbias.data()[co] = static_cast<float>(acc);
                }
                t.accumulate(in_id, std::move(gin));
                t.accumulate(w_id, std::move(gw));
                t.accumulate(b_id, std::move(gbias));
            }});
    }
    return out;
}

PoolResult max_pool2(const Tensor& input, GradTape* tape) {
    require_rank4(input, "max_pool2 input");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw ShapeError("max_pool2: H and W must be even, got " + std::to_string(H) + "x" +
                         std::to_string(W));
    }
    const int Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    std::vector<std::int32_t> argmax(static_cast<size_t>(out.numel()));
    const float* in = input.data();
    float* o = out.data();
    const std::int64_t planes = static_cast<std::int64_t>(N) * C;
#pragma omp parallel for schedule(static)
    for (std::int64_t plane = 0; plane < planes; ++plane) {
        const float* in_plane = in + plane * H * W;
        float* out_plane = o + plane * Ho * Wo;
        std::int32_t* am_plane = argmax.data() + plane * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
                // Window scanned in row-major order; strict > keeps the first max.
                const std::int64_t base = static_cast<std::int64_t>(2 * oh) * W + 2 * ow;
                float best = in_plane[base];
                std::int64_t best_idx = base;
                const std::int64_t cand[3] = {base + 1, base + W, base + W + 1};
                for (std::int64_t idx : cand) {
                    if (in_plane[idx] > best) {
                        best = in_plane[idx];
                        best_idx = idx;
                    }
                }
                out_plane[static_cast<std::int64_t>(oh) * Wo + ow] = best;
                am_plane[static_cast<std::int64_t>(oh) * Wo + ow] =
                    static_cast<std::int32_t>(best_idx);
            }
        }
    }

    if (tape) {
        const std::int64_t in_id = input.id(), out_id = out.id();
        std::vector<std::int32_t> saved_am = argmax;
        tape->record(TapeNode{
            OpKind::kMaxPool2,
            {in_id},
            out_id,
            [saved_am, in_id, out_id, N, C, H, W, Ho, Wo](GradTape& t) {
                const Tensor& gout = *t.gradient(out_id);
                Tensor gin({N, C, H, W});
                const float* go = gout.data();
                float* gi = gin.data();
                const std::int64_t planes = static_cast<std::int64_t>(N) * C;
                // Windows are disjoint, so the scatter below never collides.
#pragma omp parallel for schedule(static)
                for (std::int64_t plane = 0; plane < planes; ++plane) {
                    const std::int32_t* am = saved_am.data() + plane * Ho * Wo;
                    const float* go_plane = go + plane * Ho * Wo;
                    float* gi_plane = gi + plane * H * W;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) {
                        gi_plane[am[i]] += go_plane[i];
                    }
                }
                t.accumulate(in_id, std::move(gin));
            }});
    }
    return PoolResult{std::move(out), std::move(argmax)};
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, std::int64_t& batches_tracked,
                  Mode mode, GradTape* tape) {
    require_rank4(input, "batch_norm input");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C) {
        throw ShapeError("batch_norm: gamma/beta must have shape [" + std::to_string(C) + "]");
    }
    if (running_mean.rank() != 1 || running_mean.dim(0) != C || running_var.rank() != 1 ||
        running_var.dim(0) != C) {
        throw ShapeError("batch_norm: running stats must have shape [" + std::to_string(C) + "]");
    }
    const std::int64_t count = static_cast<std::int64_t>(N) * H * W;
    if (mode == Mode::kTrain && count < 2) {
        throw NumericError("batch_norm: train mode needs at least 2 values per channel");
    }
    if (mode == Mode::kEval && batches_tracked == 0) {
        throw NumericError("batch_norm: eval requested before any training step or loaded stats");
    }

    Tensor out(input.shape());
    Tensor xhat(input.shape());
    std::vector<float> inv_std(static_cast<size_t>(C));
    const float* in = input.data();
    float* o = out.data();
    float* xh = xhat.data();
    const float* g = gamma.data();
    const float* bt = beta.data();
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;

    if (mode == Mode::kTrain) {
        std::vector<float> batch_mean(static_cast<size_t>(C)), batch_var(static_cast<size_t>(C));
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            double sum = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = in + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) sum += p[i];
            }
            const double mean = sum / static_cast<double>(count);
            double ssq = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = in + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double dvl = p[i] - mean;
                    ssq += dvl * dvl;
                }
            }
            const double var = ssq / static_cast<double>(count);
            batch_mean[c] = static_cast<float>(mean);
            batch_var[c] = static_cast<float>(var);
            const float istd =
                static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(kBatchNormEpsilon)));
            inv_std[c] = istd;
            const float m = static_cast<float>(mean);
            const float gc = g[c], bc = bt[c];
            for (int n = 0; n < N; ++n) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const float v = (in[off + i] - m) * istd;
                    xh[off + i] = v;
                    o[off + i] = gc * v + bc;
                }
            }
        }
        float* rm = running_mean.data();
        float* rv = running_var.data();
        for (int c = 0; c < C; ++c) {
            rm[c] = kBatchNormMomentum * rm[c] + (1.0f - kBatchNormMomentum) * batch_mean[c];
            rv[c] = kBatchNormMomentum * rv[c] + (1.0f - kBatchNormMomentum) * batch_var[c];
        }
        ++batches_tracked;
    } else {
        const float* rm = running_mean.data();
        const float* rv = running_var.data();
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            const float istd = static_cast<float>(
                1.0 / std::sqrt(static_cast<double>(rv[c]) + kBatchNormEpsilon));
            inv_std[c] = istd;
            const float m = rm[c], gc = g[c], bc = bt[c];
            for (int n = 0; n < N; ++n) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const float v = (in[off + i] - m) * istd;
                    xh[off + i] = v;
                    o[off + i] = gc * v + bc;
                }
            }
        }
    }

    if (tape) {
        const std::int64_t in_id = input.id(), g_id = gamma.id(), b_id = beta.id(),
                           out_id = out.id();
        Tensor saved_xhat = xhat;
        Tensor saved_gamma = gamma;
        std::vector<float> saved_istd = inv_std;
        const bool train = mode == Mode::kTrain;
        tape->record(TapeNode{
            OpKind::kBatchNorm,
            {in_id, g_id, b_id},
            out_id,
            [saved_xhat, saved_gamma, saved_istd, train, in_id, g_id, b_id, out_id, N, C,
             plane](GradTape& t) {
                const Tensor& gout = *t.gradient(out_id);
                const float* go = gout.data();
                const float* xh = saved_xhat.data();
                const float* g = saved_gamma.data();
                const std::int64_t count = static_cast<std::int64_t>(N) * plane;
                Tensor gin(saved_xhat.shape());
                Tensor ggamma({C});
                Tensor gbeta({C});
                float* gi = gin.data();
#pragma omp parallel for schedule(static)
                for (int c = 0; c < C; ++c) {
                    double sum_dy = 0.0, sum_dy_xh = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            sum_dy += go[off + i];
                            sum_dy_xh += static_cast<double>(go[off + i]) * xh[off + i];
                        }
                    }
                    ggamma.data()[c] = static_cast<float>(sum_dy_xh);
                    gbeta.data()[c] = static_cast<float>(sum_dy);
                    const float istd = saved_istd[c];
                    const float gc = g[c];
                    if (train) {
                        const float mean_dy = static_cast<float>(sum_dy / count);
                        const float mean_dy_xh = static_cast<float>(sum_dy_xh / count);
                        for (int n = 0; n < N; ++n) {
                            const std::int64_t off =
                                (static_cast<std::int64_t>(n) * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                gi[off + i] = gc * istd *
                                              (go[off + i] - mean_dy - xh[off + i] * mean_dy_xh);
                            }
                        }
                    } else {
                        for (int n = 0; n < N; ++n) {
                            const std::int64_t off =
                                (static_cast<std::int64_t>(n) * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                gi[off + i] = gc * istd * go[off + i];
                            }
                        }
                    }
                }
                t.accumulate(in_id, std::move(gin));
                t.accumulate(g_id, std::move(ggamma));
                t.accumulate(b_id, std::move(gbeta));
            }});
    }
    return out;
}

Tensor prelu(const Tensor& input, const Tensor& alpha, GradTape* tape) {
    require_rank4(input, "prelu input");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (alpha.rank() != 1 || alpha.dim(0) != C) {
        throw ShapeError("prelu: alpha must have one slope per channel, expected [" +
                         std::to_string(C) + "], got " + shape_str(alpha.shape()));
    }
    Tensor out(input.shape());
    const float* in = input.data();
    const float* a = alpha.data();
    float* o = out.data();
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t planes = static_cast<std::int64_t>(N) * C;
#pragma omp parallel for schedule(static)
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const float ac = a[pl % C];
        const float* ip = in + pl * plane;
        float* op = o + pl * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            op[i] = ip[i] > 0.0f ? ip[i] : ac * ip[i];
        }
    }

    if (tape) {
        const std::int64_t in_id = input.id(), a_id = alpha.id(), out_id = out.id();
        Tensor saved_in = input;
        Tensor saved_alpha = alpha;
        tape->record(TapeNode{
            OpKind::kPRelu,
            {in_id, a_id},
            out_id,
            [saved_in, saved_alpha, in_id, a_id, out_id, N, C, plane](GradTape& t) {
                const Tensor& gout = *t.gradient(out_id);
                const float* go = gout.data();
                const float* in = saved_in.data();
                Tensor gin(saved_in.shape());
                Tensor galpha({C});
                float* gi = gin.data();
#pragma omp parallel for schedule(static)
                for (int c = 0; c < C; ++c) {
                    const float ac = saved_alpha.data()[c];
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const float x = in[off + i];
                            if (x > 0.0f) {
                                gi[off + i] = go[off + i];
                            } else {
                                gi[off + i] = ac * go[off + i];
                                acc += static_cast<double>(go[off + i]) * x;
                            }
                        }
                    }
                    galpha.data()[c] = static_cast<float>(acc);
                }
                t.accumulate(in_id, std::move(gin));
                t.accumulate(a_id, std::move(galpha));
            }});
    }
    return out;
}

Tensor dropout(const Tensor& input, float rate, Rng& rng, Mode mode, GradTape* tape) {
    if (rate < 0.0f || rate >= 1.0f) {
        throw NumericError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    }
    const std::int64_t n = input.numel();
    Tensor out = input;
    std::vector<std::uint8_t> mask;
    float scale = 1.0f;
    const bool active = mode == Mode::kTrain && rate > 0.0f;
    if (active) {
        scale = 1.0f / (1.0f - rate);
        mask.resize(static_cast<size_t>(n));
        float* o = out.data();
        // Mask draws are sequential so the stream stays reproducible.
        for (std::int64_t i = 0; i < n; ++i) {
            const bool keep = rng.uniform() >= rate;
            mask[static_cast<size_t>(i)] = keep ? 1 : 0;
            o[i] = keep ? o[i] * scale : 0.0f;
        }
    }

    if (tape) {
        const std::int64_t in_id = input.id(), out_id = out.id();
        tape->record(TapeNode{OpKind::kDropout,
                              {in_id},
                              out_id,
                              [mask = std::move(mask), scale, active, in_id, out_id,
                               shape = input.shape(), n](GradTape& t) {
                                  const Tensor& gout = *t.gradient(out_id);
                                  Tensor gin(shape);
                                  const float* go = gout.data();
                                  float* gi = gin.data();
                                  if (active) {
#pragma omp parallel for schedule(static)
                                      for (std::int64_t i = 0; i < n; ++i) {
                                          gi[i] = mask[static_cast<size_t>(i)] ? go[i] * scale
                                                                               : 0.0f;
                                      }
                                  } else {
                                      std::memcpy(gi, go, static_cast<size_t>(n) * sizeof(float));
                                  }
                                  t.accumulate(in_id, std::move(gin));
                              }});
    }
    return out;
}

Tensor sigmoid(const Tensor& input, GradTape* tape) {
    Tensor out(input.shape());
    const float* in = input.data();
    float* o = out.data();
    const std::int64_t n = input.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const float x = in[i];
        if (x >= 0.0f) {
            o[i] = 1.0f / (1.0f + std::exp(-x));
        } else {
            const float e = std::exp(x);
            o[i] = e / (1.0f + e);
        }
    }
    if (tape) {
        const std::int64_t in_id = input.id(), out_id = out.id();
        Tensor saved_out = out;
        tape->record(TapeNode{OpKind::kSigmoid,
                              {in_id},
                              out_id,
                              [saved_out, in_id, out_id, n](GradTape& t) {
                                  const Tensor& gout = *t.gradient(out_id);
                                  Tensor gin(saved_out.shape());
                                  const float* go = gout.data();
                                  const float* y = saved_out.data();
                                  float* gi = gin.data();
#pragma omp parallel for schedule(static)
                                  for (std::int64_t i = 0; i < n; ++i) {
                                      gi[i] = go[i] * y[i] * (1.0f - y[i]);
                                  }
                                  t.accumulate(in_id, std::move(gin));
                              }});
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b, GradTape* tape) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* o = out.data();
    const std::int64_t n = a.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];

    if (tape) {
        const std::int64_t a_id = a.id(), b_id = b.id(), out_id = out.id();
        tape->record(TapeNode{OpKind::kAdd,
                              {a_id, b_id},
                              out_id,
                              [a_id, b_id, out_id](GradTape& t) {
                                  const Tensor gout = *t.gradient(out_id);
                                  t.accumulate(a_id, gout);
                                  t.accumulate(b_id, gout);
                              }});
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b, GradTape* tape) {
    require_rank4(a, "concat_channels a");
    require_rank4(b, "concat_channels b");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeError("concat_channels: N/H/W mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor out({N, Ca + Cb, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    float* o = out.data();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        std::memcpy(o + static_cast<std::int64_t>(n) * (Ca + Cb) * plane,
                    a.data() + static_cast<std::int64_t>(n) * Ca * plane,
                    static_cast<size_t>(Ca * plane) * sizeof(float));
        std::memcpy(o + (static_cast<std::int64_t>(n) * (Ca + Cb) + Ca) * plane,
                    b.data() + static_cast<std::int64_t>(n) * Cb * plane,
                    static_cast<size_t>(Cb * plane) * sizeof(float));
    }

    if (tape) {
        const std::int64_t a_id = a.id(), b_id = b.id(), out_id = out.id();
        tape->record(TapeNode{
            OpKind::kConcatChannels,
            {a_id, b_id},
            out_id,
            [a_id, b_id, out_id, N, Ca, Cb, H, W, plane](GradTape& t) {
                const Tensor& gout = *t.gradient(out_id);
                Tensor ga({N, Ca, H, W});
                Tensor gb({N, Cb, H, W});
                const float* go = gout.data();
                for (int n = 0; n < N; ++n) {
                    std::memcpy(ga.data() + static_cast<std::int64_t>(n) * Ca * plane,
                                go + static_cast<std::int64_t>(n) * (Ca + Cb) * plane,
                                static_cast<size_t>(Ca * plane) * sizeof(float));
                    std::memcpy(gb.data() + static_cast<std::int64_t>(n) * Cb * plane,
                                go + (static_cast<std::int64_t>(n) * (Ca + Cb) + Ca) * plane,
                                static_cast<size_t>(Cb * plane) * sizeof(float));
                }
                t.accumulate(a_id, std::move(ga));
                t.accumulate(b_id, std::move(gb));
            }});
    }
    return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target, GradTape* tape) {
    require_same_shape(pred, target, "mse_loss");
    const std::int64_t n = pred.numel();
    const float* p = pred.data();
    const float* q = target.data();
    Tensor diff(pred.shape());
    float* dd = diff.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const float d = p[i] - q[i];
        dd[i] = d;
        acc += static_cast<double>(d) * d;
    }
    const double value = acc / static_cast<double>(n);
    if (!std::isfinite(value)) {
        throw NumericError("mse_loss: loss is non-finite");
    }
    Tensor out = Tensor::scalar(static_cast<float>(value));

    if (tape) {
        const std::int64_t p_id = pred.id(), t_id = target.id(), out_id = out.id();
        tape->record(TapeNode{OpKind::kMseLoss,
                              {p_id, t_id},
                              out_id,
                              [diff = std::move(diff), p_id, t_id, out_id, n](GradTape& t) {
                                  const float dy = t.gradient(out_id)->item();
                                  const float k = 2.0f * dy / static_cast<float>(n);
                                  Tensor gp(diff.shape());
                                  Tensor gt(diff.shape());
                                  const float* dd = diff.data();
                                  float* a = gp.data();
                                  float* b = gt.data();
#pragma omp parallel for schedule(static)
                                  for (std::int64_t i = 0; i < n; ++i) {
                                      a[i] = k * dd[i];
                                      b[i] = -k * dd[i];
                                  }
                                  t.accumulate(p_id, std::move(gp));
                                  t.accumulate(t_id, std::move(gt));
                              }});
    }
    return out;
}

}  // namespace ops
}  // namespace fpdn
