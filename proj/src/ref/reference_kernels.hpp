#pragma once

#include <vector>

#include "fpdn/tensor.hpp"

namespace fpdn::ref {

// Serial, no-frills reference kernels. These are deliberately written as
// plain nested loops with double accumulation and share no code with the
// OpenMP kernels in fpdn::ops; tests compare the two and the benchmark
// measures the gap. Keep them simple, not fast.

// Cross-correlation with zero padding and dilated taps. weights [Co,Ci,k,k],
// any square kernel size.
Tensor conv2d_naive(const Tensor& input, const Tensor& weights, const Tensor& bias, int kernel,
                    int dilation, int stride, int padding);

// Transposed conv via scatter: each input element deposits kernel*value into
// the output at stride offsets. weights [Ci,Co,2,2], kernel 2, stride 2.
Tensor conv2d_transposed_naive(const Tensor& input, const Tensor& weights, const Tensor& bias);

// Per-window max over disjoint 2x2 windows.
Tensor max_pool2_naive(const Tensor& input);

}  // namespace fpdn::ref
