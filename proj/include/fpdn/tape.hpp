#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fpdn/tensor.hpp"

namespace fpdn {

class GradTape;

enum class OpKind {
    kConv2d,
    kConv2dTransposed,
    kMaxPool2,
    kBatchNorm,
    kPRelu,
    kDropout,
    kSigmoid,
    kAdd,
    kConcatChannels,
    kMseLoss,
};

// One recorded forward op. The closure owns copies of whatever activations
// its backward pass needs; it reads the output gradient from the tape and
// accumulates input gradients back into it.
struct TapeNode {
    OpKind kind;
    std::vector<std::int64_t> input_ids;
    std::int64_t output_id;
    std::function<void(GradTape&)> backward;
};

// Records forward ops in creation order and replays them in strict reverse to
// produce gradients. Single-owner: one forward/backward sequence per tape.
// Separate tapes may run concurrently against read-shared parameters.
class GradTape {
public:
    void record(TapeNode node);

    // Seeds d(loss)/d(loss) = 1 and traverses nodes in reverse creation order.
    // Throws Error if `loss` is not a scalar output recorded on this tape.
    void backward(const Tensor& loss);

    // Gradient for a tensor id, or nullptr if nothing flowed into it.
    const Tensor* gradient(std::int64_t id) const;

    // Sums `g` into the gradient slot for `id` (fan-out accumulation).
    void accumulate(std::int64_t id, Tensor g);

    bool produced(std::int64_t id) const { return outputs_.count(id) != 0; }
    std::size_t node_count() const { return nodes_.size(); }

    void clear();

private:
    std::vector<TapeNode> nodes_;
    std::unordered_map<std::int64_t, Tensor> grads_;
    std::unordered_set<std::int64_t> outputs_;
};

}  // namespace fpdn
