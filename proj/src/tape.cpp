#include "fpdn/tape.hpp"

#include "fpdn/errors.hpp"

namespace fpdn {

void GradTape::record(TapeNode node) {
    outputs_.insert(node.output_id);
    nodes_.push_back(std::move(node));
}

void GradTape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be a scalar, shape is " + shape_str(loss.shape()));
    }
    if (!produced(loss.id())) {
        throw Error("backward: loss tensor was not produced on this tape");
    }
    grads_.clear();
    grads_.emplace(loss.id(), Tensor::scalar(1.0f));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        // Nodes whose output never influenced the loss have no gradient to push.
        if (grads_.find(it->output_id) == grads_.end()) continue;
        it->backward(*this);
    }
}

const Tensor* GradTape::gradient(std::int64_t id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
}

void GradTape::accumulate(std::int64_t id, Tensor g) {
    auto it = grads_.find(id);
    if (it == grads_.end()) {
        grads_.emplace(id, std::move(g));
        return;
    }
    Tensor& acc = it->second;
    require_same_shape(acc, g, "gradient accumulate");
    float* a = acc.data();
    const float* b = g.data();
    const std::int64_t n = acc.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) a[i] += b[i];
}

void GradTape::clear() {
    nodes_.clear();
    grads_.clear();
    outputs_.clear();
}

}  // namespace fpdn
