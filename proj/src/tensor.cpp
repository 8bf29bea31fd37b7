#include "fpdn/tensor.hpp"

#include <atomic>
#include <cassert>
#include <cmath>
#include <sstream>

#include "fpdn/errors.hpp"

namespace fpdn {

std::int64_t Tensor::next_id() {
    static std::atomic<std::int64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

void validate_shape(const std::vector<int>& shape) {
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] <= 0) {
            throw ShapeError("tensor dimension " + std::to_string(i) + " must be positive, got " +
                             std::to_string(shape[i]));
        }
    }
}

}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0f) {
    validate_shape(shape_);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
    }
}

Tensor::Tensor(const Tensor& other) : shape_(other.shape_), data_(other.data_) {}

Tensor& Tensor::operator=(const Tensor& other) {
    if (this != &other) {
        shape_ = other.shape_;
        data_ = other.data_;
        id_ = next_id();
    }
    return *this;
}

Tensor& Tensor::operator=(Tensor&& other) noexcept {
    if (this != &other) {
        shape_ = std::move(other.shape_);
        data_ = std::move(other.data_);
        id_ = other.id_;
    }
    return *this;
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

float& Tensor::at(int n, int c, int h, int w) {
    assert(rank() == 4);
    const int C = shape_[1], H = shape_[2], W = shape_[3];
    return data_[static_cast<size_t>(((static_cast<std::int64_t>(n) * C + c) * H + h) * W + w)];
}

float Tensor::at(int n, int c, int h, int w) const {
    return const_cast<Tensor*>(this)->at(n, c, h, w);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

float Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() requires a single-element tensor, shape is " + shape_str(shape_));
    }
    return data_[0];
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

bool all_finite(const Tensor& t) {
    const float* p = t.data();
    const std::int64_t n = t.numel();
    bool ok = true;
#pragma omp parallel for schedule(static) reduction(&& : ok)
    for (std::int64_t i = 0; i < n; ++i) {
        ok = ok && std::isfinite(p[i]);
    }
    return ok;
}

void require_finite(const Tensor& t, const char* what) {
    if (!all_finite(t)) {
        throw NumericError(std::string(what) + ": tensor contains non-finite values");
    }
}

}  // namespace fpdn
