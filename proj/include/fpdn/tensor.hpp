#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fpdn {

// Dense n-dimensional float32 array, row-major. 4-D tensors use NCHW layout.
// Every tensor carries a process-unique id; the gradient tape keys gradients
// by that id. A moved tensor is the same tensor (the id travels with the
// value); a copied tensor is a new one (fresh id). Code on a differentiable
// path must therefore move tensors, never copy them.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);  // zero-filled
    Tensor(std::vector<int> shape, std::vector<float> data);

    Tensor(const Tensor& other);
    Tensor(Tensor&& other) noexcept = default;
    Tensor& operator=(const Tensor& other);
    Tensor& operator=(Tensor&& other) noexcept;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float value);
    static Tensor scalar(float value);  // shape {1}

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t id() const { return id_; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    // NCHW accessors for 4-D tensors (unchecked beyond debug asserts).
    float& at(int n, int c, int h, int w);
    float at(int n, int c, int h, int w) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    void fill(float value);

    float item() const;  // numel()==1 only

private:
    std::vector<int> shape_;
    std::vector<float> data_;
    std::int64_t id_ = next_id();

    static std::int64_t next_id();
};

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Throws ShapeError unless a and b have identical shapes; `what` names the operands.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

// True iff every element is finite.
bool all_finite(const Tensor& t);

// Throws NumericError naming `what` if t contains NaN or Inf.
void require_finite(const Tensor& t, const char* what);

}  // namespace fpdn
