#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tl {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array with an optional gradient slot of the same shape.
/// Images are stored as N x C x H x W.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{})
        : shape_(std::move(shape)), values_(element_count(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
        check_dims();
        if (values_.size() != element_count(shape_)) {
            throw std::invalid_argument("tensor: " + std::to_string(values_.size()) +
                                        " values do not fill shape " + tl::to_string(shape_));
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    T* data() noexcept { return values_.data(); }
    const T* data() const noexcept { return values_.data(); }

    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    bool has_grad() const noexcept { return !grad_.empty(); }
    std::span<T> grad() noexcept { return grad_; }
    std::span<const T> grad() const noexcept { return grad_; }

    void zero_grad() { grad_.assign(values_.size(), T{}); }
    void clear_grad() { grad_.clear(); }

    /// Per-sample shape (all dims but the leading batch dim).
    Shape sample_shape() const { return rank() > 1 ? Shape(shape_.begin() + 1, shape_.end()) : Shape{}; }
    std::size_t batch() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t sample_size() const { return batch() ? size() / batch() : 0; }

    std::span<T> sample(std::size_t n) { return std::span<T>(values_).subspan(n * sample_size(), sample_size()); }
    std::span<const T> sample(std::size_t n) const {
        return std::span<const T>(values_).subspan(n * sample_size(), sample_size());
    }

    /// Same values viewed under a new shape with equal element count.
    Tensor reshaped(Shape shape) const {
        Tensor out(std::move(shape), values_);
        return out;
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(values_.begin(), values_.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    void check_dims() const {
        for (auto d : shape_) {
            if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension in " + tl::to_string(shape_));
        }
    }

    Shape shape_;
    std::vector<T> values_;
    std::vector<T> grad_;
};

}  // namespace tl
