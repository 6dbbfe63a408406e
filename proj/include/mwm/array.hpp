#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mwm/error.hpp"

namespace mwm {

// Dense row-major array of rank 1 or 2. Rank-1 arrays behave as a single row
// wherever a matrix is expected.
template <typename R>
class Array {
public:
    using value_type = R;

    Array() = default;

    explicit Array(std::vector<std::size_t> shape, R fill = R(0)) : shape_(std::move(shape)) {
        check_shape();
        data_.assign(numel_of(shape_), fill);
    }

    Array(std::vector<std::size_t> shape, std::vector<R> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != numel_of(shape_)) {
            throw ContractError("Array: data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string(shape_));
        }
    }

    static Array vector(std::initializer_list<R> values) {
        return Array({values.size()}, std::vector<R>(values));
    }
    static Array vector(std::span<const R> values) {
        return Array({values.size()}, std::vector<R>(values.begin(), values.end()));
    }
    static Array matrix(std::size_t rows, std::size_t cols, std::vector<R> data) {
        return Array({rows, cols}, std::move(data));
    }
    static Array scalar(R v) { return Array({1}, std::vector<R>{v}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    R* data() { return data_.data(); }
    const R* data() const { return data_.data(); }
    std::span<R> span() { return data_; }
    std::span<const R> span() const { return data_; }
    std::vector<R>& values() { return data_; }
    const std::vector<R>& values() const { return data_; }

    R& operator[](std::size_t i) { return data_[i]; }
    const R& operator[](std::size_t i) const { return data_[i]; }
    R& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const R& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    void fill(R v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](R v) { return std::isfinite(v); });
    }

    template <typename S>
    Array<S> cast() const {
        return Array<S>(shape_, std::vector<S>(data_.begin(), data_.end()));
    }

    bool same_shape(const Array& o) const { return shape_ == o.shape_; }

    friend bool operator==(const Array& a, const Array& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ']';
        return os.str();
    }

private:
    void check_shape() const {
        if (shape_.empty() || shape_.size() > 2) {
            throw ContractError("Array: rank must be 1 or 2, got shape " + shape_string(shape_));
        }
        for (auto e : shape_) {
            if (e == 0) throw ContractError("Array: zero extent in shape " + shape_string(shape_));
        }
    }

    std::vector<std::size_t> shape_;
    std::vector<R> data_;
};

using ArrayF = Array<float>;
using ArrayD = Array<double>;

}  // namespace mwm
