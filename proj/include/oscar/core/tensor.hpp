#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include <Eigen/Core>

#include "oscar/core/errors.hpp"
#include "oscar/core/rng.hpp"

namespace oscar {

using Real = double;
using Shape = std::vector<std::size_t>;

using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// Dense row-major n-d array of doubles. Value semantics; all layout is contiguous.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(count(shape_), 0.0) {}
    Tensor(Shape shape, Real fill) : shape_(std::move(shape)), data_(count(shape_), fill) {}
    Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_)) throw ShapeError("Tensor: data size does not match shape");
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, Real v) { return Tensor(std::move(s), v); }
    static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }

    static Tensor randn(Shape s, Rng& rng, Real stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data_) v = rng.normal(0.0, stddev);
        return t;
    }
    static Tensor rand_uniform(Shape s, Rng& rng, Real lo = 0.0, Real hi = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.data_) v = rng.uniform(lo, hi);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    std::vector<Real>& vec() { return data_; }
    const std::vector<Real>& vec() const { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    Real operator[](std::size_t i) const { return data_[i]; }

    Real item() const {
        if (numel() != 1) throw ShapeError("Tensor::item on non-scalar");
        return data_[0];
    }

    // Reinterpret as rows x cols (must match numel).
    EMap mat(std::size_t rows, std::size_t cols) {
        if (rows * cols != numel()) throw ShapeError("Tensor::mat size mismatch");
        return EMap(data_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    }
    ECMap mat(std::size_t rows, std::size_t cols) const {
        if (rows * cols != numel()) throw ShapeError("Tensor::mat size mismatch");
        return ECMap(data_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    }

    Tensor reshaped(Shape s) const {
        if (count(s) != numel()) throw ShapeError("Tensor::reshaped size mismatch");
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static std::size_t count(const Shape& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

private:
    Shape shape_;
    std::vector<Real> data_;
};

inline std::string shape_str(const Shape& s) {
    std::string r = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        r += std::to_string(s[i]);
        if (i + 1 < s.size()) r += ",";
    }
    return r + ")";
}

}  // namespace oscar
