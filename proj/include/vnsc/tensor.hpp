#ifndef VNSC_TENSOR_HPP
#define VNSC_TENSOR_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vnsc/errors.hpp"

namespace vnsc {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major n-dimensional array. The leading extent is the "row" axis
/// of the 2D matrix view; all remaining extents are flattened into columns.
template <typename Scalar_>
class Tensor {
public:
    using Scalar = Scalar_;
    using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
    using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape(shape_);
        data_ = Vector<Scalar>::Zero(shape_size(shape_));
    }

    Tensor(Shape shape, Vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape(shape_);
        if (shape_size(shape_) != data_.size()) {
            throw ConfigError("tensor data size " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor constant(Shape shape, Scalar value) {
        Tensor t(std::move(shape));
        t.data_.setConstant(value);
        return t;
    }

    static Tensor from_matrix(const Eigen::Ref<const RowMatrix<Scalar>>& m) {
        Tensor t({m.rows(), m.cols()});
        t.matrix() = m;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    Index dim(std::size_t axis) const { return shape_.at(axis); }
    Index size() const { return data_.size(); }
    bool empty() const { return shape_.empty(); }

    Vector<Scalar>& vec() { return data_; }
    const Vector<Scalar>& vec() const { return data_; }
    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    Scalar& operator[](Index i) { return data_[i]; }
    Scalar operator[](Index i) const { return data_[i]; }

    Index rows() const { return shape_.empty() ? 0 : shape_.front(); }
    Index cols() const { return rows() == 0 ? 0 : size() / rows(); }

    MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
    ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

    Scalar& at(Index r, Index c) { return data_[r * cols() + c]; }
    Scalar at(Index r, Index c) const { return data_[r * cols() + c]; }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != size()) {
            throw ConfigError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename Other>
    Tensor<Other> cast() const {
        return Tensor<Other>(shape_, data_.template cast<Other>());
    }

    bool all_finite() const { return data_.allFinite(); }

    void set_zero() { data_.setZero(); }

private:
    static void validate_shape(const Shape& shape) {
        for (Index e : shape) {
            if (e <= 0) throw ConfigError("tensor extents must be positive, got " + shape_string(shape));
        }
    }

    Shape shape_;
    Vector<Scalar> data_;
};

} // namespace vnsc

#endif // VNSC_TENSOR_HPP
