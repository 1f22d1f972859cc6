#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace trv {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

std::string shape_str(const std::vector<long>& shape);

// Dense row-major n-d array of doubles. Immutable by convention once it has
// been handed to a Tape; the tape never mutates node values.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<long> shape, bool requires_grad = false)
        : shape_(std::move(shape)), requires_grad(requires_grad) {
        long n = 1;
        for (long d : shape_) {
            if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dim in " + shape_str(shape_));
            n *= d;
        }
        data_ = Vec::Zero(n);
    }

    static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<long> shape, double v) {
        Tensor t(std::move(shape));
        t.data_.setConstant(v);
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from_matrix(const Mat& m) {
        Tensor t({m.rows(), m.cols()});
        t.mat() = m;
        return t;
    }

    static Tensor from_vector(const std::vector<double>& v) {
        Tensor t({static_cast<long>(v.size())});
        for (size_t i = 0; i < v.size(); ++i) t.data_[static_cast<long>(i)] = v[i];
        return t;
    }

    static Tensor row(std::initializer_list<double> v) {
        return from_vector(std::vector<double>(v));
    }

    const std::vector<long>& shape() const { return shape_; }
    long ndim() const { return static_cast<long>(shape_.size()); }
    long size() const { return data_.size(); }

    long dim(long i) const { return shape_.at(static_cast<size_t>(i)); }

    // 2D view; 1D tensors are viewed as a single row.
    long rows() const { return ndim() <= 1 ? 1 : shape_[0]; }
    long cols() const { return ndim() == 0 ? 0 : shape_.back(); }

    Eigen::Map<Mat> mat() {
        check_2d();
        return Eigen::Map<Mat>(data_.data(), rows(), cols());
    }
    Eigen::Map<const Mat> mat() const {
        check_2d();
        return Eigen::Map<const Mat>(data_.data(), rows(), cols());
    }

    Vec& vec() { return data_; }
    const Vec& vec() const { return data_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](long i) { return data_[i]; }
    double operator[](long i) const { return data_[i]; }

    double item() const {
        if (size() != 1) throw std::logic_error("Tensor::item on non-scalar");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const { return data_.allFinite(); }

    bool requires_grad = false;

private:
    void check_2d() const {
        if (ndim() > 2) throw std::logic_error("Tensor: matrix view of rank-" + std::to_string(ndim()) + " tensor");
    }

    std::vector<long> shape_;
    Vec data_;
};

inline std::string shape_str(const std::vector<long>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace trv
