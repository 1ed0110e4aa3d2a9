#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace couplet {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// A trainable tensor and its accumulated gradient.
struct Param {
    Mat value;
    Mat grad;

    Param() = default;
    Param(Eigen::Index rows, Eigen::Index cols) : value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}
    explicit Param(Mat init) : value(std::move(init)), grad(Mat::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(); }
    std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

}  // namespace couplet
