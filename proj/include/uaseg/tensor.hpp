#pragma once

#include <array>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "uaseg/common.hpp"

namespace uaseg {

// Dense NCHW tensor. Value semantics, row-major innermost W.
// The whole model stack is templated on T so the same code runs in float
// for training and double for finite-difference checks.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    Tensor(int n, int c, int h, int w) { resize(n, c, h, w); }

    static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }

    void resize(int n, int c, int h, int w) {
        shape_ = {n, c, h, w};
        data_.assign(static_cast<std::size_t>(n) * c * h * w, T(0));
    }

    int n() const { return shape_[0]; }
    int c() const { return shape_[1]; }
    int h() const { return shape_[2]; }
    int w() const { return shape_[3]; }
    const std::array<int, 4>& shape() const { return shape_; }

    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }

    // Pointer to the start of sample n / channel c.
    T* plane(int n, int c) {
        return data_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] * shape_[3];
    }
    const T* plane(int n, int c) const {
        return data_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] * shape_[3];
    }

    T& at(int n, int c, int y, int x) {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    T at(int n, int c, int y, int x) const {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    void add_(const Tensor& other) {
        if (other.size() != size()) throw ShapeError("Tensor::add_: size mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    }

    void scale_(T s) {
        for (auto& v : data_) v *= s;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(n(), c(), h(), w());
        for (std::size_t i = 0; i < data_.size(); ++i) out.ptr()[i] = static_cast<U>(data_[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[" << shape_[0] << "," << shape_[1] << "," << shape_[2] << "," << shape_[3] << "]";
        return os.str();
    }

    std::vector<T>& raw() { return data_; }
    const std::vector<T>& raw() const { return data_; }

private:
    std::array<int, 4> shape_{0, 0, 0, 0};
    std::vector<T> data_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape();
}

}  // namespace uaseg
