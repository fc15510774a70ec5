#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cqvae {

using Dims = std::vector<int>;

inline long long dims_numel(const Dims& d) {
    long long n = 1;
    for (int x : d) n *= x;
    return n;
}

inline std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < d.size(); ++i) {
        if (i) os << ",";
        os << d[i];
    }
    os << "]";
    return os.str();
}

// Dense row-major tensor. Invariant: data.size() == product of shape dims.
template <typename T>
struct Tensor {
    Dims shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Dims s, T fill = T(0)) : shape(std::move(s)) {
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dim in " + dims_str(shape));
        }
        data.assign(size_t(dims_numel(shape)), fill);
    }

    static Tensor from(Dims s, std::vector<T> v) {
        Tensor t;
        t.shape = std::move(s);
        if ((long long)v.size() != dims_numel(t.shape)) {
            throw std::invalid_argument("Tensor::from: data size " + std::to_string(v.size()) +
                                        " does not match shape " + dims_str(t.shape));
        }
        t.data = std::move(v);
        return t;
    }

    int ndim() const { return int(shape.size()); }
    long long numel() const { return (long long)data.size(); }

    int dim(int i) const { return shape[size_t(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](size_t i) { return data[i]; }
    const T& operator[](size_t i) const { return data[i]; }

    // convenience accessors for tests and small kernels
    T& at2(int i, int j) { return data[size_t(i) * shape[1] + j]; }
    const T& at2(int i, int j) const { return data[size_t(i) * shape[1] + j]; }

    T& at3(int i, int j, int k) { return data[(size_t(i) * shape[1] + j) * shape[2] + k]; }
    const T& at3(int i, int j, int k) const { return data[(size_t(i) * shape[1] + j) * shape[2] + k]; }

    T& at4(int i, int j, int k, int l) {
        return data[((size_t(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    const T& at4(int i, int j, int k, int l) const {
        return data[((size_t(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace cqvae
