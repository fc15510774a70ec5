#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cqvae/rng.hpp"
#include "cqvae/tape.hpp"
#include "cqvae/tensor.hpp"

namespace cqvae {

// log(x + kLogGuard) wherever a probability can underflow to exact zero.
inline constexpr double kLogGuard = 1e-20;

// The N quantized coordinate values shared by all M latent dimensions.
// Strictly increasing entries guarantee distinct one-hot rows map to distinct
// latent vectors.
template <typename T>
struct CoordinateVector {
    std::vector<T> c;

    explicit CoordinateVector(std::vector<T> values) : c(std::move(values)) {
        if (c.empty()) throw std::invalid_argument("CoordinateVector: empty");
        for (size_t i = 1; i < c.size(); ++i) {
            if (!(c[i] > c[i - 1])) {
                throw std::invalid_argument("CoordinateVector: entries must be strictly increasing");
            }
        }
    }

    // N evenly spaced coordinates spanning [-2, 2], covering two standard
    // deviations of a unit-scale latent on both sides.
    static CoordinateVector uniform(int n, T lo = T(-2), T hi = T(2)) {
        if (n < 1) throw std::invalid_argument("CoordinateVector: need at least one coordinate");
        std::vector<T> v(static_cast<size_t>(n));
        if (n == 1) {
            v[0] = (lo + hi) / T(2);
        } else {
            for (int i = 0; i < n; ++i) v[size_t(i)] = lo + (hi - lo) * T(i) / T(n - 1);
        }
        return CoordinateVector(std::move(v));
    }

    int size() const { return int(c.size()); }
};

template <typename T>
void validate_probability_matrix(const Tensor<T>& p, T row_tol = T(1e-6)) {
    if (p.ndim() != 2) {
        throw std::invalid_argument("probability matrix must be 2-D, got " + dims_str(p.shape));
    }
    const int M = p.shape[0], N = p.shape[1];
    for (int m = 0; m < M; ++m) {
        T sum = T(0);
        for (int n = 0; n < N; ++n) {
            const T v = p.at2(m, n);
            if (v < T(0) || v > T(1) + row_tol) {
                throw std::invalid_argument("probability matrix entry out of [0,1] at row " +
                                            std::to_string(m));
            }
            sum += v;
        }
        if (std::abs(sum - T(1)) > row_tol) {
            throw std::invalid_argument("probability matrix row " + std::to_string(m) +
                                        " sums to " + std::to_string(double(sum)));
        }
    }
}

template <typename T>
bool is_latent_code(const Tensor<T>& z) {
    if (z.ndim() != 2) return false;
    for (int m = 0; m < z.shape[0]; ++m) {
        int ones = 0;
        for (int n = 0; n < z.shape[1]; ++n) {
            const T v = z.at2(m, n);
            if (v == T(1)) {
                ++ones;
            } else if (v != T(0)) {
                return false;
            }
        }
        if (ones != 1) return false;
    }
    return true;
}

// zprime[m] = sum_n z[m,n] * c[n]; the bridge from the discrete code (or a
// relaxed probability matrix) into the continuous latent space.
template <typename T>
std::vector<T> coordinate_map(const Tensor<T>& z, const CoordinateVector<T>& c) {
    if (z.ndim() != 2 || z.shape[1] != c.size()) {
        throw std::invalid_argument("coordinate_map: matrix " + dims_str(z.shape) +
                                    " does not match " + std::to_string(c.size()) + " coordinates");
    }
    const int M = z.shape[0], N = z.shape[1];
    std::vector<T> out(size_t(M), T(0));
    for (int m = 0; m < M; ++m) {
        T acc = T(0);
        for (int n = 0; n < N; ++n) acc += z.at2(m, n) * c.c[size_t(n)];
        out[size_t(m)] = acc;
    }
    return out;
}

// Exact N^M as a decimal string; the code space outgrows 64-bit integers at
// the sizes used for generation (e.g. 11^64).
std::string count_codes(int m, int n);

// Natural-log entropy summed over all matrix entries, with 0*log(0) = 0.
template <typename T>
T entropy(const Tensor<T>& p) {
    if (p.ndim() != 2) {
        throw std::invalid_argument("entropy: need a 2-D probability matrix, got " +
                                    dims_str(p.shape));
    }
    T h = T(0);
    for (const T& v : p.data) {
        if (v < T(0)) throw std::invalid_argument("entropy: negative probability entry");
        if (v > T(0)) h -= v * std::log(v);
    }
    return h;
}

// KL(p || uniform) for a row-stochastic matrix: sum over rows of
// ln(N) - H(row). Nonnegative, zero only at the uniform matrix.
template <typename T>
T kl_to_uniform(const Tensor<T>& p) {
    if (p.ndim() != 2) {
        throw std::invalid_argument("kl_to_uniform: need a 2-D probability matrix, got " +
                                    dims_str(p.shape));
    }
    const int M = p.shape[0], N = p.shape[1];
    const T log_n = std::log(T(N));
    T kl = T(0);
    for (int m = 0; m < M; ++m) {
        T h = T(0);
        for (int n = 0; n < N; ++n) {
            const T v = p.at2(m, n);
            if (v < T(0)) throw std::invalid_argument("kl_to_uniform: negative probability entry");
            if (v > T(0)) h -= v * std::log(v);
        }
        kl += log_n - h;
    }
    return kl;
}

template <typename T>
Tensor<T> gumbel_noise(Dims shape, RngStream& rng) {
    Tensor<T> g(shape);
    for (T& v : g.data) v = T(rng.gumbel());
    return g;
}

// One relaxed sample per row: softmax((g + log pi) / tau).
template <typename T>
Tensor<T> gumbel_softmax_sample(const Tensor<T>& pi, T tau, RngStream& rng) {
    if (!(tau > T(0))) throw std::invalid_argument("gumbel_softmax_sample: tau must be positive");
    validate_probability_matrix(pi);
    const int M = pi.shape[0], N = pi.shape[1];
    Tensor<T> out(pi.shape);
    for (int m = 0; m < M; ++m) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int n = 0; n < N; ++n) {
            const T logit = (T(rng.gumbel()) + std::log(pi.at2(m, n) + T(kLogGuard))) / tau;
            out.at2(m, n) = logit;
            mx = std::max(mx, logit);
        }
        T sum = T(0);
        for (int n = 0; n < N; ++n) {
            out.at2(m, n) = std::exp(out.at2(m, n) - mx);
            sum += out.at2(m, n);
        }
        for (int n = 0; n < N; ++n) out.at2(m, n) /= sum;
    }
    return out;
}

// Row-wise one-hot at the argmax; ties go to the lowest column index.
template <typename T>
Tensor<T> harden(const Tensor<T>& sample) {
    if (sample.ndim() != 2) {
        throw std::invalid_argument("harden: need a 2-D matrix, got " + dims_str(sample.shape));
    }
    const int M = sample.shape[0], N = sample.shape[1];
    Tensor<T> z(sample.shape, T(0));
    for (int m = 0; m < M; ++m) {
        int best = 0;
        for (int n = 1; n < N; ++n) {
            if (sample.at2(m, n) > sample.at2(m, best)) best = n;
        }
        z.at2(m, best) = T(1);
    }
    return z;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& sample) {
    if (sample.ndim() != 2) {
        throw std::invalid_argument("argmax_rows: need a 2-D matrix, got " + dims_str(sample.shape));
    }
    const int M = sample.shape[0], N = sample.shape[1];
    std::vector<int> idx(size_t(M), 0);
    for (int m = 0; m < M; ++m) {
        for (int n = 1; n < N; ++n) {
            if (sample.at2(m, n) > sample.at2(m, idx[size_t(m)])) idx[size_t(m)] = n;
        }
    }
    return idx;
}

// ---- graph builders (differentiable versions of the ops above) ----

// Relaxed Gumbel-softmax sample as a graph node; `noise` is taken as data so
// the same draw can be replayed for finite-difference checks. If
// `straight_through` is set the forward value is the hardened one-hot and
// gradients flow through the relaxed softmax.
template <typename T>
int gumbel_softmax_node(Tape<T>& tape, int pi, const Tensor<T>& noise, T tau,
                        bool straight_through) {
    if (!(tau > T(0))) throw std::invalid_argument("gumbel_softmax_node: tau must be positive");
    const Tensor<T>& vp = tape.value(pi);
    if (vp.shape != noise.shape) {
        throw std::invalid_argument("gumbel_softmax_node: noise shape " + dims_str(noise.shape) +
                                    " does not match " + dims_str(vp.shape));
    }
    const int logits = tape.scale(tape.add(tape.log_eps(pi, T(kLogGuard)), tape.constant(noise)),
                                  T(1) / tau);
    const int soft = tape.softmax_last(logits);
    if (!straight_through) return soft;
    return tape.straight_through(soft, harden(tape.value(soft)));
}

// Natural-log entropy of a probability-matrix node, as a scalar node.
template <typename T>
int entropy_node(Tape<T>& tape, int p) {
    return tape.scale(tape.sum_all(tape.mul(p, tape.log_eps(p, T(kLogGuard)))), T(-1));
}

// KL(p || uniform) = M*ln(N) - H(p) for a row-stochastic [M,N] node.
template <typename T>
int kl_uniform_node(Tape<T>& tape, int p) {
    const Tensor<T>& vp = tape.value(p);
    if (vp.ndim() != 2) {
        throw std::invalid_argument("kl_uniform_node: need a 2-D node, got " + dims_str(vp.shape));
    }
    const T m_log_n = T(vp.shape[0]) * std::log(T(vp.shape[1]));
    return tape.affine(entropy_node(tape, p), T(-1), m_log_n);
}

// coordinate_map as a graph node: [M,N] probabilities times the coordinate
// column, yielding the [M,1] continuous latent.
template <typename T>
int coordinate_map_node(Tape<T>& tape, int z, const CoordinateVector<T>& c) {
    const Tensor<T>& vz = tape.value(z);
    if (vz.ndim() != 2 || vz.shape[1] != c.size()) {
        throw std::invalid_argument("coordinate_map_node: matrix " + dims_str(vz.shape) +
                                    " does not match " + std::to_string(c.size()) + " coordinates");
    }
    Tensor<T> col(Dims{c.size(), 1});
    for (int i = 0; i < c.size(); ++i) col.data[size_t(i)] = c.c[size_t(i)];
    return tape.matmul(z, tape.constant(col));
}

}  // namespace cqvae
