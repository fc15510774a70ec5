#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cqvae/tensor.hpp"

namespace cqvae {

// Reverse-mode autodiff over a tape of tensor nodes.
//
// Nodes are appended in program order, so the node list is always
// topologically sorted: every parent index precedes its children. backward()
// walks the list once in reverse. Execution is single-threaded and all
// reductions are plain sequential loops, so forward values are bit-identical
// across runs for identical inputs.
template <typename T>
class Tape {
public:
    using NodeId = int;

    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily during backward
        std::vector<NodeId> parents;
        std::function<void(Tape&, NodeId)> backprop;  // accumulates into parent grads
    };

    int size() const { return int(nodes_.size()); }

    const Tensor<T>& value(NodeId id) const { return nodes_[size_t(id)].value; }

    const Tensor<T>& grad(NodeId id) const {
        const Node& n = nodes_[size_t(id)];
        if (n.grad.data.empty()) {
            throw std::runtime_error("Tape::grad: node has no gradient (backward not run or node unreachable)");
        }
        return n.grad;
    }

    bool has_grad(NodeId id) const { return !nodes_[size_t(id)].grad.data.empty(); }

    // ---- leaves ----

    NodeId input(Tensor<T> v) {
        Node n;
        n.value = std::move(v);
        nodes_.push_back(std::move(n));
        return NodeId(nodes_.size() - 1);
    }

    NodeId constant(Tensor<T> v) { return input(std::move(v)); }

    NodeId scalar(T v) {
        Tensor<T> t(Dims{1});
        t.data[0] = v;
        return input(std::move(t));
    }

    // ---- elementwise / broadcast ----

    NodeId add(NodeId a, NodeId b) {
        check_same_shape("add", a, b);
        Tensor<T> out = value(a);
        const Tensor<T>& vb = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
        return make(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& ga = t.grad_buf(a);
            Tensor<T>& gb = t.grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i];
                gb.data[i] += g.data[i];
            }
        });
    }

    NodeId sub(NodeId a, NodeId b) {
        check_same_shape("sub", a, b);
        Tensor<T> out = value(a);
        const Tensor<T>& vb = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
        return make(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& ga = t.grad_buf(a);
            Tensor<T>& gb = t.grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i];
                gb.data[i] -= g.data[i];
            }
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        check_same_shape("mul", a, b);
        Tensor<T> out = value(a);
        const Tensor<T>& vb = value(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
        return make(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& va = t.value(a);
            const Tensor<T>& vb2 = t.value(b);
            Tensor<T>& ga = t.grad_buf(a);
            Tensor<T>& gb = t.grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * vb2.data[i];
                gb.data[i] += g.data[i] * va.data[i];
            }
        });
    }

    NodeId scale(NodeId a, T k) { return affine(a, k, T(0)); }

    NodeId affine(NodeId a, T k, T c) {
        Tensor<T> out = value(a);
        for (T& v : out.data) v = k * v + c;
        return make(std::move(out), {a}, [a, k](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += k * g.data[i];
        });
    }

    // mat [R,C] + vec [C], broadcast over rows (bias add)
    NodeId add_rowvec(NodeId mat, NodeId vec) {
        const Tensor<T>& vm = value(mat);
        const Tensor<T>& vv = value(vec);
        if (vm.ndim() != 2 || vv.ndim() != 1 || vm.shape[1] != vv.shape[0]) {
            shape_error("add_rowvec", vm.shape, vv.shape);
        }
        const int R = vm.shape[0], C = vm.shape[1];
        Tensor<T> out = vm;
        for (int r = 0; r < R; ++r) {
            T* row = out.ptr() + size_t(r) * C;
            for (int c = 0; c < C; ++c) row[c] += vv.data[size_t(c)];
        }
        return make(std::move(out), {mat, vec}, [mat, vec, R, C](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gm = t.grad_buf(mat);
            Tensor<T>& gv = t.grad_buf(vec);
            for (int r = 0; r < R; ++r) {
                const T* grow = g.ptr() + size_t(r) * C;
                T* gmrow = gm.ptr() + size_t(r) * C;
                for (int c = 0; c < C; ++c) {
                    gmrow[c] += grow[c];
                    gv.data[size_t(c)] += grow[c];
                }
            }
        });
    }

    // mat [R,C] * vec [R], each row scaled by its own factor
    NodeId scale_rows(NodeId mat, NodeId vec) {
        const Tensor<T>& vm = value(mat);
        const Tensor<T>& vv = value(vec);
        if (vm.ndim() != 2 || vv.ndim() != 1 || vm.shape[0] != vv.shape[0]) {
            shape_error("scale_rows", vm.shape, vv.shape);
        }
        const int R = vm.shape[0], C = vm.shape[1];
        Tensor<T> out = vm;
        for (int r = 0; r < R; ++r) {
            T* row = out.ptr() + size_t(r) * C;
            const T k = vv.data[size_t(r)];
            for (int c = 0; c < C; ++c) row[c] *= k;
        }
        return make(std::move(out), {mat, vec}, [mat, vec, R, C](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& vm2 = t.value(mat);
            const Tensor<T>& vv2 = t.value(vec);
            Tensor<T>& gm = t.grad_buf(mat);
            Tensor<T>& gv = t.grad_buf(vec);
            for (int r = 0; r < R; ++r) {
                const T* grow = g.ptr() + size_t(r) * C;
                const T* mrow = vm2.ptr() + size_t(r) * C;
                T* gmrow = gm.ptr() + size_t(r) * C;
                const T k = vv2.data[size_t(r)];
                T acc = T(0);
                for (int c = 0; c < C; ++c) {
                    gmrow[c] += grow[c] * k;
                    acc += grow[c] * mrow[c];
                }
                gv.data[size_t(r)] += acc;
            }
        });
    }

    // ---- unary nonlinearities ----

    NodeId relu(NodeId a) {
        Tensor<T> out = value(a);
        for (T& v : out.data) v = v > T(0) ? v : T(0);
        return make(std::move(out), {a}, [a](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& va = t.value(a);
            Tensor<T>& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) {
                if (va.data[i] > T(0)) ga.data[i] += g.data[i];
            }
        });
    }

    NodeId sigmoid(NodeId a) {
        Tensor<T> out = value(a);
        for (T& v : out.data) {
            if (v >= T(0)) {
                v = T(1) / (T(1) + std::exp(-v));
            } else {
                const T e = std::exp(v);
                v = e / (T(1) + e);
            }
        }
        return make(std::move(out), {a}, [a](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& y = t.value(self);
            Tensor<T>& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * y.data[i] * (T(1) - y.data[i]);
            }
        });
    }

    // log(x + eps); eps guards exact zeros from softmax underflow
    NodeId log_eps(NodeId a, T eps = T(1e-20)) {
        Tensor<T> out = value(a);
        for (T& v : out.data) v = std::log(v + eps);
        return make(std::move(out), {a}, [a, eps](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& va = t.value(a);
            Tensor<T>& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] / (va.data[i] + eps);
            }
        });
    }

    NodeId exp(NodeId a) {
        Tensor<T> out = value(a);
        for (T& v : out.data) v = std::exp(v);
        return make(std::move(out), {a}, [a](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& y = t.value(self);
            Tensor<T>& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i];
        });
    }

    NodeId square(NodeId a) {
        Tensor<T> out = value(a);
        for (T& v : out.data) v = v * v;
        return make(std::move(out), {a}, [a](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& va = t.value(a);
            Tensor<T>& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += T(2) * va.data[i] * g.data[i];
            }
        });
    }

    // ---- softmax over the last axis ----

    NodeId softmax_last(NodeId a) {
        const Tensor<T>& va = value(a);
        if (va.ndim() < 1) shape_error("softmax_last", va.shape, Dims{});
        const int C = va.shape.back();
        const long long R = va.numel() / C;
        Tensor<T> out = va;
        for (long long r = 0; r < R; ++r) {
            T* row = out.ptr() + size_t(r) * C;
            T mx = row[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            T sum = T(0);
            for (int c = 0; c < C; ++c) {
                row[c] = std::exp(row[c] - mx);
                sum += row[c];
            }
            for (int c = 0; c < C; ++c) row[c] /= sum;
        }
        return make(std::move(out), {a}, [a, R, C](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& y = t.value(self);
            Tensor<T>& ga = t.grad_buf(a);
            for (long long r = 0; r < R; ++r) {
                const T* grow = g.ptr() + size_t(r) * C;
                const T* yrow = y.ptr() + size_t(r) * C;
                T* garow = ga.ptr() + size_t(r) * C;
                T dot = T(0);
                for (int c = 0; c < C; ++c) dot += grow[c] * yrow[c];
                for (int c = 0; c < C; ++c) garow[c] += yrow[c] * (grow[c] - dot);
            }
        });
    }

    // ---- reductions ----

    NodeId sum_all(NodeId a) {
        const Tensor<T>& va = value(a);
        Tensor<T> out(Dims{1});
        T acc = T(0);
        for (const T& v : va.data) acc += v;
        out.data[0] = acc;
        return make(std::move(out), {a}, [a](Tape& t, NodeId self) {
            const T g = t.grad(self).data[0];
            Tensor<T>& ga = t.grad_buf(a);
            for (T& v : ga.data) v += g;
        });
    }

    NodeId mean_all(NodeId a) {
        const Tensor<T>& va = value(a);
        const T inv = T(1) / T(va.numel());
        Tensor<T> out(Dims{1});
        T acc = T(0);
        for (const T& v : va.data) acc += v;
        out.data[0] = acc * inv;
        return make(std::move(out), {a}, [a, inv](Tape& t, NodeId self) {
            const T g = t.grad(self).data[0] * inv;
            Tensor<T>& ga = t.grad_buf(a);
            for (T& v : ga.data) v += g;
        });
    }

    // ---- structure ----

    NodeId reshape(NodeId a, Dims new_shape) {
        const Tensor<T>& va = value(a);
        if (dims_numel(new_shape) != va.numel()) {
            throw std::invalid_argument("reshape: cannot view " + dims_str(va.shape) + " as " +
                                        dims_str(new_shape));
        }
        Tensor<T> out = va;
        out.shape = new_shape;
        return make(std::move(out), {a}, [a](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& ga = t.grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        });
    }

    NodeId concat(NodeId a, NodeId b, int axis) {
        const Tensor<T>& va = value(a);
        const Tensor<T>& vb = value(b);
        if (va.ndim() != vb.ndim() || axis < 0 || axis >= va.ndim()) {
            shape_error("concat", va.shape, vb.shape);
        }
        for (int i = 0; i < va.ndim(); ++i) {
            if (i != axis && va.shape[size_t(i)] != vb.shape[size_t(i)]) {
                shape_error("concat", va.shape, vb.shape);
            }
        }
        Dims out_shape = va.shape;
        out_shape[size_t(axis)] += vb.shape[size_t(axis)];
        long long outer = 1, tail = 1;
        for (int i = 0; i < axis; ++i) outer *= va.shape[size_t(i)];
        for (int i = axis + 1; i < va.ndim(); ++i) tail *= va.shape[size_t(i)];
        const long long blk_a = va.shape[size_t(axis)] * tail;
        const long long blk_b = vb.shape[size_t(axis)] * tail;
        Tensor<T> out(out_shape);
        for (long long o = 0; o < outer; ++o) {
            std::copy_n(va.ptr() + o * blk_a, blk_a, out.ptr() + o * (blk_a + blk_b));
            std::copy_n(vb.ptr() + o * blk_b, blk_b, out.ptr() + o * (blk_a + blk_b) + blk_a);
        }
        return make(std::move(out), {a, b}, [a, b, outer, blk_a, blk_b](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& ga = t.grad_buf(a);
            Tensor<T>& gb = t.grad_buf(b);
            for (long long o = 0; o < outer; ++o) {
                const T* gsrc = g.ptr() + o * (blk_a + blk_b);
                T* pa = ga.ptr() + o * blk_a;
                T* pb = gb.ptr() + o * blk_b;
                for (long long i = 0; i < blk_a; ++i) pa[i] += gsrc[i];
                for (long long i = 0; i < blk_b; ++i) pb[i] += gsrc[blk_a + i];
            }
        });
    }

    // out[r] = x[r, idx[r]]; indices are data, no gradient flows to them
    NodeId gather_last(NodeId a, std::vector<int> idx) {
        const Tensor<T>& va = value(a);
        if (va.ndim() != 2 || int(idx.size()) != va.shape[0]) {
            throw std::invalid_argument("gather_last: need [R,C] input with R indices, got " +
                                        dims_str(va.shape) + " with " + std::to_string(idx.size()) +
                                        " indices");
        }
        const int R = va.shape[0], C = va.shape[1];
        for (int r = 0; r < R; ++r) {
            if (idx[size_t(r)] < 0 || idx[size_t(r)] >= C) {
                throw std::invalid_argument("gather_last: index out of range at row " + std::to_string(r));
            }
        }
        Tensor<T> out(Dims{R});
        for (int r = 0; r < R; ++r) out.data[size_t(r)] = va.data[size_t(r) * C + idx[size_t(r)]];
        return make(std::move(out), {a}, [a, idx = std::move(idx), C](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& ga = t.grad_buf(a);
            for (size_t r = 0; r < g.data.size(); ++r) {
                ga.data[r * size_t(C) + size_t(idx[r])] += g.data[r];
            }
        });
    }

    // Forward takes the hard values; backward passes gradients to the soft
    // input unchanged (straight-through estimator).
    NodeId straight_through(NodeId soft, Tensor<T> hard) {
        const Tensor<T>& vs = value(soft);
        if (vs.shape != hard.shape) shape_error("straight_through", vs.shape, hard.shape);
        return make(std::move(hard), {soft}, [soft](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            Tensor<T>& gs = t.grad_buf(soft);
            for (size_t i = 0; i < g.data.size(); ++i) gs.data[i] += g.data[i];
        });
    }

    // ---- matmul ----

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor<T>& va = value(a);
        const Tensor<T>& vb = value(b);
        if (va.ndim() != 2 || vb.ndim() != 2 || va.shape[1] != vb.shape[0]) {
            shape_error("matmul", va.shape, vb.shape);
        }
        const int m = va.shape[0], k = va.shape[1], n = vb.shape[1];
        Tensor<T> out(Dims{m, n});
        mm_nn(va.ptr(), vb.ptr(), out.ptr(), m, k, n);
        return make(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, NodeId self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& va2 = t.value(a);
            const Tensor<T>& vb2 = t.value(b);
            mm_nt_acc(g.ptr(), vb2.ptr(), t.grad_buf(a).ptr(), m, n, k);  // dA += g * B^T
            mm_tn_acc(va2.ptr(), g.ptr(), t.grad_buf(b).ptr(), m, k, n);  // dB += A^T * g
        });
    }

    // ---- 2D convolution ----

    // x [N,C,H,W], w [F,C,kh,kw], bias [F] -> [N,F,Ho,Wo]
    NodeId conv2d(NodeId x, NodeId w, NodeId bias, int stride, int pad) {
        const Tensor<T>& vx = value(x);
        const Tensor<T>& vw = value(w);
        const Tensor<T>& vb = value(bias);
        if (vx.ndim() != 4 || vw.ndim() != 4 || vx.shape[1] != vw.shape[1]) {
            shape_error("conv2d", vx.shape, vw.shape);
        }
        if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
        const int N = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
        const int F = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
        if (vb.ndim() != 1 || vb.shape[0] != F) shape_error("conv2d bias", vw.shape, vb.shape);
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        if (H + 2 * pad < kh || W + 2 * pad < kw) {
            throw std::invalid_argument("conv2d: kernel " + dims_str(vw.shape) +
                                        " larger than padded input " + dims_str(vx.shape));
        }
        Tensor<T> out(Dims{N, F, Ho, Wo});
        for (int n = 0; n < N; ++n) {
            for (int f = 0; f < F; ++f) {
                const T bv = vb.data[size_t(f)];
                for (int oh = 0; oh < Ho; ++oh) {
                    for (int ow = 0; ow < Wo; ++ow) {
                        T acc = bv;
                        for (int c = 0; c < C; ++c) {
                            const T* xc = vx.ptr() + ((size_t(n) * C + c) * H) * W;
                            const T* wc = vw.ptr() + ((size_t(f) * C + c) * kh) * kw;
                            for (int ky = 0; ky < kh; ++ky) {
                                const int ih = oh * stride - pad + ky;
                                if (ih < 0 || ih >= H) continue;
                                const int iw0 = ow * stride - pad;
                                const T* xrow = xc + size_t(ih) * W;
                                const T* wrow = wc + size_t(ky) * kw;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int iw = iw0 + kx;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += xrow[iw] * wrow[kx];
                                }
                            }
                        }
                        out.at4(n, f, oh, ow) = acc;
                    }
                }
            }
        }
        return make(std::move(out), {x, w, bias},
                    [x, w, bias, stride, pad, N, C, H, W, F, kh, kw, Ho, Wo](Tape& t, NodeId self) {
                        const Tensor<T>& g = t.grad(self);
                        const Tensor<T>& vx2 = t.value(x);
                        const Tensor<T>& vw2 = t.value(w);
                        Tensor<T>& gx = t.grad_buf(x);
                        Tensor<T>& gw = t.grad_buf(w);
                        Tensor<T>& gb = t.grad_buf(bias);
                        for (int n = 0; n < N; ++n) {
                            for (int f = 0; f < F; ++f) {
                                for (int oh = 0; oh < Ho; ++oh) {
                                    for (int ow = 0; ow < Wo; ++ow) {
                                        const T gv = g.at4(n, f, oh, ow);
                                        if (gv == T(0)) continue;
                                        gb.data[size_t(f)] += gv;
                                        for (int c = 0; c < C; ++c) {
                                            const T* xc = vx2.ptr() + ((size_t(n) * C + c) * H) * W;
                                            const T* wc = vw2.ptr() + ((size_t(f) * C + c) * kh) * kw;
                                            T* gxc = gx.ptr() + ((size_t(n) * C + c) * H) * W;
                                            T* gwc = gw.ptr() + ((size_t(f) * C + c) * kh) * kw;
                                            for (int ky = 0; ky < kh; ++ky) {
                                                const int ih = oh * stride - pad + ky;
                                                if (ih < 0 || ih >= H) continue;
                                                const int iw0 = ow * stride - pad;
                                                for (int kx = 0; kx < kw; ++kx) {
                                                    const int iw = iw0 + kx;
                                                    if (iw < 0 || iw >= W) continue;
                                                    gwc[size_t(ky) * kw + kx] += gv * xc[size_t(ih) * W + iw];
                                                    gxc[size_t(ih) * W + iw] += gv * wc[size_t(ky) * kw + kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
    }

    // Transposed convolution. x [N,C,H,W], w [C,F,kh,kw], bias [F].
    // Output [N,F,Ho,Wo] with Ho = (H-1)*stride - 2*pad + kh + out_pad.
    NodeId conv2d_transpose(NodeId x, NodeId w, NodeId bias, int stride, int pad, int out_pad = 0) {
        const Tensor<T>& vx = value(x);
        const Tensor<T>& vw = value(w);
        const Tensor<T>& vb = value(bias);
        if (vx.ndim() != 4 || vw.ndim() != 4 || vx.shape[1] != vw.shape[0]) {
            shape_error("conv2d_transpose", vx.shape, vw.shape);
        }
        if (stride < 1) throw std::invalid_argument("conv2d_transpose: stride must be >= 1");
        const int N = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
        const int F = vw.shape[1], kh = vw.shape[2], kw = vw.shape[3];
        if (vb.ndim() != 1 || vb.shape[0] != F) shape_error("conv2d_transpose bias", vw.shape, vb.shape);
        const int Ho = (H - 1) * stride - 2 * pad + kh + out_pad;
        const int Wo = (W - 1) * stride - 2 * pad + kw + out_pad;
        if (Ho < 1 || Wo < 1) {
            throw std::invalid_argument("conv2d_transpose: empty output for input " + dims_str(vx.shape));
        }
        Tensor<T> out(Dims{N, F, Ho, Wo});
        for (int n = 0; n < N; ++n) {
            for (int f = 0; f < F; ++f) {
                const T bv = vb.data[size_t(f)];
                T* oc = out.ptr() + ((size_t(n) * F + f) * Ho) * Wo;
                for (long long i = 0; i < (long long)Ho * Wo; ++i) oc[i] = bv;
            }
        }
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const T* xc = vx.ptr() + ((size_t(n) * C + c) * H) * W;
                for (int ih = 0; ih < H; ++ih) {
                    for (int iw = 0; iw < W; ++iw) {
                        const T xv = xc[size_t(ih) * W + iw];
                        if (xv == T(0)) continue;
                        for (int f = 0; f < F; ++f) {
                            const T* wc = vw.ptr() + ((size_t(c) * F + f) * kh) * kw;
                            T* oc = out.ptr() + ((size_t(n) * F + f) * Ho) * Wo;
                            for (int ky = 0; ky < kh; ++ky) {
                                const int oh = ih * stride - pad + ky;
                                if (oh < 0 || oh >= Ho) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ow = iw * stride - pad + kx;
                                    if (ow < 0 || ow >= Wo) continue;
                                    oc[size_t(oh) * Wo + ow] += xv * wc[size_t(ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        return make(std::move(out), {x, w, bias},
                    [x, w, bias, stride, pad, N, C, H, W, F, kh, kw, Ho, Wo](Tape& t, NodeId self) {
                        const Tensor<T>& g = t.grad(self);
                        const Tensor<T>& vx2 = t.value(x);
                        const Tensor<T>& vw2 = t.value(w);
                        Tensor<T>& gx = t.grad_buf(x);
                        Tensor<T>& gw = t.grad_buf(w);
                        Tensor<T>& gb = t.grad_buf(bias);
                        for (int n = 0; n < N; ++n) {
                            for (int f = 0; f < F; ++f) {
                                const T* gc = g.ptr() + ((size_t(n) * F + f) * Ho) * Wo;
                                T acc = T(0);
                                for (long long i = 0; i < (long long)Ho * Wo; ++i) acc += gc[i];
                                gb.data[size_t(f)] += acc;
                            }
                        }
                        for (int n = 0; n < N; ++n) {
                            for (int c = 0; c < C; ++c) {
                                const T* xc = vx2.ptr() + ((size_t(n) * C + c) * H) * W;
                                T* gxc = gx.ptr() + ((size_t(n) * C + c) * H) * W;
                                for (int ih = 0; ih < H; ++ih) {
                                    for (int iw = 0; iw < W; ++iw) {
                                        const T xv = xc[size_t(ih) * W + iw];
                                        T gxacc = T(0);
                                        for (int f = 0; f < F; ++f) {
                                            const T* wc = vw2.ptr() + ((size_t(c) * F + f) * kh) * kw;
                                            T* gwc = gw.ptr() + ((size_t(c) * F + f) * kh) * kw;
                                            const T* gc = g.ptr() + ((size_t(n) * F + f) * Ho) * Wo;
                                            for (int ky = 0; ky < kh; ++ky) {
                                                const int oh = ih * stride - pad + ky;
                                                if (oh < 0 || oh >= Ho) continue;
                                                for (int kx = 0; kx < kw; ++kx) {
                                                    const int ow = iw * stride - pad + kx;
                                                    if (ow < 0 || ow >= Wo) continue;
                                                    const T gv = gc[size_t(oh) * Wo + ow];
                                                    gxacc += gv * wc[size_t(ky) * kw + kx];
                                                    gwc[size_t(ky) * kw + kx] += gv * xv;
                                                }
                                            }
                                        }
                                        gxc[size_t(ih) * W + iw] += gxacc;
                                    }
                                }
                            }
                        }
                    });
    }

    // ---- backward ----

    void backward(NodeId loss) {
        Node& ln = nodes_[size_t(loss)];
        if (ln.value.numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        dims_str(ln.value.shape));
        }
        Tensor<T> seed(Dims{1});
        seed.data[0] = T(1);
        ln.grad = std::move(seed);
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.grad.data.empty() || !n.backprop) continue;
            n.backprop(*this, i);
        }
    }

    Tensor<T>& grad_buf(NodeId id) {
        Node& n = nodes_[size_t(id)];
        if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape, T(0));
        return n.grad;
    }

private:
    std::vector<Node> nodes_;

    NodeId make(Tensor<T> v, std::vector<NodeId> parents, std::function<void(Tape&, NodeId)> bp) {
        Node n;
        n.value = std::move(v);
        n.parents = std::move(parents);
        n.backprop = std::move(bp);
        nodes_.push_back(std::move(n));
        return NodeId(nodes_.size() - 1);
    }

    void check_same_shape(const char* op, NodeId a, NodeId b) const {
        if (!value(a).same_shape(value(b))) shape_error(op, value(a).shape, value(b).shape);
    }

    [[noreturn]] static void shape_error(const std::string& op, const Dims& a, const Dims& b) {
        throw std::invalid_argument(op + ": incompatible shapes " + dims_str(a) + " and " + dims_str(b));
    }

    // C[m,n] = A[m,k] * B[k,n]
    static void mm_nn(const T* A, const T* B, T* C, int m, int k, int n) {
        for (int i = 0; i < m; ++i) {
            T* crow = C + size_t(i) * n;
            std::fill(crow, crow + n, T(0));
            const T* arow = A + size_t(i) * k;
            for (int p = 0; p < k; ++p) {
                const T a = arow[p];
                const T* brow = B + size_t(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
        }
    }

    // C[m,k] += A[m,n] * B[k,n]^T
    static void mm_nt_acc(const T* A, const T* B, T* C, int m, int n, int k) {
        for (int i = 0; i < m; ++i) {
            const T* arow = A + size_t(i) * n;
            T* crow = C + size_t(i) * k;
            for (int j = 0; j < k; ++j) {
                const T* brow = B + size_t(j) * n;
                T acc = T(0);
                for (int p = 0; p < n; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    }

    // C[k,n] += A[m,k]^T * B[m,n]
    static void mm_tn_acc(const T* A, const T* B, T* C, int m, int k, int n) {
        for (int i = 0; i < m; ++i) {
            const T* arow = A + size_t(i) * k;
            const T* brow = B + size_t(i) * n;
            for (int p = 0; p < k; ++p) {
                const T a = arow[p];
                T* crow = C + size_t(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
        }
    }
};

using Taped = Tape<double>;
using Tapef = Tape<float>;

}  // namespace cqvae
