#pragma once

// Heavy kernels: matrix multiply (batched, leading-dim broadcast), 2-d
// convolution via im2col, and the two normalization layers. Convolution and
// matmul carry hand-written backward passes; the norms are composed from
// primitives so their gradients come from the tape.

#include "ctfusion/tensor.hpp"

namespace ctfusion {

// ---------------------------------------------------------------------------
// gemm: C[m,n] += A[m,k] * B[k,n], row-major. i-k-j order vectorizes over j;
// row-parallel variant is bit-deterministic for any thread count.

template <class T>
void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* ar = a + i * k;
        T* cr = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            T av = ar[p];
            const T* br = b + p * n;
            for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

template <class T>
void gemm_acc_parallel(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    if (m * k * n < (1 << 15)) {
        gemm_acc(a, b, c, m, k, n);
        return;
    }
    parallel_for(m, [&](int64_t lo, int64_t hi) { gemm_acc(a + lo * k, b, c + lo * n, hi - lo, k, n); });
}

template <class T>
std::vector<T> transpose_copy(const T* src, int64_t rows, int64_t cols) {
    std::vector<T> out(static_cast<size_t>(rows * cols));
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
    return out;
}

// ---------------------------------------------------------------------------
// matmul: [..., m, k] x [..., k, n] -> [..., m, n], leading dims broadcast.
// dA = dC * B^T, dB = A^T * dC, summed over broadcast batches.

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands must have rank >= 2");
    int64_t m = a.dim(-2), ka = a.dim(-1);
    int64_t kb = b.dim(-2), n = b.dim(-1);
    if (ka != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    Shape batch = broadcast_shape(a_batch, b_batch);
    int64_t nbatch = shape_numel(batch);

    // per-batch element offsets under broadcasting
    auto batch_offsets = [&](const Shape& own) {
        std::vector<int64_t> offs(static_cast<size_t>(nbatch), 0);
        if (batch.empty()) return offs;
        auto strides = broadcast_strides(own, batch);
        int64_t idx = 0;
        detail::strided_walk(batch, strides, [&](int64_t, int64_t off) { offs[static_cast<size_t>(idx++)] = off; });
        return offs;
    };
    auto a_offs = batch_offsets(a_batch);
    auto b_offs = batch_offsets(b_batch);

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(static_cast<size_t>(nbatch * m * n), T(0));
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    if (nbatch > 1) {
        parallel_for(nbatch, [&](int64_t lo, int64_t hi) {
            for (int64_t bi = lo; bi < hi; ++bi)
                gemm_acc(ad + a_offs[static_cast<size_t>(bi)] * m * ka,
                         bd + b_offs[static_cast<size_t>(bi)] * ka * n, out.data() + bi * m * n, m, ka, n);
        });
    } else {
        gemm_acc_parallel(ad, bd, out.data(), m, ka, n);
    }

    int64_t k = ka;
    return Tensor<T>::make_op(
        out_shape, std::move(out), {a, b},
        [a, b, a_offs, b_offs, nbatch, m, k, n](typename Tensor<T>::Node& self) {
            const T* ad = a.data().data();
            const T* bd = b.data().data();
            const T* gd = self.grad.data();
            if (a.node()->needs_grad()) {
                std::vector<T> ga(a.data().size(), T(0));
                for (int64_t bi = 0; bi < nbatch; ++bi) {
                    // dA += dC * B^T
                    auto bt = transpose_copy(bd + b_offs[static_cast<size_t>(bi)] * k * n, k, n);
                    gemm_acc_parallel(gd + bi * m * n, bt.data(),
                                      ga.data() + a_offs[static_cast<size_t>(bi)] * m * k, m, n, k);
                }
                Tensor<T>::accum(a.node(), ga);
            }
            if (b.node()->needs_grad()) {
                std::vector<T> gb(b.data().size(), T(0));
                for (int64_t bi = 0; bi < nbatch; ++bi) {
                    // dB += A^T * dC
                    auto at = transpose_copy(ad + a_offs[static_cast<size_t>(bi)] * m * k, m, k);
                    gemm_acc_parallel(at.data(), gd + bi * m * n,
                                      gb.data() + b_offs[static_cast<size_t>(bi)] * k * n, k, m, n);
                }
                Tensor<T>::accum(b.node(), gb);
            }
        });
}

// ---------------------------------------------------------------------------
// conv2d: x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]; zero padding.
// H' = (H + 2p - kh) / s + 1 (integer division).

namespace detail {

template <class T>
void im2col(const T* img, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t ho, int64_t wo, T* col) {
    // col: [cin*kh*kw, ho*wo]
    int64_t p = ho * wo;
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                T* row = col + ((c * kh + ky) * kw + kx) * p;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + oy * wo, row + (oy + 1) * wo, T(0));
                        continue;
                    }
                    const T* src = img + (c * h + iy) * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_acc(const T* col, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
                int64_t pad, int64_t ho, int64_t wo, T* img) {
    int64_t p = ho * wo;
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                const T* row = col + ((c * kh + ky) * kw + kx) * p;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = img + (c * h + iy) * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int64_t stride,
                 int64_t pad) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: x must be [B,C,H,W], w [Co,Ci,kh,kw]");
    int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin)
        throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(cin) +
                         ", kernel expects " + std::to_string(w.dim(1)));
    if (b.rank() != 1 || b.dim(0) != cout) throw ShapeError("conv2d: bias must be [Cout]");
    if (stride < 1) throw ArgError("conv2d: stride must be >= 1");
    if (pad < 0) throw ArgError("conv2d: pad must be >= 0");
    if (kh > h + 2 * pad || kw > wd + 2 * pad) throw ShapeError("conv2d: kernel larger than padded input");
    int64_t ho = (h + 2 * pad - kh) / stride + 1;
    int64_t wo = (wd + 2 * pad - kw) / stride + 1;

    int64_t krows = cin * kh * kw;  // col rows
    int64_t p = ho * wo;            // col cols
    std::vector<T> cols(static_cast<size_t>(batch * krows * p));
    std::vector<T> out(static_cast<size_t>(batch * cout * p), T(0));
    const T* xd = x.data().data();
    const T* wmat = w.data().data();  // [cout, krows] viewed flat
    const T* bias = b.data().data();
    parallel_for(batch, [&](int64_t lo, int64_t hi) {
        for (int64_t ni = lo; ni < hi; ++ni) {
            T* col = cols.data() + ni * krows * p;
            detail::im2col(xd + ni * cin * h * wd, cin, h, wd, kh, kw, stride, pad, ho, wo, col);
            T* o = out.data() + ni * cout * p;
            gemm_acc(wmat, col, o, cout, krows, p);
            for (int64_t c = 0; c < cout; ++c) {
                T bv = bias[c];
                for (int64_t q = 0; q < p; ++q) o[c * p + q] += bv;
            }
        }
    });

    Shape out_shape{batch, cout, ho, wo};
    auto cols_keep = std::make_shared<std::vector<T>>(std::move(cols));
    return Tensor<T>::make_op(
        out_shape, std::move(out), {x, w, b},
        [x, w, b, cols_keep, batch, cin, h, wd, cout, kh, kw, stride, pad, ho, wo, krows,
         p](typename Tensor<T>::Node& self) {
            const T* gd = self.grad.data();
            if (b.node()->needs_grad()) {
                std::vector<T> gb(static_cast<size_t>(cout), T(0));
                for (int64_t ni = 0; ni < batch; ++ni)
                    for (int64_t c = 0; c < cout; ++c) {
                        const T* row = gd + (ni * cout + c) * p;
                        T s = T(0);
                        for (int64_t q = 0; q < p; ++q) s += row[q];
                        gb[static_cast<size_t>(c)] += s;
                    }
                Tensor<T>::accum(b.node(), gb);
            }
            if (w.node()->needs_grad()) {
                std::vector<T> gw(w.data().size(), T(0));
                for (int64_t ni = 0; ni < batch; ++ni) {
                    // dW += dY[cout,p] * col^T[p,krows]
                    auto colt = transpose_copy(cols_keep->data() + ni * krows * p, krows, p);
                    gemm_acc_parallel(gd + ni * cout * p, colt.data(), gw.data(), cout, p, krows);
                }
                Tensor<T>::accum(w.node(), gw);
            }
            if (x.node()->needs_grad()) {
                std::vector<T> gx(x.data().size(), T(0));
                auto wt = transpose_copy(w.data().data(), cout, krows);  // [krows, cout]
                parallel_for(batch, [&](int64_t lo, int64_t hi) {
                    std::vector<T> dcol(static_cast<size_t>(krows * p));
                    for (int64_t ni = lo; ni < hi; ++ni) {
                        std::fill(dcol.begin(), dcol.end(), T(0));
                        gemm_acc(wt.data(), gd + ni * cout * p, dcol.data(), krows, cout, p);
                        detail::col2im_acc(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                                           gx.data() + ni * cin * h * wd);
                    }
                });
                Tensor<T>::accum(x.node(), gx);
            }
        });
}

// ---------------------------------------------------------------------------
// normalization. Both are composites, so their backward comes off the tape.

// layer norm over the last axis; gamma/beta shaped [C]
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (eps <= T(0)) throw ArgError("layer_norm: eps must be > 0");
    int64_t c = x.dim(-1);
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("layer_norm: gamma/beta must match the normalized extent");
    int last = x.rank() - 1;
    auto m = mean(x, {last}, true);
    auto d = sub(x, m);
    auto v = mean(mul(d, d), {last}, true);
    auto norm = div(d, sqrt_t(add_scalar(v, eps)));
    return add(mul(norm, gamma), beta);
}

// running stats for batch norm; momentum 1 makes eval reproduce the last
// training batch exactly (variance stored biased for that identity)
template <class T>
struct BnState {
    std::vector<T> running_mean, running_var;
    double momentum = 0.1;
    bool initialized = false;
};

enum class Mode { train, eval };

// batch norm over (B, H, W) per channel; x [B,C,H,W], gamma/beta [C]
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     Mode mode, BnState<T>& state) {
    if (x.rank() != 4) throw ShapeError("batch_norm: expected [B,C,H,W]");
    int64_t c = x.dim(1);
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("batch_norm: gamma/beta must match the channel extent");
    if (eps <= T(0)) throw ArgError("batch_norm: eps must be > 0");
    auto g = reshape(gamma, {1, c, 1, 1});
    auto be = reshape(beta, {1, c, 1, 1});
    if (mode == Mode::train) {
        auto m = mean(x, {0, 2, 3}, true);
        auto d = sub(x, m);
        auto v = mean(mul(d, d), {0, 2, 3}, true);
        {
            // running update happens off the tape
            const auto& mv = m.data();
            const auto& vv = v.data();
            if (!state.initialized) {
                state.running_mean.assign(static_cast<size_t>(c), T(0));
                state.running_var.assign(static_cast<size_t>(c), T(1));
            }
            T mom = static_cast<T>(state.momentum);
            for (int64_t i = 0; i < c; ++i) {
                state.running_mean[static_cast<size_t>(i)] =
                    (T(1) - mom) * state.running_mean[static_cast<size_t>(i)] + mom * mv[static_cast<size_t>(i)];
                state.running_var[static_cast<size_t>(i)] =
                    (T(1) - mom) * state.running_var[static_cast<size_t>(i)] + mom * vv[static_cast<size_t>(i)];
            }
            state.initialized = true;
        }
        auto norm = div(d, sqrt_t(add_scalar(v, eps)));
        return add(mul(norm, g), be);
    }
    if (!state.initialized)
        throw StateError("batch_norm: eval mode before any training step initialized running stats");
    auto rm = Tensor<T>::from({1, c, 1, 1}, state.running_mean);
    auto rv = Tensor<T>::from({1, c, 1, 1}, state.running_var);
    auto norm = div(sub(x, rm), sqrt_t(add_scalar(rv, eps)));
    return add(mul(norm, g), be);
}

}  // namespace ctfusion
