#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "npbrec/tensor.hpp"

namespace npbrec {
namespace detail {

template <typename T>
struct Twiddles {
    // twiddle[k] for k in [0, n/2): exp(-2*pi*i*k/n)
    std::vector<T> re, im;
};

template <typename T>
const Twiddles<T>& twiddles_for(int n) {
    thread_local std::unordered_map<int, Twiddles<T>> cache;
    auto it = cache.find(n);
    if (it == cache.end()) {
        Twiddles<T> tw;
        tw.re.resize(static_cast<size_t>(n / 2));
        tw.im.resize(static_cast<size_t>(n / 2));
        for (int k = 0; k < n / 2; ++k) {
            const double a = -2.0 * M_PI * k / n;
            tw.re[static_cast<size_t>(k)] = static_cast<T>(std::cos(a));
            tw.im[static_cast<size_t>(k)] = static_cast<T>(std::sin(a));
        }
        it = cache.emplace(n, std::move(tw)).first;
    }
    return it->second;
}

// In-place radix-2 FFT over n complex values stored as (re,im) pairs at
// p + 2*stride*k. `inverse` conjugates the twiddles; no scaling applied.
template <typename T>
void fft_strided(T* p, int n, std::int64_t stride, bool inverse) {
    if (n == 1) return;
    const auto& tw = twiddles_for<T>(n);
    const std::int64_t s2 = 2 * stride;

    // bit-reversal permutation
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(p[i * s2], p[j * s2]);
            std::swap(p[i * s2 + 1], p[j * s2 + 1]);
        }
    }

    for (int len = 2; len <= n; len <<= 1) {
        const int half = len / 2;
        const int step = n / len;
        for (int start = 0; start < n; start += len) {
            for (int k = 0; k < half; ++k) {
                const size_t ti = static_cast<size_t>(k * step);
                const T wr = tw.re[ti];
                const T wi = inverse ? -tw.im[ti] : tw.im[ti];
                T* a = p + (start + k) * s2;
                T* b = p + (start + k + half) * s2;
                const T tr = b[0] * wr - b[1] * wi;
                const T tim = b[0] * wi + b[1] * wr;
                b[0] = a[0] - tr;
                b[1] = a[1] - tim;
                a[0] += tr;
                a[1] += tim;
            }
        }
    }
}

}  // namespace detail

// Centered orthonormal 2-D DFT over the last two spatial axes of a complex
// tensor shaped [..., H, W, 2]. H and W must be powers of two. The centering
// is fftshift on both sides, so the DC coefficient lands at (H/2, W/2).
template <typename T>
Tensor<T> fft2c_raw(const Tensor<T>& x, bool inverse = false) {
    check_complex(x, inverse ? "ifft2c" : "fft2c");
    if (x.ndim() < 3) throw shape_error("fft2c: need at least [H,W,2]");
    const int W = x.shape[static_cast<size_t>(x.ndim() - 2)];
    const int H = x.shape[static_cast<size_t>(x.ndim() - 3)];
    if (!is_pow2(H) || !is_pow2(W))
        throw shape_error("fft2c: spatial dims must be powers of two, got " + shape_str(x.shape));

    const std::int64_t plane = static_cast<std::int64_t>(H) * W * 2;
    const std::int64_t n_batch = x.numel() / plane;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(H) * W));

    Tensor<T> out(x.shape);
    std::vector<T> buf(static_cast<size_t>(plane));
    for (std::int64_t b = 0; b < n_batch; ++b) {
        const T* src = x.ptr() + b * plane;
        T* dst = out.ptr() + b * plane;
        // ifftshift into the work buffer (equal to fftshift for even dims)
        for (int i = 0; i < H; ++i) {
            const int si = (i + H / 2) % H;
            for (int j = 0; j < W; ++j) {
                const int sj = (j + W / 2) % W;
                buf[static_cast<size_t>((i * W + j) * 2)] = src[(si * W + sj) * 2];
                buf[static_cast<size_t>((i * W + j) * 2 + 1)] = src[(si * W + sj) * 2 + 1];
            }
        }
        for (int i = 0; i < H; ++i) detail::fft_strided(buf.data() + static_cast<std::int64_t>(i) * W * 2, W, 1, inverse);
        for (int j = 0; j < W; ++j) detail::fft_strided(buf.data() + 2 * j, H, W, inverse);
        // fftshift back and apply the orthonormal scale
        for (int i = 0; i < H; ++i) {
            const int si = (i + H / 2) % H;
            for (int j = 0; j < W; ++j) {
                const int sj = (j + W / 2) % W;
                dst[(si * W + sj) * 2] = buf[static_cast<size_t>((i * W + j) * 2)] * scale;
                dst[(si * W + sj) * 2 + 1] = buf[static_cast<size_t>((i * W + j) * 2 + 1)] * scale;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> ifft2c_raw(const Tensor<T>& x) {
    return fft2c_raw(x, true);
}

}  // namespace npbrec
