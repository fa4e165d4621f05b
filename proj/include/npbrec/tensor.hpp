#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "npbrec/errors.hpp"

namespace npbrec {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw shape_error("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major n-d array. Complex data uses a trailing axis of length 2.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            throw shape_error("tensor data length does not match shape " + shape_str(shape));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // flat index helpers for the common ranks
    std::int64_t at2(int i, int j) const { return static_cast<std::int64_t>(i) * dim(1) + j; }
    std::int64_t at3(int i, int j, int k) const {
        return (static_cast<std::int64_t>(i) * dim(1) + j) * dim(2) + k;
    }
    std::int64_t at4(int i, int j, int k, int l) const {
        return ((static_cast<std::int64_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l;
    }

    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
}

template <typename T>
void check_complex(const Tensor<T>& t, const char* op) {
    if (t.ndim() < 1 || t.shape.back() != 2)
        throw shape_error(std::string(op) + ": expected trailing complex axis of size 2, got " +
                          shape_str(t.shape));
}

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 has portable output but the standard
// distributions do not, so uniform/gaussian are implemented explicitly.
// ---------------------------------------------------------------------------

struct SplitMix64 {
    std::uint64_t s;
    explicit SplitMix64(std::uint64_t seed) : s(seed) {}
    std::uint64_t next() {
        std::uint64_t z = (s += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
};

// Mix an arbitrary list of 64-bit values into a derived seed.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x6a09e667f3bcc909ULL;
    for (std::uint64_t p : parts) {
        h ^= SplitMix64(p).next() + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h = SplitMix64(h).next();
    }
    return h;
}

// xoshiro256** with explicit float conversions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& w : state_) w = sm.next();
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform in [0,1) with 53 random bits
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0,n), n > 0
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>((static_cast<unsigned __int128>(next_u64()) *
                                          static_cast<unsigned __int128>(n)) >>
                                         64);
    }

    // Box-Muller; consumes two uniforms per call, no cached spare.
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * M_PI * u2);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<std::uint64_t, 4> state_{};
};

template <typename T>
Tensor<T> random_uniform(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<T> t(shape);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> random_gaussian(const Shape& shape, Rng& rng, double mean = 0.0, double std = 1.0) {
    Tensor<T> t(shape);
    for (auto& v : t.data) v = static_cast<T>(mean + std * rng.gaussian());
    return t;
}

}  // namespace npbrec
