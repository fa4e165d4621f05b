#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "npbrec/fft.hpp"
#include "npbrec/tensor.hpp"

namespace npbrec {
namespace detail {

// numpy-style broadcast of two shapes; strides are per output dimension in
// elements, zero along broadcast dimensions.
struct BcastPlan {
    Shape out;
    std::vector<std::int64_t> stride_a, stride_b;
};

inline BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const int nd = std::max(a.size(), b.size());
    BcastPlan p;
    p.out.resize(static_cast<size_t>(nd));
    p.stride_a.assign(static_cast<size_t>(nd), 0);
    p.stride_b.assign(static_cast<size_t>(nd), 0);

    std::vector<std::int64_t> full_a(static_cast<size_t>(nd), 1), full_b(static_cast<size_t>(nd), 1);
    for (size_t i = 0; i < a.size(); ++i) full_a[nd - a.size() + i] = a[i];
    for (size_t i = 0; i < b.size(); ++i) full_b[nd - b.size() + i] = b[i];

    std::int64_t sa = 1, sb = 1;
    std::vector<std::int64_t> str_a(static_cast<size_t>(nd)), str_b(static_cast<size_t>(nd));
    for (int d = nd - 1; d >= 0; --d) {
        str_a[static_cast<size_t>(d)] = sa;
        str_b[static_cast<size_t>(d)] = sb;
        sa *= full_a[static_cast<size_t>(d)];
        sb *= full_b[static_cast<size_t>(d)];
    }
    for (int d = 0; d < nd; ++d) {
        const auto da = full_a[static_cast<size_t>(d)], db = full_b[static_cast<size_t>(d)];
        if (da != db && da != 1 && db != 1)
            throw shape_error(std::string(op) + ": shapes not broadcast-compatible " + shape_str(a) +
                              " vs " + shape_str(b));
        p.out[static_cast<size_t>(d)] = static_cast<int>(std::max(da, db));
        p.stride_a[static_cast<size_t>(d)] = (da == 1 && db != 1) ? 0 : str_a[static_cast<size_t>(d)];
        p.stride_b[static_cast<size_t>(d)] = (db == 1 && da != 1) ? 0 : str_b[static_cast<size_t>(d)];
    }
    return p;
}

template <typename F>
void bcast_for_each(const BcastPlan& p, F&& fn) {
    const int nd = static_cast<int>(p.out.size());
    if (nd == 0) {
        fn(std::int64_t(0), std::int64_t(0), std::int64_t(0));
        return;
    }
    std::vector<int> idx(static_cast<size_t>(nd), 0);
    std::int64_t oa = 0, ob = 0, flat = 0;
    for (;;) {
        fn(flat, oa, ob);
        ++flat;
        int d = nd - 1;
        for (; d >= 0; --d) {
            ++idx[static_cast<size_t>(d)];
            oa += p.stride_a[static_cast<size_t>(d)];
            ob += p.stride_b[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < p.out[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            oa -= p.stride_a[static_cast<size_t>(d)] * p.out[static_cast<size_t>(d)];
            ob -= p.stride_b[static_cast<size_t>(d)] * p.out[static_cast<size_t>(d)];
        }
        if (d < 0) break;
    }
}

}  // namespace detail

// Reverse-mode tape. Values are computed eagerly at node creation; backward
// replays the tape in reverse. Node indices strictly increase from inputs to
// outputs, so reverse index order is a valid reverse-topological order.
// Single-threaded during construction and backward; distinct graphs over
// immutable weight tensors may run concurrently.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&)>;

    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<int> inputs;
        BackwardFn backward;
        bool requires_grad = false;
    };

    explicit Graph(std::uint64_t seed = 0) : rng_(seed) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    int input(Tensor<T> v, bool requires_grad = false) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int parameter(Tensor<T> v) { return input(std::move(v), true); }

    int constant(Tensor<T> v) { return input(std::move(v), false); }

    const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor<T>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    size_t size() const { return nodes_.size(); }
    Rng& rng() { return rng_; }

    // Building block for ops defined outside this header (mri, ssim, ...).
    int make_node(Tensor<T> value, std::vector<int> inputs, BackwardFn bwd) {
        Node n;
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        bool rg = false;
        for (int i : n.inputs) rg = rg || nodes_[static_cast<size_t>(i)].requires_grad;
        n.requires_grad = rg;
        if (rg) n.backward = std::move(bwd);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Accumulation target for backward closures; null when the input does not
    // participate in differentiation.
    Tensor<T>* grad_ref(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        return n.requires_grad ? &n.grad : nullptr;
    }

    void backward(int loss) {
        if (val(loss).numel() != 1) throw shape_error("backward: loss must be scalar");
        for (auto& n : nodes_) {
            if (n.requires_grad) n.grad = Tensor<T>(n.value.shape);
        }
        Node& ln = nodes_[static_cast<size_t>(loss)];
        if (!ln.requires_grad) return;  // loss independent of all parameters
        ln.grad.data[0] = T(1);
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.requires_grad && n.backward) n.backward(*this);
        }
    }

    // ---- elementwise -------------------------------------------------------

    int add(int a, int b) {
        check_same_shape(val(a), val(b), "add");
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] + val(b)[i];
        return make_node(std::move(out), {a, b}, [a, b](Graph& g) {
            const auto& gd = g.nodes_.back().grad;  // placeholder, replaced below
            (void)gd;
            (void)a;
            (void)b;
        });
    }

    int sub(int a, int b) {
        check_same_shape(val(a), val(b), "sub");
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] - val(b)[i];
        const int id = make_node(std::move(out), {a, b}, nullptr);
        set_backward(id, [id, a, b](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            if (auto* ga = g.grad_ref(a))
                for (std::int64_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i];
            if (auto* gb = g.grad_ref(b))
                for (std::int64_t i = 0; i < go.numel(); ++i) (*gb)[i] -= go[i];
        });
        return id;
    }

    int mul(int a, int b) {
        check_same_shape(val(a), val(b), "mul");
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] * val(b)[i];
        const int id = make_node(std::move(out), {a, b}, nullptr);
        set_backward(id, [id, a, b](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            if (auto* ga = g.grad_ref(a))
                for (std::int64_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i] * g.val(b)[i];
            if (auto* gb = g.grad_ref(b))
                for (std::int64_t i = 0; i < go.numel(); ++i) (*gb)[i] += go[i] * g.val(a)[i];
        });
        return id;
    }

    int div(int a, int b) {
        check_same_shape(val(a), val(b), "div");
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] / val(b)[i];
        const int id = make_node(std::move(out), {a, b}, nullptr);
        set_backward(id, [id, a, b](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            if (auto* ga = g.grad_ref(a))
                for (std::int64_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i] / g.val(b)[i];
            if (auto* gb = g.grad_ref(b))
                for (std::int64_t i = 0; i < go.numel(); ++i)
                    (*gb)[i] -= go[i] * g.val(id)[i] / g.val(b)[i];
        });
        return id;
    }

    int scale(int a, T c) {
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] * c;
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, c](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (std::int64_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i] * c;
            }
        });
        return id;
    }

    int offset(int a, T c) {
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] + c;
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (std::int64_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i];
            }
        });
        return id;
    }

    // x * s where s is a [1]-shaped node (trainable scalars like eta)
    int mul_scalar_node(int x, int s) {
        if (val(s).numel() != 1) throw shape_error("mul_scalar_node: scalar operand must have numel 1");
        const T sv = val(s)[0];
        Tensor<T> out(val(x).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(x)[i] * sv;
        const int id = make_node(std::move(out), {x, s}, nullptr);
        set_backward(id, [id, x, s](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            const T sval = g.val(s)[0];
            if (auto* gx = g.grad_ref(x))
                for (std::int64_t i = 0; i < go.numel(); ++i) (*gx)[i] += go[i] * sval;
            if (auto* gs = g.grad_ref(s)) {
                T acc = T(0);
                for (std::int64_t i = 0; i < go.numel(); ++i) acc += go[i] * g.val(x)[i];
                (*gs)[0] += acc;
            }
        });
        return id;
    }

    // 1/x elementwise; exact zeros map to zero with zero gradient
    int reciprocal(int a) {
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] == T(0) ? T(0) : T(1) / val(a)[i];
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                const Tensor<T>& o = g.val(id);
                for (std::int64_t i = 0; i < go.numel(); ++i) (*ga)[i] -= go[i] * o[i] * o[i];
            }
        });
        return id;
    }

    // ---- reductions --------------------------------------------------------

    int sum_all(int a) {
        T acc = T(0);
        for (std::int64_t i = 0; i < val(a).numel(); ++i) acc += val(a)[i];
        Tensor<T> out(Shape{1});
        out[0] = acc;
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const T go = g.grad(id)[0];
                for (std::int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += go;
            }
        });
        return id;
    }

    int mean_all(int a) {
        const T inv = T(1) / static_cast<T>(val(a).numel());
        T acc = T(0);
        for (std::int64_t i = 0; i < val(a).numel(); ++i) acc += val(a)[i];
        Tensor<T> out(Shape{1});
        out[0] = acc * inv;
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, inv](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const T go = g.grad(id)[0] * inv;
                for (std::int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += go;
            }
        });
        return id;
    }

    // sum over the leading axis: [N, rest...] -> [rest...]
    int sum_leading(int a) {
        const Tensor<T>& x = val(a);
        if (x.ndim() < 2) throw shape_error("sum_leading: need rank >= 2");
        const int n = x.dim(0);
        Shape rest(x.shape.begin() + 1, x.shape.end());
        Tensor<T> out(rest);
        const std::int64_t block = out.numel();
        for (int i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < block; ++j) out[j] += x[i * block + j];
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, n, block](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (int i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < block; ++j) (*ga)[i * block + j] += go[j];
            }
        });
        return id;
    }

    // ---- layer primitives ---------------------------------------------------

    int leaky_relu(int a, T slope) {
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            const T v = val(a)[i];
            out[i] = v > T(0) ? v : v * slope;
        }
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, slope](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                const Tensor<T>& x = g.val(a);
                for (std::int64_t i = 0; i < go.numel(); ++i)
                    (*ga)[i] += x[i] > T(0) ? go[i] : go[i] * slope;
            }
        });
        return id;
    }

    // 2x2 mean pooling with stride 2 over the last two axes; dims must be even
    int avg_pool2(int a) {
        const Tensor<T>& x = val(a);
        if (x.ndim() < 2) throw shape_error("avg_pool2: need rank >= 2");
        const int W = x.dim(x.ndim() - 1), H = x.dim(x.ndim() - 2);
        if (H % 2 || W % 2) throw shape_error("avg_pool2: spatial dims must be even");
        Shape os = x.shape;
        os[static_cast<size_t>(x.ndim() - 2)] = H / 2;
        os[static_cast<size_t>(x.ndim() - 1)] = W / 2;
        Tensor<T> out(os);
        const std::int64_t batches = x.numel() / (static_cast<std::int64_t>(H) * W);
        for (std::int64_t b = 0; b < batches; ++b) {
            const T* src = x.ptr() + b * H * W;
            T* dst = out.ptr() + b * (H / 2) * (W / 2);
            for (int i = 0; i < H / 2; ++i)
                for (int j = 0; j < W / 2; ++j)
                    dst[i * (W / 2) + j] =
                        (src[(2 * i) * W + 2 * j] + src[(2 * i) * W + 2 * j + 1] +
                         src[(2 * i + 1) * W + 2 * j] + src[(2 * i + 1) * W + 2 * j + 1]) /
                        T(4);
        }
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, H, W, batches](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (std::int64_t b = 0; b < batches; ++b) {
                    const T* gs = go.ptr() + b * (H / 2) * (W / 2);
                    T* gd = ga->ptr() + b * H * W;
                    for (int i = 0; i < H / 2; ++i)
                        for (int j = 0; j < W / 2; ++j) {
                            const T v = gs[i * (W / 2) + j] / T(4);
                            gd[(2 * i) * W + 2 * j] += v;
                            gd[(2 * i) * W + 2 * j + 1] += v;
                            gd[(2 * i + 1) * W + 2 * j] += v;
                            gd[(2 * i + 1) * W + 2 * j + 1] += v;
                        }
                }
            }
        });
        return id;
    }

    int nearest_upsample2(int a) {
        const Tensor<T>& x = val(a);
        if (x.ndim() < 2) throw shape_error("nearest_upsample2: need rank >= 2");
        const int W = x.dim(x.ndim() - 1), H = x.dim(x.ndim() - 2);
        Shape os = x.shape;
        os[static_cast<size_t>(x.ndim() - 2)] = H * 2;
        os[static_cast<size_t>(x.ndim() - 1)] = W * 2;
        Tensor<T> out(os);
        const std::int64_t batches = x.numel() / (static_cast<std::int64_t>(H) * W);
        for (std::int64_t b = 0; b < batches; ++b) {
            const T* src = x.ptr() + b * H * W;
            T* dst = out.ptr() + b * 4 * H * W;
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j) dst[i * 2 * W + j] = src[(i / 2) * W + j / 2];
        }
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, H, W, batches](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (std::int64_t b = 0; b < batches; ++b) {
                    const T* gs = go.ptr() + b * 4 * H * W;
                    T* gd = ga->ptr() + b * H * W;
                    for (int i = 0; i < 2 * H; ++i)
                        for (int j = 0; j < 2 * W; ++j) gd[(i / 2) * W + j / 2] += gs[i * 2 * W + j];
                }
            }
        });
        return id;
    }

    // concat along the channel (leading) axis: [Ca,H,W] + [Cb,H,W] -> [Ca+Cb,H,W]
    int concat_channels(int a, int b) {
        const Tensor<T>& xa = val(a);
        const Tensor<T>& xb = val(b);
        if (xa.ndim() != 3 || xb.ndim() != 3 || xa.dim(1) != xb.dim(1) || xa.dim(2) != xb.dim(2))
            throw shape_error("concat_channels: expected [C,H,W] operands with equal spatial dims");
        Shape os{xa.dim(0) + xb.dim(0), xa.dim(1), xa.dim(2)};
        Tensor<T> out(os);
        std::copy(xa.data.begin(), xa.data.end(), out.data.begin());
        std::copy(xb.data.begin(), xb.data.end(), out.data.begin() + xa.numel());
        const int id = make_node(std::move(out), {a, b}, nullptr);
        const std::int64_t na = xa.numel();
        set_backward(id, [id, a, b, na](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            if (auto* ga = g.grad_ref(a))
                for (std::int64_t i = 0; i < na; ++i) (*ga)[i] += go[i];
            if (auto* gb = g.grad_ref(b))
                for (std::int64_t i = na; i < go.numel(); ++i) (*gb)[i - na] += go[i];
        });
        return id;
    }

    // At training time zeroes each element with probability p and rescales
    // survivors by 1/(1-p); identity otherwise. The mask is a constant for
    // differentiation purposes.
    int dropout(int a, double p, bool training) {
        if (p < 0.0 || p >= 1.0) throw shape_error("dropout: require 0 <= p < 1");
        if (!training || p == 0.0) return a;
        const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
        Tensor<T> mask(val(a).shape);
        for (std::int64_t i = 0; i < mask.numel(); ++i)
            mask[i] = rng_.uniform() < p ? T(0) : keep_scale;
        Tensor<T> out(val(a).shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = val(a)[i] * mask[i];
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, m = std::move(mask)](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (std::int64_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i] * m[i];
            }
        });
        return id;
    }

    // ---- convolution ---------------------------------------------------------

    // Cross-correlation of [C_in,H,W] with kernels [C_out,C_in,kh,kw] plus bias.
    int conv2d(int x, int k, int b, int padding) {
        const Tensor<T>& xin = val(x);
        const Tensor<T>& ker = val(k);
        const Tensor<T>& bias = val(b);
        if (xin.ndim() != 3 || ker.ndim() != 4)
            throw shape_error("conv2d: expected input [C,H,W] and kernel [Co,Ci,kh,kw]");
        const int Ci = xin.dim(0), H = xin.dim(1), W = xin.dim(2);
        const int Co = ker.dim(0), kh = ker.dim(2), kw = ker.dim(3);
        if (ker.dim(1) != Ci)
            throw shape_error("conv2d: kernel C_in " + std::to_string(ker.dim(1)) +
                              " does not match input channels " + std::to_string(Ci));
        if (kh % 2 == 0 || kw % 2 == 0) throw shape_error("conv2d: kernel dims must be odd");
        if (bias.numel() != Co) throw shape_error("conv2d: bias length must equal C_out");
        const int Ho = H + 2 * padding - kh + 1;
        const int Wo = W + 2 * padding - kw + 1;
        if (Ho <= 0 || Wo <= 0) throw shape_error("conv2d: output would be empty");

        Tensor<T> out(Shape{Co, Ho, Wo});
        for (int co = 0; co < Co; ++co) {
            T* op = out.ptr() + static_cast<std::int64_t>(co) * Ho * Wo;
            const T bv = bias[co];
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) op[i] = bv;
            for (int ci = 0; ci < Ci; ++ci) {
                const T* ip = xin.ptr() + static_cast<std::int64_t>(ci) * H * W;
                for (int dy = 0; dy < kh; ++dy) {
                    const int oy0 = std::max(0, padding - dy), oy1 = std::min(Ho - 1, H - 1 + padding - dy);
                    for (int dx = 0; dx < kw; ++dx) {
                        const int ox0 = std::max(0, padding - dx), ox1 = std::min(Wo - 1, W - 1 + padding - dx);
                        const T w = ker[xin.at2(0, 0) + ((static_cast<std::int64_t>(co) * Ci + ci) * kh + dy) * kw + dx];
                        if (w == T(0)) continue;
                        for (int oy = oy0; oy <= oy1; ++oy) {
                            const T* irow = ip + static_cast<std::int64_t>(oy - padding + dy) * W + (ox0 - padding + dx);
                            T* orow = op + static_cast<std::int64_t>(oy) * Wo + ox0;
                            for (int ox = 0; ox <= ox1 - ox0; ++ox) orow[ox] += w * irow[ox];
                        }
                    }
                }
            }
        }
        const int id = make_node(std::move(out), {x, k, b}, nullptr);
        set_backward(id, [id, x, k, b, Ci, H, W, Co, kh, kw, Ho, Wo, padding](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            const Tensor<T>& xin = g.val(x);
            const Tensor<T>& ker = g.val(k);
            Tensor<T>* gx = g.grad_ref(x);
            Tensor<T>* gk = g.grad_ref(k);
            Tensor<T>* gb = g.grad_ref(b);
            if (gb) {
                for (int co = 0; co < Co; ++co) {
                    const T* gp = go.ptr() + static_cast<std::int64_t>(co) * Ho * Wo;
                    T acc = T(0);
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) acc += gp[i];
                    (*gb)[co] += acc;
                }
            }
            for (int co = 0; co < Co && (gx || gk); ++co) {
                const T* gp = go.ptr() + static_cast<std::int64_t>(co) * Ho * Wo;
                for (int ci = 0; ci < Ci; ++ci) {
                    const T* ip = xin.ptr() + static_cast<std::int64_t>(ci) * H * W;
                    T* gxp = gx ? gx->ptr() + static_cast<std::int64_t>(ci) * H * W : nullptr;
                    for (int dy = 0; dy < kh; ++dy) {
                        const int oy0 = std::max(0, padding - dy), oy1 = std::min(Ho - 1, H - 1 + padding - dy);
                        for (int dx = 0; dx < kw; ++dx) {
                            const int ox0 = std::max(0, padding - dx), ox1 = std::min(Wo - 1, W - 1 + padding - dx);
                            const std::int64_t kidx = ((static_cast<std::int64_t>(co) * Ci + ci) * kh + dy) * kw + dx;
                            const T w = ker[kidx];
                            T wacc = T(0);
                            for (int oy = oy0; oy <= oy1; ++oy) {
                                const std::int64_t irow = static_cast<std::int64_t>(oy - padding + dy) * W + (ox0 - padding + dx);
                                const T* grow = gp + static_cast<std::int64_t>(oy) * Wo + ox0;
                                if (gxp) {
                                    T* gxrow = gxp + irow;
                                    for (int ox = 0; ox <= ox1 - ox0; ++ox) gxrow[ox] += w * grow[ox];
                                }
                                if (gk) {
                                    const T* xrow = ip + irow;
                                    for (int ox = 0; ox <= ox1 - ox0; ++ox) wacc += grow[ox] * xrow[ox];
                                }
                            }
                            if (gk) (*gk)[kidx] += wacc;
                        }
                    }
                }
            }
        });
        return id;
    }

    // ---- complex ops (trailing axis of size 2) --------------------------------

    int fft2c(int a) { return fft_node(a, false); }
    int ifft2c(int a) { return fft_node(a, true); }

    int complex_mul(int a, int b) { return complex_binary(a, b, false); }
    int complex_conj_mul(int a, int b) { return complex_binary(a, b, true); }

    // complex tensor [..,H,W,2] scaled per pixel by a real map [H,W]
    int scale_by_map(int a, int r) {
        const Tensor<T>& x = val(a);
        const Tensor<T>& m = val(r);
        check_complex(x, "scale_by_map");
        if (m.ndim() != 2 || x.ndim() < 3 || x.dim(x.ndim() - 3) != m.dim(0) ||
            x.dim(x.ndim() - 2) != m.dim(1))
            throw shape_error("scale_by_map: map shape must match the spatial dims");
        const std::int64_t hw = m.numel();
        const std::int64_t batches = x.numel() / (hw * 2);
        Tensor<T> out(x.shape);
        for (std::int64_t bidx = 0; bidx < batches; ++bidx)
            for (std::int64_t p = 0; p < hw; ++p) {
                const std::int64_t o = (bidx * hw + p) * 2;
                out[o] = x[o] * m[p];
                out[o + 1] = x[o + 1] * m[p];
            }
        const int id = make_node(std::move(out), {a, r}, nullptr);
        set_backward(id, [id, a, r, hw, batches](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            const Tensor<T>& x = g.val(a);
            const Tensor<T>& m = g.val(r);
            Tensor<T>* ga = g.grad_ref(a);
            Tensor<T>* gr = g.grad_ref(r);
            for (std::int64_t bidx = 0; bidx < batches; ++bidx)
                for (std::int64_t p = 0; p < hw; ++p) {
                    const std::int64_t o = (bidx * hw + p) * 2;
                    if (ga) {
                        (*ga)[o] += go[o] * m[p];
                        (*ga)[o + 1] += go[o + 1] * m[p];
                    }
                    if (gr) (*gr)[p] += go[o] * x[o] + go[o + 1] * x[o + 1];
                }
        });
        return id;
    }

    // multiply k-space columns by a constant binary mask (length W)
    int mask_columns(int a, std::vector<std::uint8_t> cols) {
        const Tensor<T>& x = val(a);
        check_complex(x, "mask_columns");
        if (x.ndim() < 3) throw shape_error("mask_columns: need [..,H,W,2]");
        const int W = x.dim(x.ndim() - 2);
        if (static_cast<int>(cols.size()) != W)
            throw shape_error("mask_columns: mask length does not match k-space width");
        Tensor<T> out(x.shape);
        const std::int64_t rows = x.numel() / (static_cast<std::int64_t>(W) * 2);
        for (std::int64_t rix = 0; rix < rows; ++rix)
            for (int j = 0; j < W; ++j) {
                const std::int64_t o = (rix * W + j) * 2;
                if (cols[static_cast<size_t>(j)]) {
                    out[o] = x[o];
                    out[o + 1] = x[o + 1];
                }
            }
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, W, rows, cols = std::move(cols)](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (std::int64_t rix = 0; rix < rows; ++rix)
                    for (int j = 0; j < W; ++j)
                        if (cols[static_cast<size_t>(j)]) {
                            const std::int64_t o = (rix * W + j) * 2;
                            (*ga)[o] += go[o];
                            (*ga)[o + 1] += go[o + 1];
                        }
            }
        });
        return id;
    }

    // ---- layout helpers ---------------------------------------------------

    // [H,W,2] -> [2,H,W]
    int complex_to_channels(int a) {
        const Tensor<T>& x = val(a);
        if (x.ndim() != 3 || x.dim(2) != 2) throw shape_error("complex_to_channels: expected [H,W,2]");
        const int H = x.dim(0), W = x.dim(1);
        Tensor<T> out(Shape{2, H, W});
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                out[static_cast<std::int64_t>(i) * W + j] = x[(static_cast<std::int64_t>(i) * W + j) * 2];
                out[static_cast<std::int64_t>(H) * W + i * W + j] = x[(static_cast<std::int64_t>(i) * W + j) * 2 + 1];
            }
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, H, W](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        (*ga)[(static_cast<std::int64_t>(i) * W + j) * 2] += go[static_cast<std::int64_t>(i) * W + j];
                        (*ga)[(static_cast<std::int64_t>(i) * W + j) * 2 + 1] +=
                            go[static_cast<std::int64_t>(H) * W + i * W + j];
                    }
            }
        });
        return id;
    }

    // [2,H,W] -> [H,W,2]
    int channels_to_complex(int a) {
        const Tensor<T>& x = val(a);
        if (x.ndim() != 3 || x.dim(0) != 2) throw shape_error("channels_to_complex: expected [2,H,W]");
        const int H = x.dim(1), W = x.dim(2);
        Tensor<T> out(Shape{H, W, 2});
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                out[(static_cast<std::int64_t>(i) * W + j) * 2] = x[static_cast<std::int64_t>(i) * W + j];
                out[(static_cast<std::int64_t>(i) * W + j) * 2 + 1] = x[static_cast<std::int64_t>(H) * W + i * W + j];
            }
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, H, W](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        (*ga)[static_cast<std::int64_t>(i) * W + j] += go[(static_cast<std::int64_t>(i) * W + j) * 2];
                        (*ga)[static_cast<std::int64_t>(H) * W + i * W + j] +=
                            go[(static_cast<std::int64_t>(i) * W + j) * 2 + 1];
                    }
            }
        });
        return id;
    }

    // [N, rest...] -> [rest...] at coil index i
    int slice_coil(int a, int coil) {
        const Tensor<T>& x = val(a);
        if (x.ndim() < 2) throw shape_error("slice_coil: need rank >= 2");
        const int n = x.dim(0);
        if (coil < 0 || coil >= n) throw shape_error("slice_coil: index out of range");
        Shape rest(x.shape.begin() + 1, x.shape.end());
        Tensor<T> out(rest);
        const std::int64_t block = out.numel();
        std::copy(x.data.begin() + coil * block, x.data.begin() + (coil + 1) * block, out.data.begin());
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, coil, block](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (std::int64_t i = 0; i < block; ++i) (*ga)[coil * block + i] += go[i];
            }
        });
        return id;
    }

    int stack_coils(const std::vector<int>& parts) {
        if (parts.empty()) throw shape_error("stack_coils: empty list");
        const Shape& rest = val(parts[0]).shape;
        for (int p : parts) check_same_shape(val(p), val(parts[0]), "stack_coils");
        Shape os;
        os.push_back(static_cast<int>(parts.size()));
        os.insert(os.end(), rest.begin(), rest.end());
        Tensor<T> out(os);
        const std::int64_t block = val(parts[0]).numel();
        for (size_t i = 0; i < parts.size(); ++i)
            std::copy(val(parts[i]).data.begin(), val(parts[i]).data.end(),
                      out.data.begin() + static_cast<std::int64_t>(i) * block);
        const int id = make_node(std::move(out), parts, nullptr);
        set_backward(id, [id, parts, block](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            for (size_t i = 0; i < parts.size(); ++i)
                if (auto* gp = g.grad_ref(parts[i]))
                    for (std::int64_t j = 0; j < block; ++j)
                        (*gp)[j] += go[static_cast<std::int64_t>(i) * block + j];
        });
        return id;
    }

    // ---- box filter (uniform local mean, valid padding) ----------------------

    int box_filter(int a, int window) {
        const Tensor<T>& x = val(a);
        if (x.ndim() != 2) throw shape_error("box_filter: expected [H,W]");
        const int H = x.dim(0), W = x.dim(1);
        if (window <= 0 || window > std::min(H, W))
            throw shape_error("box_filter: window must be in [1, min(H,W)]");
        const int Ho = H - window + 1, Wo = W - window + 1;
        const T inv = T(1) / static_cast<T>(window * window);
        Tensor<T> out(Shape{Ho, Wo});
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                T acc = T(0);
                for (int dy = 0; dy < window; ++dy) {
                    const T* row = x.ptr() + static_cast<std::int64_t>(i + dy) * W + j;
                    for (int dx = 0; dx < window; ++dx) acc += row[dx];
                }
                out[static_cast<std::int64_t>(i) * Wo + j] = acc * inv;
            }
        const int id = make_node(std::move(out), {a}, nullptr);
        set_backward(id, [id, a, H, W, Ho, Wo, window, inv](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                const Tensor<T>& go = g.grad(id);
                for (int i = 0; i < Ho; ++i)
                    for (int j = 0; j < Wo; ++j) {
                        const T v = go[static_cast<std::int64_t>(i) * Wo + j] * inv;
                        for (int dy = 0; dy < window; ++dy) {
                            T* row = ga->ptr() + static_cast<std::int64_t>(i + dy) * W + j;
                            for (int dx = 0; dx < window; ++dx) row[dx] += v;
                        }
                    }
            }
        });
        return id;
    }

private:
    void set_backward(int id, BackwardFn fn) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.requires_grad) n.backward = std::move(fn);
    }

    int fft_node(int a, bool inverse) {
        Tensor<T> out = fft2c_raw(val(a), inverse);
        const int id = make_node(std::move(out), {a}, nullptr);
        // orthonormal DFT: the adjoint is the inverse transform
        set_backward(id, [id, a, inverse](Graph& g) {
            if (auto* ga = g.grad_ref(a)) {
                Tensor<T> gi = fft2c_raw(g.grad(id), !inverse);
                for (std::int64_t i = 0; i < gi.numel(); ++i) (*ga)[i] += gi[i];
            }
        });
        return id;
    }

    int complex_binary(int a, int b, bool conj_a) {
        const Tensor<T>& xa = val(a);
        const Tensor<T>& xb = val(b);
        check_complex(xa, conj_a ? "complex_conj_mul" : "complex_mul");
        check_complex(xb, conj_a ? "complex_conj_mul" : "complex_mul");
        Shape la(xa.shape.begin(), xa.shape.end() - 1);
        Shape lb(xb.shape.begin(), xb.shape.end() - 1);
        auto plan = detail::broadcast_plan(la, lb, "complex_mul");
        Shape os = plan.out;
        os.push_back(2);
        Tensor<T> out(os);
        detail::bcast_for_each(plan, [&](std::int64_t fo, std::int64_t fa, std::int64_t fb) {
            const T ar = xa[fa * 2], ai0 = xa[fa * 2 + 1];
            const T ai = conj_a ? -ai0 : ai0;
            const T br = xb[fb * 2], bi = xb[fb * 2 + 1];
            out[fo * 2] = ar * br - ai * bi;
            out[fo * 2 + 1] = ar * bi + ai * br;
        });
        const int id = make_node(std::move(out), {a, b}, nullptr);
        set_backward(id, [id, a, b, plan, conj_a](Graph& g) {
            const Tensor<T>& go = g.grad(id);
            const Tensor<T>& xa = g.val(a);
            const Tensor<T>& xb = g.val(b);
            Tensor<T>* ga = g.grad_ref(a);
            Tensor<T>* gb = g.grad_ref(b);
            detail::bcast_for_each(plan, [&](std::int64_t fo, std::int64_t fa, std::int64_t fb) {
                const T gr = go[fo * 2], gi = go[fo * 2 + 1];
                const T br = xb[fb * 2], bi = xb[fb * 2 + 1];
                const T ar = xa[fa * 2], ai = xa[fa * 2 + 1];
                if (!conj_a) {
                    // out = a*b: d_a = conj(b)*g, d_b = conj(a)*g
                    if (ga) {
                        (*ga)[fa * 2] += br * gr + bi * gi;
                        (*ga)[fa * 2 + 1] += br * gi - bi * gr;
                    }
                    if (gb) {
                        (*gb)[fb * 2] += ar * gr + ai * gi;
                        (*gb)[fb * 2 + 1] += ar * gi - ai * gr;
                    }
                } else {
                    // out = conj(a)*b: d_a = conj(g)*b, d_b = a*g
                    if (ga) {
                        (*ga)[fa * 2] += gr * br + gi * bi;
                        (*ga)[fa * 2 + 1] += gr * bi - gi * br;
                    }
                    if (gb) {
                        (*gb)[fb * 2] += ar * gr - ai * gi;
                        (*gb)[fb * 2 + 1] += ar * gi + ai * gr;
                    }
                }
            });
        });
        return id;
    }

    std::vector<Node> nodes_;
    Rng rng_;
};

}  // namespace npbrec
