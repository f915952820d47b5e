#pragma once

// The differentiable operations the denoising networks are assembled from.

#include <node/autograd/gemm.hpp>
#include <node/autograd/tensor.hpp>

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace node::ag {

namespace detail {

struct ConvGeometry {
    int channels = 0; // channels of the "image" side
    int height = 0;
    int width = 0;
    int kh = 0;
    int kw = 0;
    int stride = 1;
    int pad = 0;
    int out_h = 0;
    int out_w = 0;

    std::size_t col_rows() const { return static_cast<std::size_t>(channels) * kh * kw; }
    std::size_t col_cols() const { return static_cast<std::size_t>(out_h) * out_w; }
    bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
    const std::size_t cols = g.col_cols();
    for (int c = 0; c < g.channels; ++c) {
        const T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                T* row = col + ((static_cast<std::size_t>(c) * g.kh + ki) * g.kw + kj) * cols;
                for (int oh = 0; oh < g.out_h; ++oh) {
                    T* dst = row + static_cast<std::size_t>(oh) * g.out_w;
                    const int ih = oh * g.stride - g.pad + ki;
                    if (ih < 0 || ih >= g.height) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(ih) * g.width;
                    for (int ow = 0; ow < g.out_w; ++ow) {
                        const int iw = ow * g.stride - g.pad + kj;
                        dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
    const std::size_t cols = g.col_cols();
    for (int c = 0; c < g.channels; ++c) {
        T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const T* row = col + ((static_cast<std::size_t>(c) * g.kh + ki) * g.kw + kj) * cols;
                for (int oh = 0; oh < g.out_h; ++oh) {
                    const int ih = oh * g.stride - g.pad + ki;
                    if (ih < 0 || ih >= g.height) continue;
                    const T* src = row + static_cast<std::size_t>(oh) * g.out_w;
                    T* dst = plane + static_cast<std::size_t>(ih) * g.width;
                    for (int ow = 0; ow < g.out_w; ++ow) {
                        const int iw = ow * g.stride - g.pad + kj;
                        if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

// Conv image-side geometry -> conv output dims.
inline ConvGeometry conv_geometry(int channels, int h, int w, int kh, int kw, int stride, int pad) {
    ConvGeometry g{channels, h, w, kh, kw, stride, pad, 0, 0};
    require(stride >= 1 && pad >= 0, "convolution stride must be >= 1 and padding >= 0");
    require(h + 2 * pad >= kh && w + 2 * pad >= kw, "convolution kernel larger than padded input");
    g.out_h = (h + 2 * pad - kh) / stride + 1;
    g.out_w = (w + 2 * pad - kw) / stride + 1;
    return g;
}

// y = W * col(x) per sample, W as [out_c x col_rows].
template <class T>
void conv_forward(const T* x, const T* w, int n, int out_c, const ConvGeometry& g, T* y, std::vector<T>& col) {
    const std::size_t in_sz = static_cast<std::size_t>(g.channels) * g.height * g.width;
    const std::size_t out_sz = static_cast<std::size_t>(out_c) * g.col_cols();
    for (int b = 0; b < n; ++b) {
        const T* xb = x + b * in_sz;
        const T* cb = xb;
        if (!g.is_pointwise()) {
            col.resize(g.col_rows() * g.col_cols());
            im2col(xb, g, col.data());
            cb = col.data();
        }
        gemm::nn(static_cast<std::size_t>(out_c), g.col_cols(), g.col_rows(), w, cb, y + b * out_sz);
    }
}

// img += col2im(W^T * y) per sample: the adjoint of conv_forward in x.
template <class T>
void conv_adjoint(const T* y, const T* w, int n, int out_c, const ConvGeometry& g, T* x, std::vector<T>& col) {
    const std::size_t in_sz = static_cast<std::size_t>(g.channels) * g.height * g.width;
    const std::size_t out_sz = static_cast<std::size_t>(out_c) * g.col_cols();
    for (int b = 0; b < n; ++b) {
        if (g.is_pointwise()) {
            gemm::tn(g.col_rows(), g.col_cols(), static_cast<std::size_t>(out_c), w, y + b * out_sz, x + b * in_sz);
            continue;
        }
        col.assign(g.col_rows() * g.col_cols(), T(0));
        gemm::tn(g.col_rows(), g.col_cols(), static_cast<std::size_t>(out_c), w, y + b * out_sz, col.data());
        col2im_add(col.data(), g, x + b * in_sz);
    }
}

// dW += y * col(x)^T summed over the batch.
template <class T>
void conv_weight_grad(const T* x, const T* y, int n, int out_c, const ConvGeometry& g, T* dw, std::vector<T>& col,
                      std::vector<T>& scratch) {
    const std::size_t in_sz = static_cast<std::size_t>(g.channels) * g.height * g.width;
    const std::size_t out_sz = static_cast<std::size_t>(out_c) * g.col_cols();
    for (int b = 0; b < n; ++b) {
        const T* xb = x + b * in_sz;
        const T* cb = xb;
        if (!g.is_pointwise()) {
            col.resize(g.col_rows() * g.col_cols());
            im2col(xb, g, col.data());
            cb = col.data();
        }
        gemm::nt(static_cast<std::size_t>(out_c), g.col_rows(), g.col_cols(), y + b * out_sz, cb, dw, scratch);
    }
}

template <class T>
void add_bias(T* y, const T* bias, int n, int c, std::size_t plane) {
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k) {
            T* p = y + (static_cast<std::size_t>(b) * c + k) * plane;
            for (std::size_t i = 0; i < plane; ++i) p[i] += bias[k];
        }
}

template <class T>
void bias_grad(const T* gy, T* gb, int n, int c, std::size_t plane) {
    for (int k = 0; k < c; ++k) {
        T acc = T(0);
        for (int b = 0; b < n; ++b) {
            const T* p = gy + (static_cast<std::size_t>(b) * c + k) * plane;
            for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        }
        gb[k] += acc;
    }
}

} // namespace detail

struct ConvOptions {
    int stride = 1;
    int padding = 0;
};

// Cross-correlation. x: (N, C, H, W), w: (OC, C, KH, KW), b: (1, OC, 1, 1) or
// undefined. Zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, ConvOptions opt = {}) {
    const Shape xs = x.shape(), ws = w.shape();
    detail::require(ws.c == xs.c, "conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " + std::to_string(xs.c));
    const bool has_bias = b.defined();
    if (has_bias) detail::require(b.size() == static_cast<std::size_t>(ws.n), "conv2d: bias length must equal output channels");
    const auto g = detail::conv_geometry(xs.c, xs.h, xs.w, ws.h, ws.w, opt.stride, opt.padding);
    const Shape ys{xs.n, ws.n, g.out_h, g.out_w};
    std::vector<Tensor<T>> inputs{x, w};
    if (has_bias) inputs.push_back(b);
    return make_op<T>(
        "conv2d", ys, std::move(inputs),
        [g, has_bias](Node<T>& out) {
            std::vector<T> col;
            std::fill(out.data.begin(), out.data.end(), T(0));
            detail::conv_forward(out.inputs[0]->data.data(), out.inputs[1]->data.data(), out.shape.n, out.shape.c, g,
                                 out.data.data(), col);
            if (has_bias) detail::add_bias(out.data.data(), out.inputs[2]->data.data(), out.shape.n, out.shape.c, out.shape.plane());
        },
        [g, has_bias](Node<T>& out) {
            std::vector<T> col, scratch;
            auto& xin = *out.inputs[0];
            auto& win = *out.inputs[1];
            if (xin.requires_grad)
                detail::conv_adjoint(out.grad.data(), win.data.data(), out.shape.n, out.shape.c, g, xin.ensure_grad().data(), col);
            if (win.requires_grad)
                detail::conv_weight_grad(xin.data.data(), out.grad.data(), out.shape.n, out.shape.c, g,
                                         win.ensure_grad().data(), col, scratch);
            if (has_bias && out.inputs[2]->requires_grad)
                detail::bias_grad(out.grad.data(), out.inputs[2]->ensure_grad().data(), out.shape.n, out.shape.c, out.shape.plane());
        });
}

// Transposed convolution: the adjoint of conv2d in its input for the same
// weights, stride and padding. x: (N, C, H, W), w: (C, OC, KH, KW).
// Output spatial size (H - 1) * stride - 2 * padding + KH.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, ConvOptions opt = {}) {
    const Shape xs = x.shape(), ws = w.shape();
    detail::require(ws.n == xs.c, "conv_transpose2d: weight expects " + std::to_string(ws.n) + " input channels, got " +
                                      std::to_string(xs.c));
    const bool has_bias = b.defined();
    if (has_bias) detail::require(b.size() == static_cast<std::size_t>(ws.c), "conv_transpose2d: bias length must equal output channels");
    const int oh = (xs.h - 1) * opt.stride - 2 * opt.padding + ws.h;
    const int ow = (xs.w - 1) * opt.stride - 2 * opt.padding + ws.w;
    detail::require(oh > 0 && ow > 0, "conv_transpose2d: non-positive output size");
    // Geometry of the conv2d this op is the adjoint of: image side is the
    // transposed conv's output.
    const auto g = detail::conv_geometry(ws.c, oh, ow, ws.h, ws.w, opt.stride, opt.padding);
    detail::require(g.out_h == xs.h && g.out_w == xs.w, "conv_transpose2d: inconsistent geometry");
    const Shape ys{xs.n, ws.c, oh, ow};
    std::vector<Tensor<T>> inputs{x, w};
    if (has_bias) inputs.push_back(b);
    return make_op<T>(
        "conv_transpose2d", ys, std::move(inputs),
        [g, has_bias](Node<T>& out) {
            std::vector<T> col;
            std::fill(out.data.begin(), out.data.end(), T(0));
            const auto& xin = *out.inputs[0];
            detail::conv_adjoint(xin.data.data(), out.inputs[1]->data.data(), out.shape.n, xin.shape.c, g, out.data.data(), col);
            if (has_bias) detail::add_bias(out.data.data(), out.inputs[2]->data.data(), out.shape.n, out.shape.c, out.shape.plane());
        },
        [g, has_bias](Node<T>& out) {
            std::vector<T> col, scratch;
            auto& xin = *out.inputs[0];
            auto& win = *out.inputs[1];
            if (xin.requires_grad)
                detail::conv_forward(out.grad.data(), win.data.data(), out.shape.n, xin.shape.c, g, xin.ensure_grad().data(), col);
            if (win.requires_grad)
                detail::conv_weight_grad(out.grad.data(), xin.data.data(), out.shape.n, xin.shape.c, g,
                                         win.ensure_grad().data(), col, scratch);
            if (has_bias && out.inputs[2]->requires_grad)
                detail::bias_grad(out.grad.data(), out.inputs[2]->ensure_grad().data(), out.shape.n, out.shape.c, out.shape.plane());
        });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
    if (!(slope >= 0.0 && slope < 1.0)) throw ShapeError("leaky_relu slope must lie in [0, 1)");
    const T s = static_cast<T>(slope);
    return make_op<T>(
        "leaky_relu", x.shape(), {x},
        [s](Node<T>& out) {
            const auto& in = out.inputs[0]->data;
            for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in[i] > T(0) ? in[i] : s * in[i];
        },
        [s](Node<T>& out) {
            auto& in = *out.inputs[0];
            auto& g = in.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += in.data[i] > T(0) ? out.grad[i] : s * out.grad[i];
        });
}

// Window maximum. The gradient goes to the first maximum in row-major scan
// order of the window.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k = 2, int stride = 2) {
    const Shape xs = x.shape();
    detail::require(k >= 1 && stride >= 1, "maxpool2d: kernel and stride must be positive");
    detail::require(xs.h % stride == 0 && xs.w % stride == 0 && xs.h >= k && xs.w >= k,
                    "maxpool2d: spatial dims " + xs.str() + " not divisible by stride " + std::to_string(stride));
    const Shape ys{xs.n, xs.c, (xs.h - k) / stride + 1, (xs.w - k) / stride + 1};
    auto argmax = std::make_shared<std::vector<std::size_t>>(ys.size());
    return make_op<T>(
        "maxpool2d", ys, {x},
        [k, stride, argmax](Node<T>& out) {
            const auto& in = *out.inputs[0];
            const int H = in.shape.h, W = in.shape.w;
            std::size_t o = 0;
            for (int nc = 0; nc < out.shape.n * out.shape.c; ++nc) {
                const std::size_t base = static_cast<std::size_t>(nc) * H * W;
                for (int oh = 0; oh < out.shape.h; ++oh) {
                    for (int ow = 0; ow < out.shape.w; ++ow, ++o) {
                        std::size_t best = base + static_cast<std::size_t>(oh * stride) * W + ow * stride;
                        for (int i = 0; i < k; ++i) {
                            for (int j = 0; j < k; ++j) {
                                const std::size_t idx = base + static_cast<std::size_t>(oh * stride + i) * W + ow * stride + j;
                                if (in.data[idx] > in.data[best]) best = idx;
                            }
                        }
                        (*argmax)[o] = best;
                        out.data[o] = in.data[best];
                    }
                }
            }
        },
        [argmax](Node<T>& out) {
            auto& g = out.inputs[0]->ensure_grad();
            for (std::size_t o = 0; o < out.grad.size(); ++o) g[(*argmax)[o]] += out.grad[o];
        });
}

namespace detail {

// Index of the depth-side element for space-side (c, h, w): channel
// c * b^2 + (h % b) * b + (w % b) at (h / b, w / b).
template <class Fn>
void for_each_space_depth(const Shape& space, int block, Fn&& fn) {
    const int oh = space.h / block, ow = space.w / block, oc = space.c * block * block;
    for (int n = 0; n < space.n; ++n)
        for (int c = 0; c < space.c; ++c)
            for (int h = 0; h < space.h; ++h)
                for (int w = 0; w < space.w; ++w) {
                    const std::size_t s = ((static_cast<std::size_t>(n) * space.c + c) * space.h + h) * space.w + w;
                    const int dc = c * block * block + (h % block) * block + (w % block);
                    const std::size_t d = ((static_cast<std::size_t>(n) * oc + dc) * oh + h / block) * ow + w / block;
                    fn(s, d);
                }
}

} // namespace detail

template <class T>
Tensor<T> space_to_depth(const Tensor<T>& x, int block = 2) {
    const Shape xs = x.shape();
    detail::require(block >= 1 && xs.h % block == 0 && xs.w % block == 0,
                    "space_to_depth: spatial dims " + xs.str() + " not divisible by " + std::to_string(block));
    const Shape ys{xs.n, xs.c * block * block, xs.h / block, xs.w / block};
    return make_op<T>(
        "space_to_depth", ys, {x},
        [block](Node<T>& out) {
            const auto& in = *out.inputs[0];
            detail::for_each_space_depth(in.shape, block, [&](std::size_t s, std::size_t d) { out.data[d] = in.data[s]; });
        },
        [block](Node<T>& out) {
            auto& in = *out.inputs[0];
            auto& g = in.ensure_grad();
            detail::for_each_space_depth(in.shape, block, [&](std::size_t s, std::size_t d) { g[s] += out.grad[d]; });
        });
}

template <class T>
Tensor<T> depth_to_space(const Tensor<T>& x, int block = 2) {
    const Shape xs = x.shape();
    detail::require(block >= 1 && xs.c % (block * block) == 0,
                    "depth_to_space: channels " + std::to_string(xs.c) + " not divisible by " + std::to_string(block * block));
    const Shape ys{xs.n, xs.c / (block * block), xs.h * block, xs.w * block};
    return make_op<T>(
        "depth_to_space", ys, {x},
        [block](Node<T>& out) {
            const auto& in = *out.inputs[0];
            detail::for_each_space_depth(out.shape, block, [&](std::size_t s, std::size_t d) { out.data[s] = in.data[d]; });
        },
        [block](Node<T>& out) {
            auto& g = out.inputs[0]->ensure_grad();
            detail::for_each_space_depth(out.shape, block, [&](std::size_t s, std::size_t d) { g[d] += out.grad[s]; });
        });
}

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
    detail::require(!xs.empty(), "concat_channels: no inputs");
    Shape ys = xs.front().shape();
    ys.c = 0;
    for (const auto& t : xs) {
        const Shape s = t.shape();
        detail::require(s.n == ys.n && s.h == ys.h && s.w == ys.w,
                        "concat_channels: mismatched dims " + s.str() + " vs " + xs.front().shape().str());
        ys.c += s.c;
    }
    return make_op<T>(
        "concat_channels", ys, xs,
        [](Node<T>& out) {
            const std::size_t plane = out.shape.plane();
            for (int n = 0; n < out.shape.n; ++n) {
                T* dst = out.data.data() + static_cast<std::size_t>(n) * out.shape.c * plane;
                for (const auto& in : out.inputs) {
                    const std::size_t len = static_cast<std::size_t>(in->shape.c) * plane;
                    const T* src = in->data.data() + static_cast<std::size_t>(n) * len;
                    dst = std::copy(src, src + len, dst);
                }
            }
        },
        [](Node<T>& out) {
            const std::size_t plane = out.shape.plane();
            for (int n = 0; n < out.shape.n; ++n) {
                const T* src = out.grad.data() + static_cast<std::size_t>(n) * out.shape.c * plane;
                for (const auto& in : out.inputs) {
                    const std::size_t len = static_cast<std::size_t>(in->shape.c) * plane;
                    if (in->requires_grad) {
                        T* g = in->ensure_grad().data() + static_cast<std::size_t>(n) * len;
                        for (std::size_t i = 0; i < len; ++i) g[i] += src[i];
                    }
                    src += len;
                }
            }
        });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    return make_op<T>(
        "add", a.shape(), {a, b},
        [](Node<T>& out) {
            const auto &x = out.inputs[0]->data, &y = out.inputs[1]->data;
            for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] + y[i];
        },
        [](Node<T>& out) {
            for (auto& in : out.inputs) {
                if (!in->requires_grad) continue;
                auto& g = in->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
            }
        });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    return make_op<T>(
        "sub", a.shape(), {a, b},
        [](Node<T>& out) {
            const auto &x = out.inputs[0]->data, &y = out.inputs[1]->data;
            for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] - y[i];
        },
        [](Node<T>& out) {
            if (out.inputs[0]->requires_grad) {
                auto& g = out.inputs[0]->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
            }
            if (out.inputs[1]->requires_grad) {
                auto& g = out.inputs[1]->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
            }
        });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
    const T f = static_cast<T>(factor);
    return make_op<T>(
        "scale", a.shape(), {a},
        [f](Node<T>& out) {
            const auto& x = out.inputs[0]->data;
            for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f * x[i];
        },
        [f](Node<T>& out) {
            auto& g = out.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * out.grad[i];
        });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    return make_op<T>(
        "sum", Shape{1, 1, 1, 1}, {a},
        [](Node<T>& out) {
            const auto& x = out.inputs[0]->data;
            out.data[0] = std::accumulate(x.begin(), x.end(), T(0));
        },
        [](Node<T>& out) {
            auto& g = out.inputs[0]->ensure_grad();
            for (auto& v : g) v += out.grad[0];
        });
}

// Mean absolute error; d/dpred = sign(pred - target) / N with sign(0) = 0.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require(pred.shape() == target.shape(), "l1_loss: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
    return make_op<T>(
        "l1_loss", Shape{1, 1, 1, 1}, {pred, target},
        [](Node<T>& out) {
            const auto &p = out.inputs[0]->data, &t = out.inputs[1]->data;
            double acc = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) acc += std::fabs(static_cast<double>(p[i]) - static_cast<double>(t[i]));
            out.data[0] = static_cast<T>(acc / static_cast<double>(p.size()));
        },
        [](Node<T>& out) {
            const auto &p = out.inputs[0]->data, &t = out.inputs[1]->data;
            const T scale = out.grad[0] / static_cast<T>(p.size());
            const auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
            if (out.inputs[0]->requires_grad) {
                auto& g = out.inputs[0]->ensure_grad();
                for (std::size_t i = 0; i < p.size(); ++i) g[i] += scale * sign(p[i] - t[i]);
            }
            if (out.inputs[1]->requires_grad) {
                auto& g = out.inputs[1]->ensure_grad();
                for (std::size_t i = 0; i < p.size(); ++i) g[i] -= scale * sign(p[i] - t[i]);
            }
        });
}

} // namespace node::ag
