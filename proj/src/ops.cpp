#include "utrack/ops.hpp"

#include <algorithm>
#include <cmath>

#include "utrack/error.hpp"

namespace utrack {

Array matmul(const Array& a, const Array& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: expects 2-D operands, got " + a.shape_str() + " and " + b.shape_str());
    }
    if (a.extent(1) != b.extent(0)) {
        throw ShapeError("matmul: inner extents differ: " + a.shape_str() + " x " + b.shape_str());
    }
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Array out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            if (av == 0.0) continue;
            const double* brow = b.data().data() + p * n;
            double* orow = out.data().data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Array transpose2d(const Array& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expects 2-D operand, got " + a.shape_str());
    const std::size_t m = a.extent(0), n = a.extent(1);
    Array out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

namespace {

struct AxisIter {
    std::size_t outer, extent, inner;
};

AxisIter axis_iter(const Array& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + x.shape_str());
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
    return {outer, x.extent(axis), inner};
}

// Flat index into a mask broadcast against x (extent 1 broadcasts).
std::size_t mask_index(const Array& mask, const Array& x, std::size_t flat) {
    std::size_t idx = 0;
    std::size_t rem = flat;
    std::size_t stride = 1;
    // Recover multi-index of x, fold into mask with broadcast strides.
    std::vector<std::size_t> coords(x.rank());
    for (std::size_t i = x.rank(); i-- > 0;) {
        coords[i] = rem % x.extent(i);
        rem /= x.extent(i);
    }
    for (std::size_t i = mask.rank(); i-- > 0;) {
        const std::size_t c = mask.extent(i) == 1 ? 0 : coords[i];
        idx += c * stride;
        stride *= mask.extent(i);
    }
    return idx;
}

}  // namespace

Array masked_softmax(const Array& x, std::size_t axis, const Array* mask) {
    if (mask) {
        if (mask->rank() != x.rank()) {
            throw ShapeError("masked_softmax: mask rank " + mask->shape_str() +
                             " does not match input " + x.shape_str());
        }
        for (std::size_t i = 0; i < x.rank(); ++i) {
            if (mask->extent(i) != 1 && mask->extent(i) != x.extent(i)) {
                throw ShapeError("masked_softmax: mask " + mask->shape_str() +
                                 " not broadcastable to " + x.shape_str());
            }
        }
    }
    const AxisIter it = axis_iter(x, axis);
    Array out(x.shape());
    for (std::size_t o = 0; o < it.outer; ++o) {
        for (std::size_t in = 0; in < it.inner; ++in) {
            const auto flat = [&](std::size_t e) { return (o * it.extent + e) * it.inner + in; };
            double mx = kMaskedOut;
            bool any_live = false;
            for (std::size_t e = 0; e < it.extent; ++e) {
                const std::size_t f = flat(e);
                const bool dead = mask && (*mask)[mask_index(*mask, x, f)] == kMaskedOut;
                if (dead) continue;
                any_live = true;
                mx = std::max(mx, x[f]);
            }
            if (!any_live) {
                throw DomainError("masked_softmax: every position masked along axis " +
                                  std::to_string(axis));
            }
            double denom = 0.0;
            for (std::size_t e = 0; e < it.extent; ++e) {
                const std::size_t f = flat(e);
                const bool dead = mask && (*mask)[mask_index(*mask, x, f)] == kMaskedOut;
                if (dead) {
                    out[f] = 0.0;
                } else {
                    out[f] = std::exp(x[f] - mx);
                    denom += out[f];
                }
            }
            for (std::size_t e = 0; e < it.extent; ++e) {
                const std::size_t f = flat(e);
                if (out[f] != 0.0) out[f] /= denom;
            }
        }
    }
    return out;
}

Array conv2d(const Array& input, const Array& kernel, std::size_t stride, std::size_t pad) {
    if (input.rank() != 3 || kernel.rank() != 4) {
        throw ShapeError("conv2d: expects input [C x H x W] and kernel [Co x Ci x k x k], got " +
                         input.shape_str() + " and " + kernel.shape_str());
    }
    const std::size_t ci = input.extent(0), h = input.extent(1), w = input.extent(2);
    const std::size_t co = kernel.extent(0), kc = kernel.extent(1);
    const std::size_t kh = kernel.extent(2), kw = kernel.extent(3);
    if (kc != ci) {
        throw ShapeError("conv2d: kernel input channels " + kernel.shape_str() +
                         " do not match input " + input.shape_str());
    }
    if (kh != kw || kh % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd side");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (h + 2 * pad < kh || (h + 2 * pad - kh) % stride != 0 ||
        w + 2 * pad < kw || (w + 2 * pad - kw) % stride != 0) {
        throw ShapeError("conv2d: non-integral output extent for input " + input.shape_str());
    }
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
    Array out({co, oh, ow});
    for (std::size_t c = 0; c < co; ++c) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (std::size_t ic = 0; ic < ci; ++ic) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                        if (iy < 0 || iy >= static_cast<long>(h)) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                            if (ix < 0 || ix >= static_cast<long>(w)) continue;
                            acc += input.at(ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                                   kernel[((c * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.at(c, oy, ox) = acc;
            }
        }
    }
    return out;
}

Array global_avg_pool(const Array& x) {
    if (x.rank() != 3) throw ShapeError("global_avg_pool: expects [C x H x W], got " + x.shape_str());
    const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
    Array out({c, 1, 1});
    for (std::size_t i = 0; i < c; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hw; ++j) acc += x[i * hw + j];
        out[i] = acc / static_cast<double>(hw);
    }
    return out;
}

Array bilinear_upsample(const Array& x, std::size_t factor) {
    if (x.rank() != 3) throw ShapeError("bilinear_upsample: expects [C x H x W], got " + x.shape_str());
    if (factor != 2 && factor != 4) {
        throw ConfigError("bilinear_upsample: unsupported factor " + std::to_string(factor));
    }
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t oh = h * factor, ow = w * factor;
    Array out({c, oh, ow});
    const double f = static_cast<double>(factor);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const double sy = std::clamp((static_cast<double>(oy) + 0.5) / f - 0.5, 0.0,
                                         static_cast<double>(h - 1));
            const std::size_t y0 = static_cast<std::size_t>(sy);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double fy = sy - static_cast<double>(y0);
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const double sx = std::clamp((static_cast<double>(ox) + 0.5) / f - 0.5, 0.0,
                                             static_cast<double>(w - 1));
                const std::size_t x0 = static_cast<std::size_t>(sx);
                const std::size_t x1 = std::min(x0 + 1, w - 1);
                const double fx = sx - static_cast<double>(x0);
                out.at(ch, oy, ox) = (1 - fy) * ((1 - fx) * x.at(ch, y0, x0) + fx * x.at(ch, y0, x1)) +
                                     fy * ((1 - fx) * x.at(ch, y1, x0) + fx * x.at(ch, y1, x1));
            }
        }
    }
    return out;
}

Array channel_affine(const Array& x, const Array& scale, const Array& shift) {
    if (x.rank() != 3) throw ShapeError("channel_affine: expects [C x H x W], got " + x.shape_str());
    const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
    if (scale.size() != c || shift.size() != c) {
        throw ShapeError("channel_affine: scale/shift must have one entry per channel");
    }
    Array out(x.shape());
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] = x[i * hw + j] * scale[i] + shift[i];
    return out;
}

Array layer_norm(const Array& x, const Array& gain, const Array& bias, double eps) {
    if (x.rank() != 2) throw ShapeError("layer_norm: expects [N x d], got " + x.shape_str());
    const std::size_t n = x.extent(0), d = x.extent(1);
    if (gain.size() != d || bias.size() != d) {
        throw ShapeError("layer_norm: gain/bias width must match token width");
    }
    Array out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            out.at(i, j) = (x.at(i, j) - mean) * inv * gain[j] + bias[j];
        }
    }
    return out;
}

double bilinear_sample(const Array& map2d, double x, double y) {
    if (map2d.rank() != 2) throw ShapeError("bilinear_sample: expects [H x W], got " + map2d.shape_str());
    const std::size_t h = map2d.extent(0), w = map2d.extent(1);
    const double cx = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const double cy = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const std::size_t x0 = std::min(static_cast<std::size_t>(cx), w >= 2 ? w - 2 : 0);
    const std::size_t y0 = std::min(static_cast<std::size_t>(cy), h >= 2 ? h - 2 : 0);
    const std::size_t x1 = std::min(x0 + 1, w - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fx = cx - static_cast<double>(x0);
    const double fy = cy - static_cast<double>(y0);
    return (1 - fy) * ((1 - fx) * map2d.at(y0, x0) + fx * map2d.at(y0, x1)) +
           fy * ((1 - fx) * map2d.at(y1, x0) + fx * map2d.at(y1, x1));
}

namespace {

void require_same_shape(const Array& a, const Array& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shapes differ: " + a.shape_str() + " vs " + b.shape_str());
    }
}

}  // namespace

Array ew_add(const Array& a, const Array& b) {
    require_same_shape(a, b, "add");
    Array out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Array ew_sub(const Array& a, const Array& b) {
    require_same_shape(a, b, "sub");
    Array out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Array ew_mul(const Array& a, const Array& b) {
    require_same_shape(a, b, "mul");
    Array out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

Array ew_div(const Array& a, const Array& b) {
    require_same_shape(a, b, "div");
    Array out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / b[i];
    return out;
}

Array ew_scale(const Array& a, double s) {
    Array out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
    return out;
}

Array ew_shift(const Array& a, double s) {
    Array out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + s;
    return out;
}

double reduce_sum(const Array& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
    return acc;
}

}  // namespace utrack
