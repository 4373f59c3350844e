#include "utrack/ad.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "utrack/error.hpp"

namespace utrack::ad {

namespace {

using Inputs = Tape::Inputs;

Array eval(const Tape::ForwardFn& f, std::initializer_list<const Array*> in) {
    return f(Inputs(in));
}

Var record1(Tape& t, const char* op, Var a, Tape::ForwardFn fwd, Tape::BackwardFn bwd) {
    Array out = eval(fwd, {&t.value(a)});
    return t.record(op, {a}, std::move(out), std::move(fwd), std::move(bwd));
}

Var record2(Tape& t, const char* op, Var a, Var b, Tape::ForwardFn fwd, Tape::BackwardFn bwd) {
    Array out = eval(fwd, {&t.value(a), &t.value(b)});
    return t.record(op, {a, b}, std::move(out), std::move(fwd), std::move(bwd));
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
    return record2(
        t, "add", a, b, [](const Inputs& in) { return ew_add(*in[0], *in[1]); },
        [](const Array& g, const Inputs&, const Array&) { return std::vector<Array>{g, g}; });
}

Var sub(Tape& t, Var a, Var b) {
    return record2(
        t, "sub", a, b, [](const Inputs& in) { return ew_sub(*in[0], *in[1]); },
        [](const Array& g, const Inputs&, const Array&) {
            return std::vector<Array>{g, ew_scale(g, -1.0)};
        });
}

Var mul(Tape& t, Var a, Var b) {
    return record2(
        t, "mul", a, b, [](const Inputs& in) { return ew_mul(*in[0], *in[1]); },
        [](const Array& g, const Inputs& in, const Array&) {
            return std::vector<Array>{ew_mul(g, *in[1]), ew_mul(g, *in[0])};
        });
}

Var div_ew(Tape& t, Var a, Var b) {
    return record2(
        t, "div", a, b, [](const Inputs& in) { return ew_div(*in[0], *in[1]); },
        [](const Array& g, const Inputs& in, const Array& out) {
            Array da(g.shape()), db(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                da[i] = g[i] / (*in[1])[i];
                db[i] = -g[i] * out[i] / (*in[1])[i];
            }
            return std::vector<Array>{std::move(da), std::move(db)};
        });
}

Var min_ew(Tape& t, Var a, Var b) {
    return record2(
        t, "min", a, b,
        [](const Inputs& in) {
            Array out(in[0]->shape());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min((*in[0])[i], (*in[1])[i]);
            return out;
        },
        [](const Array& g, const Inputs& in, const Array&) {
            Array da(g.shape()), db(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                if ((*in[0])[i] <= (*in[1])[i]) da[i] = g[i];
                else db[i] = g[i];
            }
            return std::vector<Array>{std::move(da), std::move(db)};
        });
}

Var max_ew(Tape& t, Var a, Var b) {
    return record2(
        t, "max", a, b,
        [](const Inputs& in) {
            Array out(in[0]->shape());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max((*in[0])[i], (*in[1])[i]);
            return out;
        },
        [](const Array& g, const Inputs& in, const Array&) {
            Array da(g.shape()), db(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                if ((*in[0])[i] >= (*in[1])[i]) da[i] = g[i];
                else db[i] = g[i];
            }
            return std::vector<Array>{std::move(da), std::move(db)};
        });
}

Var atan2_ew(Tape& t, Var y, Var x) {
    return record2(
        t, "atan2", y, x,
        [](const Inputs& in) {
            Array out(in[0]->shape());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::atan2((*in[0])[i], (*in[1])[i]);
            return out;
        },
        [](const Array& g, const Inputs& in, const Array&) {
            Array dy(g.shape()), dx(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double a = (*in[0])[i], b = (*in[1])[i];
                const double d = a * a + b * b;
                if (d > 0.0) {
                    dy[i] = g[i] * b / d;
                    dx[i] = -g[i] * a / d;
                }
            }
            return std::vector<Array>{std::move(dy), std::move(dx)};
        });
}

Var add_scalar(Tape& t, Var a, double s) {
    return record1(
        t, "add_scalar", a, [s](const Inputs& in) { return ew_shift(*in[0], s); },
        [](const Array& g, const Inputs&, const Array&) { return std::vector<Array>{g}; });
}

Var mul_scalar(Tape& t, Var a, double s) {
    return record1(
        t, "mul_scalar", a, [s](const Inputs& in) { return ew_scale(*in[0], s); },
        [s](const Array& g, const Inputs&, const Array&) {
            return std::vector<Array>{ew_scale(g, s)};
        });
}

Var neg(Tape& t, Var a) { return mul_scalar(t, a, -1.0); }

namespace {

Var unary_map(Tape& t, const char* op, Var a, double (*f)(double), double (*df)(double x, double y)) {
    return record1(
        t, op,
        a,
        [f](const Inputs& in) {
            Array out(in[0]->shape());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = f((*in[0])[i]);
            return out;
        },
        [df](const Array& g, const Inputs& in, const Array& out) {
            Array d(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * df((*in[0])[i], out[i]);
            return std::vector<Array>{std::move(d)};
        });
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double stable_sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Var relu(Tape& t, Var a) {
    return unary_map(
        t, "relu", a, [](double x) { return x > 0 ? x : 0.0; },
        [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var softplus(Tape& t, Var a) {
    return unary_map(
        t, "softplus", a, [](double x) { return stable_softplus(x); },
        [](double x, double) { return stable_sigmoid(x); });
}

Var sigmoid(Tape& t, Var a) {
    return unary_map(
        t, "sigmoid", a, [](double x) { return stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

Var exp_ew(Tape& t, Var a) {
    return unary_map(
        t, "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log_ew(Tape& t, Var a) {
    return unary_map(
        t, "log", a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

Var sqrt_ew(Tape& t, Var a) {
    return unary_map(
        t, "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Var square(Tape& t, Var a) {
    return unary_map(
        t, "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs_ew(Tape& t, Var a) {
    return unary_map(
        t, "abs", a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var sum(Tape& t, Var a) {
    return record1(
        t, "sum", a, [](const Inputs& in) { return Array::scalar(reduce_sum(*in[0])); },
        [](const Array& g, const Inputs& in, const Array&) {
            return std::vector<Array>{Array(in[0]->shape(), g[0])};
        });
}

Var mean(Tape& t, Var a) {
    return record1(
        t, "mean", a,
        [](const Inputs& in) {
            return Array::scalar(reduce_sum(*in[0]) / static_cast<double>(in[0]->size()));
        },
        [](const Array& g, const Inputs& in, const Array&) {
            return std::vector<Array>{
                Array(in[0]->shape(), g[0] / static_cast<double>(in[0]->size()))};
        });
}

Var reshape(Tape& t, Var a, std::vector<std::size_t> shape) {
    if (shape_product(shape) != t.value(a).size()) {
        throw ShapeError("reshape: " + t.value(a).shape_str() + " to " + shape_str(shape));
    }
    auto fwd = [shape](const Inputs& in) { return Array(shape, in[0]->data()); };
    auto bwd = [](const Array& g, const Inputs& in, const Array&) {
        return std::vector<Array>{Array(in[0]->shape(), g.data())};
    };
    return record1(t, "reshape", a, std::move(fwd), std::move(bwd));
}

Var transpose(Tape& t, Var a) {
    return record1(
        t, "transpose", a, [](const Inputs& in) { return transpose2d(*in[0]); },
        [](const Array& g, const Inputs&, const Array&) {
            return std::vector<Array>{transpose2d(g)};
        });
}

namespace {

struct ConcatPlan {
    std::size_t outer = 1, inner = 1;
    std::vector<std::size_t> extents;  // along the axis, per part
    std::size_t total = 0;
};

ConcatPlan concat_plan(const std::vector<const Array*>& parts, std::size_t axis) {
    const Array& first = *parts[0];
    if (axis >= first.rank()) throw ShapeError("concat: axis out of range");
    ConcatPlan p;
    for (std::size_t i = 0; i < axis; ++i) p.outer *= first.extent(i);
    for (std::size_t i = axis + 1; i < first.rank(); ++i) p.inner *= first.extent(i);
    for (const Array* a : parts) {
        if (a->rank() != first.rank()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < first.rank(); ++i) {
            if (i != axis && a->extent(i) != first.extent(i)) {
                throw ShapeError("concat: extent mismatch: " + a->shape_str() + " vs " +
                                 first.shape_str());
            }
        }
        p.extents.push_back(a->extent(axis));
        p.total += a->extent(axis);
    }
    return p;
}

Array concat_forward(const std::vector<const Array*>& parts, std::size_t axis) {
    const ConcatPlan p = concat_plan(parts, axis);
    std::vector<std::size_t> shape = parts[0]->shape();
    shape[axis] = p.total;
    Array out(shape);
    for (std::size_t o = 0; o < p.outer; ++o) {
        std::size_t offset = 0;
        for (std::size_t q = 0; q < parts.size(); ++q) {
            const Array& src = *parts[q];
            const std::size_t block = p.extents[q] * p.inner;
            std::copy_n(src.data().data() + o * block, block,
                        out.data().data() + (o * p.total + offset) * p.inner);
            offset += p.extents[q];
        }
    }
    return out;
}

}  // namespace

Var concat(Tape& t, const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    std::vector<const Array*> vals;
    for (Var v : parts) vals.push_back(&t.value(v));
    Array out = concat_forward(vals, axis);
    auto fwd = [axis](const Inputs& in) {
        return concat_forward(std::vector<const Array*>(in.begin(), in.end()), axis);
    };
    auto bwd = [axis](const Array& g, const Inputs& in, const Array&) {
        const ConcatPlan p = concat_plan(std::vector<const Array*>(in.begin(), in.end()), axis);
        std::vector<Array> grads;
        grads.reserve(in.size());
        for (const Array* a : in) grads.emplace_back(a->shape());
        for (std::size_t o = 0; o < p.outer; ++o) {
            std::size_t offset = 0;
            for (std::size_t q = 0; q < in.size(); ++q) {
                const std::size_t block = p.extents[q] * p.inner;
                std::copy_n(g.data().data() + (o * p.total + offset) * p.inner, block,
                            grads[q].data().data() + o * block);
                offset += p.extents[q];
            }
        }
        return grads;
    };
    return t.record("concat", parts, std::move(out), std::move(fwd), std::move(bwd));
}

Var slice(Tape& t, Var a, std::size_t axis, std::size_t start, std::size_t len) {
    const Array& v = t.value(a);
    if (axis >= v.rank() || start + len > v.extent(axis) || len == 0) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") invalid for " + v.shape_str());
    }
    auto fwd = [axis, start, len](const Inputs& in) {
        const Array& src = *in[0];
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= src.extent(i);
        for (std::size_t i = axis + 1; i < src.rank(); ++i) inner *= src.extent(i);
        std::vector<std::size_t> shape = src.shape();
        shape[axis] = len;
        Array out(shape);
        const std::size_t e = src.extent(axis);
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(src.data().data() + (o * e + start) * inner, len * inner,
                        out.data().data() + o * len * inner);
        }
        return out;
    };
    auto bwd = [axis, start, len](const Array& g, const Inputs& in, const Array&) {
        const Array& src = *in[0];
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= src.extent(i);
        for (std::size_t i = axis + 1; i < src.rank(); ++i) inner *= src.extent(i);
        Array d(src.shape());
        const std::size_t e = src.extent(axis);
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(g.data().data() + o * len * inner, len * inner,
                        d.data().data() + (o * e + start) * inner);
        }
        return std::vector<Array>{std::move(d)};
    };
    return record1(t, "slice", a, std::move(fwd), std::move(bwd));
}

Var element(Tape& t, Var a, std::size_t flat_index) {
    if (flat_index >= t.value(a).size()) throw ShapeError("element: index out of range");
    auto fwd = [flat_index](const Inputs& in) { return Array::scalar((*in[0])[flat_index]); };
    auto bwd = [flat_index](const Array& g, const Inputs& in, const Array&) {
        Array d(in[0]->shape());
        d[flat_index] = g[0];
        return std::vector<Array>{std::move(d)};
    };
    return record1(t, "element", a, std::move(fwd), std::move(bwd));
}

Var matmul(Tape& t, Var a, Var b) {
    return record2(
        t, "matmul", a, b,
        [](const Inputs& in) { return utrack::matmul(*in[0], *in[1]); },
        [](const Array& g, const Inputs& in, const Array&) {
            return std::vector<Array>{utrack::matmul(g, transpose2d(*in[1])),
                                      utrack::matmul(transpose2d(*in[0]), g)};
        });
}

Var masked_softmax(Tape& t, Var x, std::size_t axis, const Array* mask) {
    auto mask_copy = mask ? std::make_shared<const Array>(*mask) : nullptr;
    auto fwd = [axis, mask_copy](const Inputs& in) {
        return utrack::masked_softmax(*in[0], axis, mask_copy ? mask_copy.get() : nullptr);
    };
    auto bwd = [axis](const Array& g, const Inputs& in, const Array& y) {
        // dx = y * (g - sum(g*y)) per slice; masked entries have y == 0.
        std::size_t outer = 1, inner = 1;
        const Array& xin = *in[0];
        for (std::size_t i = 0; i < axis; ++i) outer *= xin.extent(i);
        for (std::size_t i = axis + 1; i < xin.rank(); ++i) inner *= xin.extent(i);
        const std::size_t e = xin.extent(axis);
        Array d(xin.shape());
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                double dot = 0.0;
                for (std::size_t k = 0; k < e; ++k) {
                    const std::size_t f = (o * e + k) * inner + i;
                    dot += g[f] * y[f];
                }
                for (std::size_t k = 0; k < e; ++k) {
                    const std::size_t f = (o * e + k) * inner + i;
                    d[f] = y[f] * (g[f] - dot);
                }
            }
        }
        return std::vector<Array>{std::move(d)};
    };
    return record1(t, "masked_softmax", x, std::move(fwd), std::move(bwd));
}

Var conv2d(Tape& t, Var input, Var kernel, std::size_t stride, std::size_t pad) {
    auto fwd = [stride, pad](const Inputs& in) {
        return utrack::conv2d(*in[0], *in[1], stride, pad);
    };
    auto bwd = [stride, pad](const Array& g, const Inputs& in, const Array&) {
        const Array& x = *in[0];
        const Array& k = *in[1];
        const std::size_t ci = x.extent(0), h = x.extent(1), w = x.extent(2);
        const std::size_t co = k.extent(0), kh = k.extent(2), kw = k.extent(3);
        const std::size_t oh = g.extent(1), ow = g.extent(2);
        Array dx(x.shape()), dk(k.shape());
        for (std::size_t c = 0; c < co; ++c) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    const double gv = g.at(c, oy, ox);
                    if (gv == 0.0) continue;
                    for (std::size_t ic = 0; ic < ci; ++ic) {
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long ix =
                                    static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                const std::size_t kidx = ((c * ci + ic) * kh + ky) * kw + kx;
                                dx.at(ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) +=
                                    gv * k[kidx];
                                dk[kidx] +=
                                    gv * x.at(ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                            }
                        }
                    }
                }
            }
        }
        return std::vector<Array>{std::move(dx), std::move(dk)};
    };
    return record2(t, "conv2d", input, kernel, std::move(fwd), std::move(bwd));
}

Var channel_affine(Tape& t, Var x, Var scale, Var shift) {
    auto fwd = [](const Inputs& in) { return utrack::channel_affine(*in[0], *in[1], *in[2]); };
    auto bwd = [](const Array& g, const Inputs& in, const Array&) {
        const Array& x = *in[0];
        const Array& s = *in[1];
        const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
        Array dx(x.shape()), ds(s.shape()), db(in[2]->shape());
        for (std::size_t i = 0; i < c; ++i) {
            double accs = 0.0, accb = 0.0;
            for (std::size_t j = 0; j < hw; ++j) {
                const std::size_t f = i * hw + j;
                dx[f] = g[f] * s[i];
                accs += g[f] * x[f];
                accb += g[f];
            }
            ds[i] = accs;
            db[i] = accb;
        }
        return std::vector<Array>{std::move(dx), std::move(ds), std::move(db)};
    };
    Array out = utrack::channel_affine(t.value(x), t.value(scale), t.value(shift));
    return t.record("channel_affine", {x, scale, shift}, std::move(out), std::move(fwd),
                    std::move(bwd));
}

Var add_channel_bias(Tape& t, Var x, Var bias) {
    auto fwd = [](const Inputs& in) {
        const Array& x = *in[0];
        const Array& b = *in[1];
        if (x.rank() != 3 || b.size() != x.extent(0)) {
            throw ShapeError("add_channel_bias: bias " + b.shape_str() + " vs input " + x.shape_str());
        }
        Array out(x.shape());
        const std::size_t hw = x.extent(1) * x.extent(2);
        for (std::size_t c = 0; c < x.extent(0); ++c)
            for (std::size_t j = 0; j < hw; ++j) out[c * hw + j] = x[c * hw + j] + b[c];
        return out;
    };
    auto bwd = [](const Array& g, const Inputs& in, const Array&) {
        Array db(in[1]->shape());
        const std::size_t hw = g.extent(1) * g.extent(2);
        for (std::size_t c = 0; c < g.extent(0); ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < hw; ++j) acc += g[c * hw + j];
            db[c] = acc;
        }
        return std::vector<Array>{g, std::move(db)};
    };
    return record2(t, "add_channel_bias", x, bias, std::move(fwd), std::move(bwd));
}

Var add_row_bias(Tape& t, Var x, Var bias) {
    auto fwd = [](const Inputs& in) {
        const Array& x = *in[0];
        const Array& b = *in[1];
        if (x.rank() != 2 || b.size() != x.extent(1)) {
            throw ShapeError("add_row_bias: bias " + b.shape_str() + " vs input " + x.shape_str());
        }
        Array out(x.shape());
        for (std::size_t i = 0; i < x.extent(0); ++i)
            for (std::size_t j = 0; j < x.extent(1); ++j) out.at(i, j) = x.at(i, j) + b[j];
        return out;
    };
    auto bwd = [](const Array& g, const Inputs& in, const Array&) {
        Array db(in[1]->shape());
        for (std::size_t i = 0; i < g.extent(0); ++i)
            for (std::size_t j = 0; j < g.extent(1); ++j) db[j] += g.at(i, j);
        return std::vector<Array>{g, std::move(db)};
    };
    return record2(t, "add_row_bias", x, bias, std::move(fwd), std::move(bwd));
}

Var global_avg_pool(Tape& t, Var x) {
    return record1(
        t, "global_avg_pool", x, [](const Inputs& in) { return utrack::global_avg_pool(*in[0]); },
        [](const Array& g, const Inputs& in, const Array&) {
            const Array& x = *in[0];
            const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
            Array d(x.shape());
            for (std::size_t i = 0; i < c; ++i) {
                const double v = g[i] / static_cast<double>(hw);
                for (std::size_t j = 0; j < hw; ++j) d[i * hw + j] = v;
            }
            return std::vector<Array>{std::move(d)};
        });
}

Var bilinear_upsample(Tape& t, Var x, std::size_t factor) {
    auto fwd = [factor](const Inputs& in) { return utrack::bilinear_upsample(*in[0], factor); };
    auto bwd = [factor](const Array& g, const Inputs& in, const Array&) {
        const Array& x = *in[0];
        const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
        const std::size_t oh = h * factor, ow = w * factor;
        const double f = static_cast<double>(factor);
        Array d(x.shape());
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
                    const double gv = g.at(ch, oy, ox);
                    d.at(ch, y0, x0) += gv * (1 - fy) * (1 - fx);
                    d.at(ch, y0, x1) += gv * (1 - fy) * fx;
                    d.at(ch, y1, x0) += gv * fy * (1 - fx);
                    d.at(ch, y1, x1) += gv * fy * fx;
                }
            }
        }
        return std::vector<Array>{std::move(d)};
    };
    return record1(t, "bilinear_upsample", x, std::move(fwd), std::move(bwd));
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias) {
    constexpr double kEps = 1e-5;
    auto fwd = [](const Inputs& in) { return utrack::layer_norm(*in[0], *in[1], *in[2], kEps); };
    auto bwd = [](const Array& g, const Inputs& in, const Array&) {
        const Array& x = *in[0];
        const Array& gain = *in[1];
        const std::size_t n = x.extent(0), d = x.extent(1);
        Array dx(x.shape()), dgain(gain.shape()), dbias(in[2]->shape());
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
            const double inv = 1.0 / std::sqrt(var + kEps);
            double mu = 0.0, mux = 0.0;  // mean(u), mean(u * xhat)
            for (std::size_t j = 0; j < d; ++j) {
                const double xhat = (x.at(i, j) - mean) * inv;
                const double u = g.at(i, j) * gain[j];
                mu += u;
                mux += u * xhat;
                dgain[j] += g.at(i, j) * xhat;
                dbias[j] += g.at(i, j);
            }
            mu /= static_cast<double>(d);
            mux /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
                const double xhat = (x.at(i, j) - mean) * inv;
                const double u = g.at(i, j) * gain[j];
                dx.at(i, j) = inv * (u - mu - xhat * mux);
            }
        }
        return std::vector<Array>{std::move(dx), std::move(dgain), std::move(dbias)};
    };
    Array out = utrack::layer_norm(t.value(x), t.value(gain), t.value(bias), kEps);
    return t.record("layer_norm", {x, gain, bias}, std::move(out), std::move(fwd), std::move(bwd));
}

namespace {

Array patch_flatten_forward(const Array& img, std::size_t patch) {
    if (img.rank() != 3 || img.extent(0) != 3) {
        throw ShapeError("patch_flatten: expects [3 x H x W], got " + img.shape_str());
    }
    const std::size_t h = img.extent(1), w = img.extent(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw ConfigError("patch_flatten: patch side " + std::to_string(patch) +
                          " does not divide image " + img.shape_str());
    }
    const std::size_t rows = h / patch, cols = w / patch;
    Array out({rows * cols, 3 * patch * patch});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t tok = r * cols + c;
            std::size_t k = 0;
            for (std::size_t ch = 0; ch < 3; ++ch)
                for (std::size_t py = 0; py < patch; ++py)
                    for (std::size_t px = 0; px < patch; ++px)
                        out.at(tok, k++) = img.at(ch, r * patch + py, c * patch + px);
        }
    }
    return out;
}

}  // namespace

Var patch_flatten(Tape& t, Var image, std::size_t patch) {
    auto fwd = [patch](const Inputs& in) { return patch_flatten_forward(*in[0], patch); };
    auto bwd = [patch](const Array& g, const Inputs& in, const Array&) {
        const Array& img = *in[0];
        const std::size_t h = img.extent(1), w = img.extent(2);
        const std::size_t rows = h / patch, cols = w / patch;
        Array d(img.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t tok = r * cols + c;
                std::size_t k = 0;
                for (std::size_t ch = 0; ch < 3; ++ch)
                    for (std::size_t py = 0; py < patch; ++py)
                        for (std::size_t px = 0; px < patch; ++px)
                            d.at(ch, r * patch + py, c * patch + px) = g.at(tok, k++);
            }
        }
        return std::vector<Array>{std::move(d)};
    };
    return record1(t, "patch_flatten", image, std::move(fwd), std::move(bwd));
}

Var bilinear_sample(Tape& t, Var map2d, Var x, Var y) {
    auto fwd = [](const Inputs& in) {
        return Array::scalar(utrack::bilinear_sample(*in[0], (*in[1])[0], (*in[2])[0]));
    };
    auto bwd = [](const Array& g, const Inputs& in, const Array&) {
        const Array& m = *in[0];
        const double xr = (*in[1])[0], yr = (*in[2])[0];
        const std::size_t h = m.extent(0), w = m.extent(1);
        const double cx = std::clamp(xr, 0.0, static_cast<double>(w - 1));
        const double cy = std::clamp(yr, 0.0, static_cast<double>(h - 1));
        const std::size_t x0 = std::min(static_cast<std::size_t>(cx), w >= 2 ? w - 2 : 0);
        const std::size_t y0 = std::min(static_cast<std::size_t>(cy), h >= 2 ? h - 2 : 0);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double fx = cx - static_cast<double>(x0);
        const double fy = cy - static_cast<double>(y0);
        const double gv = g[0];
        Array dm(m.shape());
        dm.at(y0, x0) += gv * (1 - fy) * (1 - fx);
        dm.at(y0, x1) += gv * (1 - fy) * fx;
        dm.at(y1, x0) += gv * fy * (1 - fx);
        dm.at(y1, x1) += gv * fy * fx;
        // Clamped coordinates contribute no positional gradient.
        double dxv = 0.0, dyv = 0.0;
        if (xr >= 0.0 && xr <= static_cast<double>(w - 1) && w > 1) {
            dxv = gv * ((1 - fy) * (m.at(y0, x1) - m.at(y0, x0)) + fy * (m.at(y1, x1) - m.at(y1, x0)));
        }
        if (yr >= 0.0 && yr <= static_cast<double>(h - 1) && h > 1) {
            dyv = gv * ((1 - fx) * (m.at(y1, x0) - m.at(y0, x0)) + fx * (m.at(y1, x1) - m.at(y0, x1)));
        }
        return std::vector<Array>{std::move(dm), Array::scalar(dxv), Array::scalar(dyv)};
    };
    Array out = Array::scalar(utrack::bilinear_sample(t.value(map2d), t.scalar(x), t.scalar(y)));
    return t.record("bilinear_sample", {map2d, x, y}, std::move(out), std::move(fwd),
                    std::move(bwd));
}

}  // namespace utrack::ad
