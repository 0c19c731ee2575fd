#include "pesqdnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pesqdnn {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor make_tensor(std::vector<std::size_t> shape, bool requires_grad) {
    for (std::size_t d : shape)
        if (d == 0) throw DimensionError("zero dimension in shape " + shape_str(shape));
    auto t = std::make_shared<TensorData>();
    t->value.assign(shape_product(shape), 0.0);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    t->flows_grad = requires_grad;
    return t;
}

Tensor make_tensor(std::vector<std::size_t> shape, std::vector<double> values,
                   bool requires_grad) {
    if (shape_product(shape) != values.size())
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    auto t = std::make_shared<TensorData>();
    t->shape = std::move(shape);
    t->value = std::move(values);
    t->requires_grad = requires_grad;
    t->flows_grad = requires_grad;
    return t;
}

Tensor make_scalar(double v, bool requires_grad) {
    return make_tensor({1}, {v}, requires_grad);
}

void round_to_f32(TensorData& t) {
    for (double& v : t.value) v = static_cast<double>(static_cast<float>(v));
}

void Graph::quantize(Tensor& t) const {
    if (prec_ == Precision::f32) round_to_f32(*t);
}

Tensor Graph::finish(Tensor out, bool flows, std::function<void()> bw) {
    quantize(out);
    out->flows_grad = flows;
    if (record_ && flows) nodes_.push_back(Node{out, std::move(bw)});
    return out;
}

namespace {

bool has_grad(const Tensor& t) { return !t->grad.empty(); }

} // namespace

// ---------------------------------------------------------------------------
// binary / elementwise
// ---------------------------------------------------------------------------

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw DimensionError("matmul shape mismatch: " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    Tensor c = make_tensor({m, n});
    const double* av = a->value.data();
    const double* bv = b->value.data();
    double* cv = c->value.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv + p * n;
            double* crow = cv + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    bool flows = a->flows_grad || b->flows_grad;
    return finish(c, flows, [a, b, c, m, k, n]() {
        if (!has_grad(c)) return;
        const double* gc = c->grad.data();
        if (a->flows_grad) {
            a->ensure_grad();
            // dA = dC * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        s += gc[i * n + j] * b->value[p * n + j];
                    a->grad[i * k + p] += s;
                }
        }
        if (b->flows_grad) {
            b->ensure_grad();
            // dB = A^T * dC
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t i = 0; i < m; ++i) {
                    const double aip = a->value[i * k + p];
                    for (std::size_t j = 0; j < n; ++j)
                        b->grad[p * n + j] += aip * gc[i * n + j];
                }
        }
    });
}

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
}
} // namespace

Tensor Graph::add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor c = make_tensor(a->shape);
    for (std::size_t i = 0; i < c->size(); ++i) c->value[i] = a->value[i] + b->value[i];
    return finish(c, a->flows_grad || b->flows_grad, [a, b, c]() {
        if (!has_grad(c)) return;
        if (a->flows_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < c->size(); ++i) a->grad[i] += c->grad[i];
        }
        if (b->flows_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < c->size(); ++i) b->grad[i] += c->grad[i];
        }
    });
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor c = make_tensor(a->shape);
    for (std::size_t i = 0; i < c->size(); ++i) c->value[i] = a->value[i] - b->value[i];
    return finish(c, a->flows_grad || b->flows_grad, [a, b, c]() {
        if (!has_grad(c)) return;
        if (a->flows_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < c->size(); ++i) a->grad[i] += c->grad[i];
        }
        if (b->flows_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < c->size(); ++i) b->grad[i] -= c->grad[i];
        }
    });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor c = make_tensor(a->shape);
    for (std::size_t i = 0; i < c->size(); ++i) c->value[i] = a->value[i] * b->value[i];
    return finish(c, a->flows_grad || b->flows_grad, [a, b, c]() {
        if (!has_grad(c)) return;
        if (a->flows_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < c->size(); ++i) a->grad[i] += c->grad[i] * b->value[i];
        }
        if (b->flows_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < c->size(); ++i) b->grad[i] += c->grad[i] * a->value[i];
        }
    });
}

Tensor Graph::scale(const Tensor& a, double s) {
    Tensor c = make_tensor(a->shape);
    for (std::size_t i = 0; i < c->size(); ++i) c->value[i] = a->value[i] * s;
    return finish(c, a->flows_grad, [a, c, s]() {
        if (!has_grad(c) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < c->size(); ++i) a->grad[i] += c->grad[i] * s;
    });
}

Tensor Graph::add_const(const Tensor& a, double k) {
    Tensor c = make_tensor(a->shape);
    for (std::size_t i = 0; i < c->size(); ++i) c->value[i] = a->value[i] + k;
    return finish(c, a->flows_grad, [a, c]() {
        if (!has_grad(c) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < c->size(); ++i) a->grad[i] += c->grad[i];
    });
}

Tensor Graph::add_row(const Tensor& mat, const Tensor& row) {
    if (mat->shape.size() != 2 || row->shape.size() != 1 || row->shape[0] != mat->shape[1])
        throw DimensionError("add_row shape mismatch: " + shape_str(mat->shape) + " vs " +
                             shape_str(row->shape));
    const std::size_t m = mat->shape[0], n = mat->shape[1];
    Tensor c = make_tensor(mat->shape);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            c->value[i * n + j] = mat->value[i * n + j] + row->value[j];
    return finish(c, mat->flows_grad || row->flows_grad, [mat, row, c, m, n]() {
        if (!has_grad(c)) return;
        if (mat->flows_grad) {
            mat->ensure_grad();
            for (std::size_t i = 0; i < c->size(); ++i) mat->grad[i] += c->grad[i];
        }
        if (row->flows_grad) {
            row->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) row->grad[j] += c->grad[i * n + j];
        }
    });
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

Tensor Graph::sigmoid(const Tensor& a) {
    Tensor c = make_tensor(a->shape);
    for (std::size_t i = 0; i < c->size(); ++i)
        c->value[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
    return finish(c, a->flows_grad, [a, c]() {
        if (!has_grad(c) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < c->size(); ++i) {
            const double y = c->value[i];
            a->grad[i] += c->grad[i] * y * (1.0 - y);
        }
    });
}

Tensor Graph::tanh(const Tensor& a) {
    Tensor c = make_tensor(a->shape);
    for (std::size_t i = 0; i < c->size(); ++i) c->value[i] = std::tanh(a->value[i]);
    return finish(c, a->flows_grad, [a, c]() {
        if (!has_grad(c) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < c->size(); ++i) {
            const double y = c->value[i];
            a->grad[i] += c->grad[i] * (1.0 - y * y);
        }
    });
}

Tensor Graph::leaky_relu(const Tensor& a, double slope) {
    Tensor c = make_tensor(a->shape);
    for (std::size_t i = 0; i < c->size(); ++i) {
        const double x = a->value[i];
        c->value[i] = x >= 0.0 ? x : slope * x;
    }
    return finish(c, a->flows_grad, [a, c, slope]() {
        if (!has_grad(c) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < c->size(); ++i)
            a->grad[i] += c->grad[i] * (a->value[i] >= 0.0 ? 1.0 : slope);
    });
}

Tensor Graph::softmax(const Tensor& a) {
    if (a->size() == 0) throw DimensionError("softmax on empty tensor");
    Tensor c = make_tensor(a->shape);
    double mx = a->value[0];
    for (double v : a->value) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t i = 0; i < a->size(); ++i) {
        c->value[i] = std::exp(a->value[i] - mx);
        sum += c->value[i];
    }
    for (double& v : c->value) v /= sum;
    return finish(c, a->flows_grad, [a, c]() {
        if (!has_grad(c) || !a->flows_grad) return;
        a->ensure_grad();
        double dot = 0.0;
        for (std::size_t i = 0; i < c->size(); ++i) dot += c->grad[i] * c->value[i];
        for (std::size_t i = 0; i < c->size(); ++i)
            a->grad[i] += c->value[i] * (c->grad[i] - dot);
    });
}

// ---------------------------------------------------------------------------
// convolution / pooling
// ---------------------------------------------------------------------------

Tensor Graph::conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                     std::size_t pad_h, std::size_t pad_w) {
    if (input->shape.size() != 3)
        throw DimensionError("conv2d input must be HxTxC, got " + shape_str(input->shape));
    if (kernels->shape.size() != 4)
        throw DimensionError("conv2d kernels must be hxwxCinxf, got " +
                             shape_str(kernels->shape));
    const std::size_t H = input->shape[0], T = input->shape[1], Cin = input->shape[2];
    const std::size_t kh = kernels->shape[0], kw = kernels->shape[1];
    const std::size_t kc = kernels->shape[2], f = kernels->shape[3];
    if (kc != Cin)
        throw DimensionError("conv2d channel mismatch: input " + shape_str(input->shape) +
                             " vs kernels " + shape_str(kernels->shape));
    if (bias->shape.size() != 1 || bias->shape[0] != f)
        throw DimensionError("conv2d bias must be [f], got " + shape_str(bias->shape));
    if (kh > H + 2 * pad_h || kw > T + 2 * pad_w)
        throw DimensionError("conv2d kernel " + shape_str(kernels->shape) +
                             " larger than padded input " + shape_str(input->shape));
    const std::size_t Ho = H + 2 * pad_h - kh + 1;
    const std::size_t To = T + 2 * pad_w - kw + 1;

    Tensor out = make_tensor({Ho, To, f});
    const double* in = input->value.data();
    const double* kv = kernels->value.data();
    double* ov = out->value.data();
    // cross-correlation; output maps processed in fixed-width register-resident
    // accumulator chunks so the (ki, kt, c) reduction never touches memory
    for (std::size_t oi = 0; oi < Ho; ++oi) {
        const std::size_t ki_lo = pad_h > oi ? pad_h - oi : 0;
        const std::size_t ki_hi = std::min(kh, H + pad_h - oi);
        for (std::size_t ot = 0; ot < To; ++ot) {
            const std::size_t kt_lo = pad_w > ot ? pad_w - ot : 0;
            const std::size_t kt_hi = std::min(kw, T + pad_w - ot);
            double* opix = ov + (oi * To + ot) * f;
            std::size_t j0 = 0;
            while (j0 < f) {
                const std::size_t jn = std::min<std::size_t>(16, f - j0);
                double acc[16] = {};
                for (std::size_t u = 0; u < jn; ++u) acc[u] = bias->value[j0 + u];
                for (std::size_t ki = ki_lo; ki < ki_hi; ++ki) {
                    const std::size_t ii = oi + ki - pad_h;
                    for (std::size_t kt = kt_lo; kt < kt_hi; ++kt) {
                        const std::size_t it = ot + kt - pad_w;
                        const double* __restrict ipix = in + (ii * T + it) * Cin;
                        const double* __restrict kpos =
                            kv + ((ki * kw + kt) * Cin) * f + j0;
                        if (jn == 16) {
                            for (std::size_t c = 0; c < Cin; ++c) {
                                const double x = ipix[c];
                                const double* __restrict kr = kpos + c * f;
                                for (std::size_t u = 0; u < 16; ++u) acc[u] += x * kr[u];
                            }
                        } else {
                            for (std::size_t c = 0; c < Cin; ++c) {
                                const double x = ipix[c];
                                const double* __restrict kr = kpos + c * f;
                                for (std::size_t u = 0; u < jn; ++u) acc[u] += x * kr[u];
                            }
                        }
                    }
                }
                for (std::size_t u = 0; u < jn; ++u) opix[j0 + u] = acc[u];
                j0 += jn;
            }
        }
    }
    bool flows = input->flows_grad || kernels->flows_grad || bias->flows_grad;
    return finish(out, flows,
                  [input, kernels, bias, out, H, T, Cin, kh, kw, f, Ho, To, pad_h, pad_w]() {
        if (!has_grad(out)) return;
        const double* go = out->grad.data();
        if (bias->flows_grad) {
            bias->ensure_grad();
            for (std::size_t px = 0; px < Ho * To; ++px) {
                const double* gpix = go + px * f;
                for (std::size_t j = 0; j < f; ++j) bias->grad[j] += gpix[j];
            }
        }
        if (kernels->flows_grad) {
            // loops inverted vs the forward pass: each kernel-grad row chunk
            // accumulates in registers over all output pixels
            kernels->ensure_grad();
            const double* iv = input->value.data();
            double* kg = kernels->grad.data();
            for (std::size_t ki = 0; ki < kh; ++ki) {
                const std::size_t oi_lo = pad_h > ki ? pad_h - ki : 0;
                const std::size_t oi_hi = std::min(Ho, H + pad_h - ki);
                for (std::size_t kt = 0; kt < kw; ++kt) {
                    const std::size_t ot_lo = pad_w > kt ? pad_w - kt : 0;
                    const std::size_t ot_hi = std::min(To, T + pad_w - kt);
                    for (std::size_t c = 0; c < Cin; ++c) {
                        double* __restrict kgr = kg + ((ki * kw + kt) * Cin + c) * f;
                        std::size_t j0 = 0;
                        while (j0 < f) {
                            const std::size_t jn = std::min<std::size_t>(16, f - j0);
                            double acc[16] = {};
                            for (std::size_t oi = oi_lo; oi < oi_hi; ++oi) {
                                const std::size_t ii = oi + ki - pad_h;
                                const double* __restrict irow = iv + (ii * T) * Cin + c;
                                const double* __restrict grow = go + (oi * To) * f + j0;
                                if (jn == 16) {
                                    for (std::size_t ot = ot_lo; ot < ot_hi; ++ot) {
                                        const double x = irow[(ot + kt - pad_w) * Cin];
                                        const double* __restrict gp = grow + ot * f;
                                        for (std::size_t u = 0; u < 16; ++u)
                                            acc[u] += x * gp[u];
                                    }
                                } else {
                                    for (std::size_t ot = ot_lo; ot < ot_hi; ++ot) {
                                        const double x = irow[(ot + kt - pad_w) * Cin];
                                        const double* __restrict gp = grow + ot * f;
                                        for (std::size_t u = 0; u < jn; ++u)
                                            acc[u] += x * gp[u];
                                    }
                                }
                            }
                            for (std::size_t u = 0; u < jn; ++u) kgr[j0 + u] += acc[u];
                            j0 += jn;
                        }
                    }
                }
            }
        }
        if (input->flows_grad) {
            input->ensure_grad();
            const double* kvv = kernels->value.data();
            for (std::size_t oi = 0; oi < Ho; ++oi) {
                const std::size_t ki_lo = pad_h > oi ? pad_h - oi : 0;
                const std::size_t ki_hi = std::min(kh, H + pad_h - oi);
                for (std::size_t ot = 0; ot < To; ++ot) {
                    const std::size_t kt_lo = pad_w > ot ? pad_w - ot : 0;
                    const std::size_t kt_hi = std::min(kw, T + pad_w - ot);
                    const double* gpix = go + (oi * To + ot) * f;
                    for (std::size_t ki = ki_lo; ki < ki_hi; ++ki) {
                        const std::size_t ii = oi + ki - pad_h;
                        for (std::size_t kt = kt_lo; kt < kt_hi; ++kt) {
                            const std::size_t it = ot + kt - pad_w;
                            const double* __restrict kp = kvv + ((ki * kw + kt) * Cin) * f;
                            double* __restrict gi = input->grad.data() + (ii * T + it) * Cin;
                            std::size_t c = 0;
                            for (; c + 2 <= Cin; c += 2) {
                                const double* __restrict k0 = kp + c * f;
                                const double* __restrict k1 = k0 + f;
                                double g0 = 0.0, g1 = 0.0;
                                for (std::size_t j = 0; j < f; ++j) {
                                    g0 += k0[j] * gpix[j];
                                    g1 += k1[j] * gpix[j];
                                }
                                gi[c] += g0;
                                gi[c + 1] += g1;
                            }
                            for (; c < Cin; ++c) {
                                const double* __restrict kr = kp + c * f;
                                double gin = 0.0;
                                for (std::size_t j = 0; j < f; ++j) gin += kr[j] * gpix[j];
                                gi[c] += gin;
                            }
                        }
                    }
                }
            }
        }
    });
}

Tensor Graph::maxpool2d(const Tensor& input, std::size_t ph, std::size_t pw) {
    if (input->shape.size() != 3)
        throw DimensionError("maxpool2d input must be HxTxC, got " + shape_str(input->shape));
    const std::size_t H = input->shape[0], T = input->shape[1], C = input->shape[2];
    if (ph == 0 || pw == 0 || H % ph != 0 || T % pw != 0)
        throw DimensionError("maxpool2d window " + std::to_string(ph) + "x" +
                             std::to_string(pw) + " does not divide input " +
                             shape_str(input->shape));
    const std::size_t Ho = H / ph, To = T / pw;
    Tensor out = make_tensor({Ho, To, C});
    // argmax indices, first occurrence in window order on ties
    auto arg = std::make_shared<std::vector<std::size_t>>(out->size());
    for (std::size_t oi = 0; oi < Ho; ++oi)
        for (std::size_t ot = 0; ot < To; ++ot)
            for (std::size_t c = 0; c < C; ++c) {
                std::size_t besti = (oi * ph * T + ot * pw) * C + c;
                double best = input->value[besti];
                for (std::size_t di = 0; di < ph; ++di)
                    for (std::size_t dt = 0; dt < pw; ++dt) {
                        const std::size_t idx =
                            ((oi * ph + di) * T + (ot * pw + dt)) * C + c;
                        if (input->value[idx] > best) {
                            best = input->value[idx];
                            besti = idx;
                        }
                    }
                const std::size_t o = (oi * To + ot) * C + c;
                out->value[o] = best;
                (*arg)[o] = besti;
            }
    return finish(out, input->flows_grad, [input, out, arg]() {
        if (!has_grad(out) || !input->flows_grad) return;
        input->ensure_grad();
        for (std::size_t o = 0; o < out->size(); ++o)
            input->grad[(*arg)[o]] += out->grad[o];
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor Graph::reduce_rows(const Tensor& a, Reduce kind) {
    if (a->shape.size() != 2)
        throw DimensionError("reduce_rows input must be 2-D, got " + shape_str(a->shape));
    const std::size_t m = a->shape[0], n = a->shape[1];
    if (m == 0) throw DimensionError("reduce_rows over empty axis");
    Tensor out = make_tensor({1, n});
    auto arg = std::make_shared<std::vector<std::size_t>>(); // Min/Max only
    auto mean = std::make_shared<std::vector<double>>();     // Std only
    switch (kind) {
    case Reduce::Mean:
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += a->value[i * n + j];
            out->value[j] = s / static_cast<double>(m);
        }
        break;
    case Reduce::Std: {
        mean->resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += a->value[i * n + j];
            const double mu = s / static_cast<double>(m);
            (*mean)[j] = mu;
            double v = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const double d = a->value[i * n + j] - mu;
                v += d * d;
            }
            out->value[j] = std::sqrt(v / static_cast<double>(m) + kStdEpsilon);
        }
        break;
    }
    case Reduce::Min:
    case Reduce::Max: {
        arg->resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            double best = a->value[j];
            std::size_t bi = 0;
            for (std::size_t i = 1; i < m; ++i) {
                const double v = a->value[i * n + j];
                const bool better = kind == Reduce::Max ? v > best : v < best;
                if (better) {
                    best = v;
                    bi = i;
                }
            }
            out->value[j] = best;
            (*arg)[j] = bi;
        }
        break;
    }
    }
    return finish(out, a->flows_grad, [a, out, kind, arg, mean, m, n]() {
        if (!has_grad(out) || !a->flows_grad) return;
        a->ensure_grad();
        switch (kind) {
        case Reduce::Mean:
            for (std::size_t j = 0; j < n; ++j) {
                const double g = out->grad[j] / static_cast<double>(m);
                for (std::size_t i = 0; i < m; ++i) a->grad[i * n + j] += g;
            }
            break;
        case Reduce::Std:
            for (std::size_t j = 0; j < n; ++j) {
                const double g = out->grad[j];
                const double sd = out->value[j];
                const double mu = (*mean)[j];
                for (std::size_t i = 0; i < m; ++i)
                    a->grad[i * n + j] +=
                        g * (a->value[i * n + j] - mu) / (static_cast<double>(m) * sd);
            }
            break;
        case Reduce::Min:
        case Reduce::Max:
            for (std::size_t j = 0; j < n; ++j)
                a->grad[(*arg)[j] * n + j] += out->grad[j];
            break;
        }
    });
}

Tensor Graph::sum_all(const Tensor& a) {
    Tensor out = make_tensor({1});
    double s = 0.0;
    for (double v : a->value) s += v;
    out->value[0] = s;
    return finish(out, a->flows_grad, [a, out]() {
        if (!has_grad(out) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0];
    });
}

Tensor Graph::mean_all(const Tensor& a) {
    Tensor out = make_tensor({1});
    double s = 0.0;
    for (double v : a->value) s += v;
    const double inv = 1.0 / static_cast<double>(a->size());
    out->value[0] = s * inv;
    return finish(out, a->flows_grad, [a, out, inv]() {
        if (!has_grad(out) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0] * inv;
    });
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

Tensor Graph::reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (shape_product(shape) != a->size())
        throw DimensionError("reshape " + shape_str(a->shape) + " -> " + shape_str(shape) +
                             " changes element count");
    Tensor out = make_tensor(std::move(shape));
    out->value = a->value;
    return finish(out, a->flows_grad, [a, out]() {
        if (!has_grad(out) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
    });
}

Tensor Graph::concat_flat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_flat of zero tensors");
    std::size_t total = 0;
    bool flows = false;
    for (const auto& p : parts) {
        total += p->size();
        flows = flows || p->flows_grad;
    }
    Tensor out = make_tensor({total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.begin(), p->value.end(), out->value.begin() + off);
        off += p->size();
    }
    return finish(out, flows, [parts, out]() {
        if (!has_grad(out)) return;
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p->flows_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += out->grad[off + i];
            }
            off += p->size();
        }
    });
}

Tensor Graph::slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
    if (a->shape.size() != 2)
        throw DimensionError("slice_cols input must be 2-D, got " + shape_str(a->shape));
    const std::size_t m = a->shape[0], n = a->shape[1];
    if (start + len > n)
        throw DimensionError("slice_cols [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of " + shape_str(a->shape));
    Tensor out = make_tensor({m, len});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j)
            out->value[i * len + j] = a->value[i * n + start + j];
    return finish(out, a->flows_grad, [a, out, start, len, m, n]() {
        if (!has_grad(out) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < len; ++j)
                a->grad[i * n + start + j] += out->grad[i * len + j];
    });
}

Tensor Graph::row(const Tensor& a, std::size_t i) {
    if (a->shape.size() != 2)
        throw DimensionError("row() input must be 2-D, got " + shape_str(a->shape));
    const std::size_t m = a->shape[0], n = a->shape[1];
    if (i >= m) throw DimensionError("row index " + std::to_string(i) + " out of " +
                                     shape_str(a->shape));
    Tensor out = make_tensor({1, n});
    std::copy(a->value.begin() + i * n, a->value.begin() + (i + 1) * n, out->value.begin());
    return finish(out, a->flows_grad, [a, out, i, n]() {
        if (!has_grad(out) || !a->flows_grad) return;
        a->ensure_grad();
        for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[j];
    });
}

Tensor Graph::stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows of zero rows");
    const std::size_t n = rows[0]->size();
    bool flows = false;
    for (const auto& r : rows) {
        if (r->size() != n)
            throw DimensionError("stack_rows with mismatched widths: " +
                                 shape_str(rows[0]->shape) + " vs " + shape_str(r->shape));
        flows = flows || r->flows_grad;
    }
    Tensor out = make_tensor({rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i]->value.begin(), rows[i]->value.end(),
                  out->value.begin() + i * n);
    return finish(out, flows, [rows, out, n]() {
        if (!has_grad(out)) return;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!rows[i]->flows_grad) continue;
            rows[i]->ensure_grad();
            for (std::size_t j = 0; j < n; ++j) rows[i]->grad[j] += out->grad[i * n + j];
        }
    });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Graph::backward(const Tensor& loss) {
    if (loss->size() != 1)
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss->shape));
    if (!record_) throw ContractError("backward on a non-recording graph");
    // Reset intermediate gradients so repeated calls accumulate only into
    // leaves (requires_grad tensors).
    for (auto& node : nodes_)
        if (!node.out->requires_grad) node.out->zero_grad();
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->bw();
}

void Graph::clear() { nodes_.clear(); }

} // namespace pesqdnn
