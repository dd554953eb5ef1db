#include "r2vd/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_set>

namespace r2vd::ad {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Result node; inputs are stored positionally (undefined tensors as null) and
// the backward closure is attached only when some input needs gradients.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> bw) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
    if (needs) {
        n->requires_grad = true;
        for (auto& in : inputs) n->inputs.push_back(in.defined() ? in.node_ptr() : nullptr);
        n->backward = std::move(bw);
    }
    return Tensor<T>(std::move(n));
}

// Gradient buffer of input i, or nullptr when it does not need one.
template <typename T>
T* input_grad(Node<T>& n, std::size_t i) {
    if (i >= n.inputs.size() || !n.inputs[i] || !n.inputs[i]->requires_grad) return nullptr;
    return n.inputs[i]->grad_buffer();
}

template <typename T>
const T* input_value(Node<T>& n, std::size_t i) {
    return n.inputs[i] ? n.inputs[i]->value.data() : nullptr;
}

template <typename T>
void softmax_inplace(T* row, std::size_t len) {
    T mx = row[0];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += static_cast<double>(row[j]);
    }
    for (std::size_t j = 0; j < len; ++j) row[j] = static_cast<T>(static_cast<double>(row[j]) / sum);
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
    if (ad::numel(shape) != values.size()) shape_error("constant", "value count does not match " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = ad::numel(shape);
    Tensor t = constant(std::move(shape), std::vector<T>(n, T(0)));
    t.node_->requires_grad = requires_grad;
    return t;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) shape_error("item", "tensor is not a scalar");
    return node_->value[0];
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    if (!loss.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Only leaves accumulate across calls.
    for (Node<T>* n : order)
        if (n->backward) n->grad.clear();
    loss.node()->grad_buffer()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward && !(*it)->grad.empty()) (*it)->backward(**it);
}

template <>
void gemm<float>(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

template <>
void gemm<double>(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
                  std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

// ---- primitives ---------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.rank() < 1 || weight.rank() != 2) shape_error("linear", "expects x[..., Din] and weight[Dout, Din]");
    const std::size_t din = x.shape().back(), dout = weight.dim(0);
    if (weight.dim(1) != din) shape_error("linear", "weight " + shape_str(weight.shape()) + " vs x " + shape_str(x.shape()));
    if (bias.defined() && bias.numel() != dout) shape_error("linear", "bias length mismatch");
    const std::size_t m = x.numel() / din;

    std::vector<T> y(m * dout, T(0));
    if (m > 0) gemm<T>(false, true, m, dout, din, T(1), x.values().data(), din, weight.values().data(), din, T(0), y.data(), dout);
    if (bias.defined()) {
        const T* b = bias.values().data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < dout; ++j) y[i * dout + j] += b[j];
    }
    Shape shape = x.shape();
    shape.back() = dout;
    return make_result<T>(std::move(shape), std::move(y), {x, weight, bias}, [m, din, dout](Node<T>& n) {
        const T* dy = n.grad.data();
        if (T* dx = input_grad(n, 0)) gemm<T>(false, false, m, din, dout, T(1), dy, dout, input_value(n, 1), din, T(1), dx, din);
        if (T* dw = input_grad(n, 1)) gemm<T>(true, false, dout, din, m, T(1), dy, dout, input_value(n, 0), din, T(1), dw, din);
        if (T* db = input_grad(n, 2))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < dout; ++j) db[j] += dy[i * dout + j];
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) shape_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] + b.values()[i];
    return make_result<T>(a.shape(), std::move(y), {a, b}, [](Node<T>& n) {
        const std::size_t len = n.value.size();
        for (std::size_t k = 0; k < 2; ++k)
            if (T* g = input_grad(n, k))
                for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    std::vector<T> y(x.numel());
    const auto xv = x.values();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] / (T(1) + std::exp(-xv[i]));
    return make_result<T>(x.shape(), std::move(y), {x}, [](Node<T>& n) {
        T* dx = input_grad(n, 0);
        const T* xv = input_value(n, 0);
        for (std::size_t i = 0; i < n.value.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-xv[i]));
            dx[i] += n.grad[i] * s * (T(1) + xv[i] * (T(1) - s));
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
    const std::size_t d = x.shape().back(), m = x.numel() / d;
    if ((gamma.defined() && gamma.numel() != d) || (beta.defined() && beta.numel() != d))
        shape_error("layer_norm", "affine parameters must have " + std::to_string(d) + " entries");
    std::vector<T> xhat(x.numel()), y(x.numel());
    std::vector<double> invstd(m);
    const auto xv = x.values();
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xv[i * d + j];
        mean /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv[i * d + j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        invstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            const T h = static_cast<T>((xv[i * d + j] - mean) * invstd[i]);
            xhat[i * d + j] = h;
            y[i * d + j] = (gamma.defined() ? gamma.values()[j] : T(1)) * h + (beta.defined() ? beta.values()[j] : T(0));
        }
    }
    return make_result<T>(x.shape(), std::move(y), {x, gamma, beta},
                          [m, d, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& n) {
        const T* g = n.inputs[1] ? n.inputs[1]->value.data() : nullptr;
        T* dx = input_grad(n, 0);
        T* dg = input_grad(n, 1);
        T* db = input_grad(n, 2);
        std::vector<double> dh(d);
        for (std::size_t i = 0; i < m; ++i) {
            const T* dy = n.grad.data() + i * d;
            const T* h = xhat.data() + i * d;
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dh[j] = static_cast<double>(dy[j]) * (g ? static_cast<double>(g[j]) : 1.0);
                sum_dh += dh[j];
                sum_dh_h += dh[j] * h[j];
                if (dg) dg[j] += dy[j] * h[j];
                if (db) db[j] += dy[j];
            }
            if (dx) {
                const double k = invstd[i] / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j)
                    dx[i * d + j] += static_cast<T>(k * (static_cast<double>(d) * dh[j] - sum_dh - h[j] * sum_dh_h));
            }
        }
    });
}

template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale) {
    const std::size_t d = x.shape().back(), m = x.numel() / d;
    if (shift.numel() != d || scale.numel() != d) shape_error("modulate", "shift/scale must have " + std::to_string(d) + " entries");
    std::vector<T> y(x.numel());
    const auto xv = x.values(), sh = shift.values(), sc = scale.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) y[i * d + j] = xv[i * d + j] * (T(1) + sc[j]) + sh[j];
    return make_result<T>(x.shape(), std::move(y), {x, shift, scale}, [m, d](Node<T>& n) {
        const T* xv = input_value(n, 0);
        const T* sc = input_value(n, 2);
        T* dx = input_grad(n, 0);
        T* dsh = input_grad(n, 1);
        T* dsc = input_grad(n, 2);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                const T g = n.grad[i * d + j];
                if (dx) dx[i * d + j] += g * (T(1) + sc[j]);
                if (dsh) dsh[j] += g;
                if (dsc) dsc[j] += g * xv[i * d + j];
            }
    });
}

template <typename T>
Tensor<T> gated_add(const Tensor<T>& x, const Tensor<T>& gate, const Tensor<T>& y) {
    if (x.shape() != y.shape()) shape_error("gated_add", shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    const std::size_t d = x.shape().back(), m = x.numel() / d;
    if (gate.numel() != d) shape_error("gated_add", "gate must have " + std::to_string(d) + " entries");
    std::vector<T> out(x.numel());
    const auto xv = x.values(), gv = gate.values(), yv = y.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] + gv[j] * yv[i * d + j];
    return make_result<T>(x.shape(), std::move(out), {x, gate, y}, [m, d](Node<T>& n) {
        const T* gv = input_value(n, 1);
        const T* yv = input_value(n, 2);
        T* dx = input_grad(n, 0);
        T* dg = input_grad(n, 1);
        T* dy = input_grad(n, 2);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                const T g = n.grad[i * d + j];
                if (dx) dx[i * d + j] += g;
                if (dg) dg[j] += g * yv[i * d + j];
                if (dy) dy[i * d + j] += g * gv[j];
            }
    });
}

template <typename T>
Tensor<T> columns(const Tensor<T>& x, std::size_t start, std::size_t count) {
    if (x.rank() != 2) shape_error("columns", "expects a 2-D tensor");
    const std::size_t m = x.dim(0), k = x.dim(1);
    if (start + count > k) shape_error("columns", "range exceeds " + std::to_string(k) + " columns");
    std::vector<T> y(m * count);
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(x.values().data() + i * k + start, count, y.data() + i * count);
    return make_result<T>({m, count}, std::move(y), {x}, [m, k, start, count](Node<T>& n) {
        T* dx = input_grad(n, 0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) dx[i * k + start + j] += n.grad[i * count + j];
    });
}

template <typename T>
Tensor<T> softmax_last_dim(const Tensor<T>& x, std::span<const T> bias) {
    if (!bias.empty() && bias.size() != x.numel()) shape_error("softmax_last_dim", "bias must match input size");
    const std::size_t len = x.shape().back(), m = x.numel() / len;
    std::vector<T> y(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < y.size() && !bias.empty(); ++i) y[i] += bias[i];
    for (std::size_t i = 0; i < m; ++i) softmax_inplace(y.data() + i * len, len);
    return make_result<T>(x.shape(), std::move(y), {x}, [m, len](Node<T>& n) {
        T* dx = input_grad(n, 0);
        for (std::size_t i = 0; i < m; ++i) {
            const T* p = n.value.data() + i * len;
            const T* g = n.grad.data() + i * len;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) dot += static_cast<double>(g[j]) * p[j];
            for (std::size_t j = 0; j < len; ++j) dx[i * len + j] += static_cast<T>(p[j] * (g[j] - dot));
        }
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dSpec spec) {
    if (x.rank() != 4 || weight.rank() != 4) shape_error("conv2d", "expects 4-D input and weight");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0), cpg = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    const std::size_t groups = spec.groups, dil = spec.dilation;
    if (groups == 0 || dil == 0 || cin % groups || cout % groups || cpg != cin / groups)
        shape_error("conv2d", "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()) +
                                  " and groups=" + std::to_string(groups));
    if (kh % 2 == 0 || kw % 2 == 0) shape_error("conv2d", "kernel sizes must be odd");
    if (bias.defined() && bias.numel() != cout) shape_error("conv2d", "bias length mismatch");

    const std::size_t hw = h * w, opg = cout / groups;
    const auto ph = static_cast<std::ptrdiff_t>(dil * (kh - 1) / 2);
    const auto pw = static_cast<std::ptrdiff_t>(dil * (kw - 1) / 2);
    const bool pointwise = kh == 1 && kw == 1 && groups == 1;
    const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);

    // Calls f(out_offset, in_offset, count) for every valid shifted row of a tap.
    auto for_tap_rows = [H, W](std::ptrdiff_t dy, std::ptrdiff_t dx, auto&& f) {
        const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(H, H - dy);
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(W, W - dx);
        if (x1 <= x0) return;
        for (std::ptrdiff_t y = y0; y < y1; ++y)
            f(static_cast<std::size_t>(y * W + x0), static_cast<std::size_t>((y + dy) * W + x0 + dx),
              static_cast<std::size_t>(x1 - x0));
    };

    std::vector<T> out(batch * cout * hw, T(0));
    const T* xv = x.values().data();
    const T* wv = weight.values().data();
    for (std::size_t b = 0; b < batch; ++b) {
        T* ob = out.data() + b * cout * hw;
        const T* ib = xv + b * cin * hw;
        if (pointwise) {
            gemm<T>(false, false, cout, hw, cin, T(1), wv, cin, ib, hw, T(0), ob, hw);
        } else {
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const std::size_t g = oc / opg;
                T* orow = ob + oc * hw;
                for (std::size_t icl = 0; icl < cpg; ++icl) {
                    const T* irow = ib + (g * cpg + icl) * hw;
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const T wt = wv[((oc * cpg + icl) * kh + ky) * kw + kx];
                            const auto dy = static_cast<std::ptrdiff_t>(ky * dil) - ph;
                            const auto dx = static_cast<std::ptrdiff_t>(kx * dil) - pw;
                            for_tap_rows(dy, dx, [&](std::size_t o, std::size_t i, std::size_t cnt) {
                                for (std::size_t t = 0; t < cnt; ++t) orow[o + t] += wt * irow[i + t];
                            });
                        }
                }
            }
        }
        if (bias.defined())
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const T bv = bias.values()[oc];
                for (std::size_t p = 0; p < hw; ++p) ob[oc * hw + p] += bv;
            }
    }

    return make_result<T>({batch, cout, h, w}, std::move(out), {x, weight, bias},
                          [=](Node<T>& n) {
        T* dx = input_grad(n, 0);
        T* dw = input_grad(n, 1);
        T* db = input_grad(n, 2);
        const T* xv = input_value(n, 0);
        const T* wv = input_value(n, 1);
        for (std::size_t b = 0; b < batch; ++b) {
            const T* gb = n.grad.data() + b * cout * hw;
            const T* ib = xv + b * cin * hw;
            if (db)
                for (std::size_t oc = 0; oc < cout; ++oc)
                    for (std::size_t p = 0; p < hw; ++p) db[oc] += gb[oc * hw + p];
            if (pointwise) {
                if (dx) gemm<T>(true, false, cin, hw, cout, T(1), wv, cin, gb, hw, T(1), dx + b * cin * hw, hw);
                if (dw) gemm<T>(false, true, cout, cin, hw, T(1), gb, hw, ib, hw, T(1), dw, cin);
                continue;
            }
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const std::size_t g = oc / opg;
                const T* grow = gb + oc * hw;
                for (std::size_t icl = 0; icl < cpg; ++icl) {
                    const std::size_t ic = g * cpg + icl;
                    const T* irow = ib + ic * hw;
                    T* dxrow = dx ? dx + (b * cin + ic) * hw : nullptr;
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::size_t widx = ((oc * cpg + icl) * kh + ky) * kw + kx;
                            const T wt = wv[widx];
                            const auto dy = static_cast<std::ptrdiff_t>(ky * dil) - ph;
                            const auto dxs = static_cast<std::ptrdiff_t>(kx * dil) - pw;
                            T acc = T(0);
                            for_tap_rows(dy, dxs, [&](std::size_t o, std::size_t i, std::size_t cnt) {
                                for (std::size_t t = 0; t < cnt; ++t) {
                                    if (dxrow) dxrow[i + t] += wt * grow[o + t];
                                    acc += grow[o + t] * irow[i + t];
                                }
                            });
                            if (dw) dw[widx] += acc;
                        }
                }
            }
        }
    });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) shape_error("concat_channels", "no inputs");
    const std::size_t batch = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3), hw = h * w;
    std::vector<std::size_t> chans;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 4 || p.dim(0) != batch || p.dim(2) != h || p.dim(3) != w)
            shape_error("concat_channels", "incompatible part " + shape_str(p.shape()));
        chans.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<T> out(batch * total * hw);
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            std::copy_n(parts[k].values().data() + b * chans[k] * hw, chans[k] * hw, out.data() + (b * total + off) * hw);
            off += chans[k];
        }
    }
    return make_result<T>({batch, total, h, w}, std::move(out), parts, [batch, total, hw, chans](Node<T>& n) {
        for (std::size_t b = 0; b < batch; ++b) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < chans.size(); ++k) {
                if (T* g = input_grad(n, k)) {
                    const T* src = n.grad.data() + (b * total + off) * hw;
                    T* dst = g + b * chans[k] * hw;
                    for (std::size_t i = 0; i < chans[k] * hw; ++i) dst[i] += src[i];
                }
                off += chans[k];
            }
        }
    });
}

template <typename T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                        bool train) {
    if (x.rank() != 4) shape_error("batch_norm_2d", "expects [N, C, H, W]");
    const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), count = batch * hw;
    if (state.running_mean.size() != c || state.running_var.size() != c)
        shape_error("batch_norm_2d", "running statistics sized for a different channel count");
    if ((gamma.defined() && gamma.numel() != c) || (beta.defined() && beta.numel() != c))
        shape_error("batch_norm_2d", "affine parameters must have one entry per channel");

    const auto xv = x.values();
    std::vector<double> mean(c, 0.0), invstd(c);
    std::vector<T> xhat(x.numel()), y(x.numel());
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mu, var;
        if (train) {
            double s = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < hw; ++p) s += xv[(b * c + ch) * hw + p];
            mu = s / static_cast<double>(count);
            double v = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < hw; ++p) {
                    const double d = xv[(b * c + ch) * hw + p] - mu;
                    v += d * d;
                }
            var = v / static_cast<double>(count);
            const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
            state.running_mean[ch] = static_cast<T>((1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu);
            state.running_var[ch] = static_cast<T>((1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased);
        } else {
            mu = state.running_mean[ch];
            var = state.running_var[ch];
        }
        invstd[ch] = 1.0 / std::sqrt(var + state.eps);
        const double gm = gamma.defined() ? static_cast<double>(gamma.values()[ch]) : 1.0;
        const double bt = beta.defined() ? static_cast<double>(beta.values()[ch]) : 0.0;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t i = (b * c + ch) * hw + p;
                const double hn = (xv[i] - mu) * invstd[ch];
                xhat[i] = static_cast<T>(hn);
                y[i] = static_cast<T>(gm * hn + bt);
            }
    }
    return make_result<T>(x.shape(), std::move(y), {x, gamma, beta},
                          [=, xhat = std::move(xhat), invstd = std::move(invstd)](Node<T>& n) {
        T* dx = input_grad(n, 0);
        T* dg = input_grad(n, 1);
        T* db = input_grad(n, 2);
        const T* gv = n.inputs[1] ? n.inputs[1]->value.data() : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double gm = gv ? static_cast<double>(gv[ch]) : 1.0;
            double sum_dy = 0.0, sum_dy_h = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < hw; ++p) {
                    const std::size_t i = (b * c + ch) * hw + p;
                    sum_dy += n.grad[i];
                    sum_dy_h += static_cast<double>(n.grad[i]) * xhat[i];
                }
            if (dg) dg[ch] += static_cast<T>(sum_dy_h);
            if (db) db[ch] += static_cast<T>(sum_dy);
            if (!dx) continue;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t p = 0; p < hw; ++p) {
                    const std::size_t i = (b * c + ch) * hw + p;
                    double g;
                    if (train) {
                        g = gm * invstd[ch] / static_cast<double>(count) *
                            (static_cast<double>(count) * n.grad[i] - sum_dy - xhat[i] * sum_dy_h);
                    } else {
                        g = gm * invstd[ch] * n.grad[i];
                    }
                    dx[i] += static_cast<T>(g);
                }
        }
    });
}

namespace {

template <typename T>
struct AttentionShape {
    std::size_t tokens, model_dim, heads, head_dim;
};

template <typename T>
AttentionShape<T> check_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>* v, std::size_t heads,
                                  const AttentionWindows& aw) {
    if (q.rank() != 2 || q.shape() != k.shape() || (v && v->shape() != q.shape()))
        shape_error("window_attention", "q, k, v must share a [N, D] shape");
    const std::size_t n = q.dim(0), dm = q.dim(1);
    if (heads == 0 || dm % heads) shape_error("window_attention", "model dim not divisible by heads");
    if (aw.lambda < 0.0) shape_error("window_attention", "lambda must be non-negative");
    if (aw.has_penalty() && aw.distance.size() != aw.windows.size())
        shape_error("window_attention", "one distance matrix per window required");
    for (std::size_t w = 0; w < aw.windows.size(); ++w) {
        const std::size_t len = aw.windows[w].size();
        for (std::size_t idx : aw.windows[w])
            if (idx >= n) shape_error("window_attention", "window token index out of range");
        if (aw.has_penalty() && aw.distance[w].size() != len * len)
            shape_error("window_attention", "distance matrix does not match window size");
    }
    return {n, dm, heads, dm / heads};
}

// Fills probs (L x L) for one window/head from gathered Q and K.
template <typename T>
void attention_probs(const T* qw, const T* kw, std::size_t len, std::size_t hd, const std::vector<double>* dist,
                     double lambda, T* probs) {
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    gemm<T>(false, true, len, len, hd, scale, qw, hd, kw, hd, T(0), probs, len);
    if (dist)
        for (std::size_t i = 0; i < len * len; ++i) probs[i] -= static_cast<T>(lambda * (*dist)[i]);
    for (std::size_t i = 0; i < len; ++i) softmax_inplace(probs + i * len, len);
}

template <typename T>
void gather(const T* src, std::size_t ld, std::size_t col, std::size_t hd, const std::vector<std::size_t>& idx, T* dst) {
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(src + idx[i] * ld + col, hd, dst + i * hd);
}

}  // namespace

template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                           const AttentionWindows& aw) {
    const auto s = check_attention(q, k, &v, heads, aw);
    const std::size_t dm = s.model_dim, hd = s.head_dim;
    std::vector<T> out(q.numel(), T(0));
    // Saved probabilities, window-major then head.
    std::vector<std::vector<T>> saved;
    saved.reserve(aw.windows.size() * heads);
    std::vector<T> qw, kw, vw, ow;
    for (std::size_t w = 0; w < aw.windows.size(); ++w) {
        const auto& idx = aw.windows[w];
        const std::size_t len = idx.size();
        qw.resize(len * hd);
        kw.resize(len * hd);
        vw.resize(len * hd);
        ow.resize(len * hd);
        for (std::size_t h = 0; h < heads; ++h) {
            gather(q.values().data(), dm, h * hd, hd, idx, qw.data());
            gather(k.values().data(), dm, h * hd, hd, idx, kw.data());
            gather(v.values().data(), dm, h * hd, hd, idx, vw.data());
            std::vector<T> p(len * len);
            attention_probs(qw.data(), kw.data(), len, hd, aw.has_penalty() ? &aw.distance[w] : nullptr, aw.lambda, p.data());
            gemm<T>(false, false, len, hd, len, T(1), p.data(), len, vw.data(), hd, T(0), ow.data(), hd);
            for (std::size_t i = 0; i < len; ++i) std::copy_n(ow.data() + i * hd, hd, out.data() + idx[i] * dm + h * hd);
            saved.push_back(std::move(p));
        }
    }
    return make_result<T>(q.shape(), std::move(out), {q, k, v},
                          [heads, hd, dm, windows = aw.windows, saved = std::move(saved)](Node<T>& n) {
        T* dq = input_grad(n, 0);
        T* dk = input_grad(n, 1);
        T* dv = input_grad(n, 2);
        const T* qv = input_value(n, 0);
        const T* kv = input_value(n, 1);
        const T* vv = input_value(n, 2);
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
        std::vector<T> qw, kw, vw, gw, dpw, tmp;
        std::size_t slot = 0;
        for (const auto& idx : windows) {
            const std::size_t len = idx.size();
            qw.resize(len * hd);
            kw.resize(len * hd);
            vw.resize(len * hd);
            gw.resize(len * hd);
            tmp.resize(len * hd);
            dpw.resize(len * len);
            for (std::size_t h = 0; h < heads; ++h, ++slot) {
                const std::vector<T>& p = saved[slot];
                gather(n.grad.data(), dm, h * hd, hd, idx, gw.data());
                gather(vv, dm, h * hd, hd, idx, vw.data());
                if (dv) {
                    gemm<T>(true, false, len, hd, len, T(1), p.data(), len, gw.data(), hd, T(0), tmp.data(), hd);
                    for (std::size_t i = 0; i < len; ++i)
                        for (std::size_t j = 0; j < hd; ++j) dv[idx[i] * dm + h * hd + j] += tmp[i * hd + j];
                }
                if (!dq && !dk) continue;
                gemm<T>(false, true, len, len, hd, T(1), gw.data(), hd, vw.data(), hd, T(0), dpw.data(), len);
                for (std::size_t i = 0; i < len; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) dot += static_cast<double>(dpw[i * len + j]) * p[i * len + j];
                    for (std::size_t j = 0; j < len; ++j)
                        dpw[i * len + j] = static_cast<T>(p[i * len + j] * (dpw[i * len + j] - dot));
                }
                gather(qv, dm, h * hd, hd, idx, qw.data());
                gather(kv, dm, h * hd, hd, idx, kw.data());
                if (dq) {
                    gemm<T>(false, false, len, hd, len, scale, dpw.data(), len, kw.data(), hd, T(0), tmp.data(), hd);
                    for (std::size_t i = 0; i < len; ++i)
                        for (std::size_t j = 0; j < hd; ++j) dq[idx[i] * dm + h * hd + j] += tmp[i * hd + j];
                }
                if (dk) {
                    gemm<T>(true, false, len, hd, len, scale, dpw.data(), len, qw.data(), hd, T(0), tmp.data(), hd);
                    for (std::size_t i = 0; i < len; ++i)
                        for (std::size_t j = 0; j < hd; ++j) dk[idx[i] * dm + h * hd + j] += tmp[i * hd + j];
                }
            }
        }
    });
}

template <typename T>
std::vector<std::vector<T>> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads,
                                              const AttentionWindows& aw) {
    const auto s = check_attention<T>(q, k, nullptr, heads, aw);
    std::vector<std::vector<T>> out;
    std::vector<T> qw, kw;
    for (std::size_t w = 0; w < aw.windows.size(); ++w) {
        const auto& idx = aw.windows[w];
        const std::size_t len = idx.size();
        qw.resize(len * s.head_dim);
        kw.resize(len * s.head_dim);
        for (std::size_t h = 0; h < heads; ++h) {
            gather(q.values().data(), s.model_dim, h * s.head_dim, s.head_dim, idx, qw.data());
            gather(k.values().data(), s.model_dim, h * s.head_dim, s.head_dim, idx, kw.data());
            std::vector<T> p(len * len);
            attention_probs(qw.data(), kw.data(), len, s.head_dim, aw.has_penalty() ? &aw.distance[w] : nullptr,
                            aw.lambda, p.data());
            out.push_back(std::move(p));
        }
    }
    return out;
}

template <typename T>
Tensor<T> weighted_pixel_loss(const Tensor<T>& pred, std::span<const T> target, std::span<const double> weights,
                              std::size_t pixels, std::size_t channels, PixelLayout layout) {
    if (pred.numel() != pixels * channels || target.size() != pred.numel() || weights.size() != pixels)
        shape_error("weighted_pixel_loss", "prediction, target and weights disagree in size");
    auto index = [=](std::size_t p, std::size_t c) {
        return layout == PixelLayout::ChannelMajor ? c * pixels + p : p * channels + c;
    };
    const auto pv = pred.values();
    double total = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) {
        if (weights[p] == 0.0) continue;
        double e = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
            const double d = static_cast<double>(pv[index(p, c)]) - static_cast<double>(target[index(p, c)]);
            e += d * d;
        }
        total += weights[p] * e;
    }
    total /= static_cast<double>(pixels);
    return make_result<T>({1}, {static_cast<T>(total)}, {pred},
                          [=, tgt = std::vector<T>(target.begin(), target.end()),
                           w = std::vector<double>(weights.begin(), weights.end())](Node<T>& n) {
        T* dp = input_grad(n, 0);
        const T* pv = input_value(n, 0);
        const double g = static_cast<double>(n.grad[0]) * 2.0 / static_cast<double>(pixels);
        for (std::size_t p = 0; p < pixels; ++p) {
            if (w[p] == 0.0) continue;
            const double coef = g * w[p];
            for (std::size_t c = 0; c < channels; ++c) {
                const std::size_t i = index(p, c);
                dp[i] += static_cast<T>(coef * (static_cast<double>(pv[i]) - static_cast<double>(tgt[i])));
            }
        }
    });
}

template <typename T>
Tensor<T> dot_constant(const Tensor<T>& x, std::span<const T> coeffs) {
    if (coeffs.size() != x.numel()) shape_error("dot_constant", "coefficient count mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < coeffs.size(); ++i) s += static_cast<double>(coeffs[i]) * x.values()[i];
    return make_result<T>({1}, {static_cast<T>(s)}, {x}, [c = std::vector<T>(coeffs.begin(), coeffs.end())](Node<T>& n) {
        T* dx = input_grad(n, 0);
        for (std::size_t i = 0; i < c.size(); ++i) dx[i] += n.grad[0] * c[i];
    });
}

std::vector<double> sinusoidal_embedding(double t, std::size_t dim) {
    if (dim == 0 || dim % 2) throw std::invalid_argument("sinusoidal_embedding: dim must be even and positive");
    const std::size_t half = dim / 2;
    std::vector<double> out(dim);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = std::sin(t * freq);
        out[half + i] = std::cos(t * freq);
    }
    return out;
}

std::vector<double> sinusoidal_embedding_2d(std::size_t row, std::size_t col, std::size_t dim) {
    if (dim % 4) throw std::invalid_argument("sinusoidal_embedding_2d: dim must be a multiple of 4");
    std::vector<double> out = sinusoidal_embedding(static_cast<double>(row), dim / 2);
    const std::vector<double> c = sinusoidal_embedding(static_cast<double>(col), dim / 2);
    out.insert(out.end(), c.begin(), c.end());
    return out;
}

GradCheckReport gradient_check(const std::function<Tensor<double>()>& loss_fn, const std::vector<Tensor<double>>& inputs,
                               double h, std::size_t max_per_input, std::uint64_t seed) {
    for (auto t : inputs) t.zero_grad();
    backward(loss_fn());
    std::vector<std::vector<double>> analytic;
    for (const auto& t : inputs) {
        std::vector<double> g(t.numel(), 0.0);
        if (!t.grad().empty()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
        analytic.push_back(std::move(g));
    }

    GradCheckReport rep;
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor<double> t = inputs[k];
        std::vector<std::size_t> elems(t.numel());
        std::iota(elems.begin(), elems.end(), 0);
        if (max_per_input > 0 && elems.size() > max_per_input) {
            std::shuffle(elems.begin(), elems.end(), rng);
            elems.resize(max_per_input);
        }
        for (std::size_t e : elems) {
            double& v = t.mutable_values()[e];
            const double orig = v;
            v = orig + h;
            const double fp = loss_fn().item();
            v = orig - h;
            const double fm = loss_fn().item();
            v = orig;
            const double num = (fp - fm) / (2.0 * h);
            const double a = analytic[k][e];
            const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-7});
            ++rep.checked;
            if (rel > rep.max_rel_error) rep = {rel, k, e, a, num, rep.checked};
        }
    }
    for (auto t : inputs) t.zero_grad();
    return rep;
}

// ---- explicit instantiations -------------------------------------------

#define R2VD_AD_INSTANTIATE(T)                                                                                     \
    template class Tensor<T>;                                                                                      \
    template void backward<T>(const Tensor<T>&);                                                                   \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> silu<T>(const Tensor<T>&);                                                                  \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);               \
    template Tensor<T> modulate<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> gated_add<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> columns<T>(const Tensor<T>&, std::size_t, std::size_t);                                     \
    template Tensor<T> softmax_last_dim<T>(const Tensor<T>&, std::span<const T>);                                  \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dSpec);                \
    template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                                          \
    template Tensor<T> batch_norm_2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&, \
                                        bool);                                                                     \
    template Tensor<T> window_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,      \
                                           const AttentionWindows&);                                               \
    template std::vector<std::vector<T>> attention_weights<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                                                              const AttentionWindows&);                            \
    template Tensor<T> weighted_pixel_loss<T>(const Tensor<T>&, std::span<const T>, std::span<const double>,       \
                                              std::size_t, std::size_t, PixelLayout);                              \
    template Tensor<T> dot_constant<T>(const Tensor<T>&, std::span<const T>);

R2VD_AD_INSTANTIATE(float)
R2VD_AD_INSTANTIATE(double)

#undef R2VD_AD_INSTANTIATE

}  // namespace r2vd::ad
