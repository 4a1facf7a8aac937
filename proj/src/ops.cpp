#include "demaformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace demaformer {

namespace {

using DataPtr = std::shared_ptr<detail::TensorData>;

bool tracked(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

void record(Tape::Step step) { Tape::active()->record(std::move(step)); }

// Stable logistic; never overflows for finite input.
double sigmoid_value(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

LinearParams LinearParams::init(std::size_t in_dim, std::size_t out_dim, Rng& rng,
                                bool requires_grad) {
    DMF_CHECK(in_dim >= 1 && out_dim >= 1, "linear dimensions must be positive");
    const double bound = std::sqrt(1.0 / static_cast<double>(in_dim));
    std::vector<double> w(out_dim * in_dim);
    for (double& v : w) v = rng.uniform(-bound, bound);
    LinearParams p;
    p.weight = Tensor({out_dim, in_dim}, std::move(w), requires_grad);
    p.bias = Tensor({out_dim}, 0.0, requires_grad);
    return p;
}

LinearParams LinearParams::identity(std::size_t dim, bool requires_grad) {
    LinearParams p;
    p.weight = Tensor({dim, dim}, 0.0, requires_grad);
    for (std::size_t i = 0; i < dim; ++i) p.weight.at(i, i) = 1.0;
    p.bias = Tensor({dim}, 0.0, requires_grad);
    return p;
}

Tensor add(const Tensor& a, const Tensor& b) {
    DMF_CHECK(a.shape() == b.shape(), "add: shape mismatch");
    Tensor out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    if (tracked({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ah = a.handle(), bh = b.handle(), oh = out.handle();
        record([ah, bh, oh] {
            if (oh->grad.empty()) return;
            if (ah->requires_grad) {
                ah->ensure_grad();
                for (std::size_t i = 0; i < oh->grad.size(); ++i) ah->grad[i] += oh->grad[i];
            }
            if (bh->requires_grad) {
                bh->ensure_grad();
                for (std::size_t i = 0; i < oh->grad.size(); ++i) bh->grad[i] += oh->grad[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    DMF_CHECK(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    if (tracked({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ah = a.handle(), bh = b.handle(), oh = out.handle();
        record([ah, bh, oh] {
            if (oh->grad.empty()) return;
            if (ah->requires_grad) {
                ah->ensure_grad();
                for (std::size_t i = 0; i < oh->grad.size(); ++i) ah->grad[i] += oh->grad[i];
            }
            if (bh->requires_grad) {
                bh->ensure_grad();
                for (std::size_t i = 0; i < oh->grad.size(); ++i) bh->grad[i] -= oh->grad[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    DMF_CHECK(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor out(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    if (tracked({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ah = a.handle(), bh = b.handle(), oh = out.handle();
        record([ah, bh, oh] {
            if (oh->grad.empty()) return;
            if (ah->requires_grad) {
                ah->ensure_grad();
                for (std::size_t i = 0; i < oh->grad.size(); ++i)
                    ah->grad[i] += oh->grad[i] * bh->values[i];
            }
            if (bh->requires_grad) {
                bh->ensure_grad();
                for (std::size_t i = 0; i < oh->grad.size(); ++i)
                    bh->grad[i] += oh->grad[i] * ah->values[i];
            }
        });
    }
    return out;
}

Tensor affine(const Tensor& x, double scale, double shift) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = scale * x.at(i) + shift;
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh, scale] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < oh->grad.size(); ++i) xh->grad[i] += scale * oh->grad[i];
        });
    }
    return out;
}

Tensor absolute(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = std::fabs(x.at(i));
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < oh->grad.size(); ++i) {
                const double v = xh->values[i];
                const double s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                xh->grad[i] += s * oh->grad[i];
            }
        });
    }
    return out;
}

namespace {

Tensor sigmoid_impl(const Tensor& x, bool open_interval) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
        double s = sigmoid_value(x.at(i));
        if (open_interval) s = std::clamp(s, 1e-15, 1.0 - 1e-15);
        out.at(i) = s;
    }
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < oh->grad.size(); ++i) {
                const double s = oh->values[i];
                xh->grad[i] += s * (1.0 - s) * oh->grad[i];
            }
        });
    }
    return out;
}

}  // namespace

Tensor sigmoid(const Tensor& x) { return sigmoid_impl(x, false); }
Tensor open_sigmoid(const Tensor& x) { return sigmoid_impl(x, true); }

Tensor silu(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = x.at(i) * sigmoid_value(x.at(i));
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < oh->grad.size(); ++i) {
                const double v = xh->values[i];
                const double s = sigmoid_value(v);
                xh->grad[i] += s * (1.0 + v * (1.0 - s)) * oh->grad[i];
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = x.at(i) > 0.0 ? x.at(i) : 0.0;
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < oh->grad.size(); ++i)
                if (xh->values[i] > 0.0) xh->grad[i] += oh->grad[i];
        });
    }
    return out;
}

Tensor log_elem(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = std::log(x.at(i));
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < oh->grad.size(); ++i)
                xh->grad[i] += oh->grad[i] / xh->values[i];
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    DMF_CHECK(a.ndim() == 2 && b.ndim() == 2, "matmul: 2-d operands required");
    DMF_CHECK(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            for (std::size_t j = 0; j < m; ++j) out.at(i, j) += av * b.at(p, j);
        }
    if (tracked({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ah = a.handle(), bh = b.handle(), oh = out.handle();
        record([ah, bh, oh, n, k, m] {
            if (oh->grad.empty()) return;
            if (ah->requires_grad) {
                ah->ensure_grad();
                // dA = G * B^T
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < m; ++j)
                            acc += oh->grad[i * m + j] * bh->values[p * m + j];
                        ah->grad[i * k + p] += acc;
                    }
            }
            if (bh->requires_grad) {
                bh->ensure_grad();
                // dB = A^T * G
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = ah->values[i * k + p];
                        for (std::size_t j = 0; j < m; ++j)
                            bh->grad[p * m + j] += av * oh->grad[i * m + j];
                    }
            }
        });
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    DMF_CHECK(a.ndim() == 2 && b.ndim() == 2, "matmul_nt: 2-d operands required");
    DMF_CHECK(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(j, p);
            out.at(i, j) = acc;
        }
    if (tracked({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ah = a.handle(), bh = b.handle(), oh = out.handle();
        record([ah, bh, oh, n, k, m] {
            if (oh->grad.empty()) return;
            if (ah->requires_grad) {
                ah->ensure_grad();
                // dA = G * B
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        const double g = oh->grad[i * m + j];
                        for (std::size_t p = 0; p < k; ++p)
                            ah->grad[i * k + p] += g * bh->values[j * k + p];
                    }
            }
            if (bh->requires_grad) {
                bh->ensure_grad();
                // dB = G^T * A
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        const double g = oh->grad[i * m + j];
                        for (std::size_t p = 0; p < k; ++p)
                            bh->grad[j * k + p] += g * ah->values[i * k + p];
                    }
            }
        });
    }
    return out;
}

Tensor linear_forward(const Tensor& x, const LinearParams& p) {
    DMF_CHECK(x.ndim() == 2, "linear_forward: input must be 2-d");
    DMF_CHECK(x.cols() == p.in_dim(), "linear_forward: input dimension mismatch");
    const std::size_t n = x.rows(), din = p.in_dim(), dout = p.out_dim();
    Tensor out({n, dout});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < dout; ++o) {
            double acc = p.bias.at(o);
            for (std::size_t kk = 0; kk < din; ++kk) acc += x.at(i, kk) * p.weight.at(o, kk);
            out.at(i, o) = acc;
        }
    if (tracked({&x, &p.weight, &p.bias})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), wh = p.weight.handle(), bh = p.bias.handle(), oh = out.handle();
        record([xh, wh, bh, oh, n, din, dout] {
            if (oh->grad.empty()) return;
            if (xh->requires_grad) {
                xh->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t o = 0; o < dout; ++o) {
                        const double g = oh->grad[i * dout + o];
                        for (std::size_t kk = 0; kk < din; ++kk)
                            xh->grad[i * din + kk] += g * wh->values[o * din + kk];
                    }
            }
            if (wh->requires_grad) {
                wh->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t o = 0; o < dout; ++o) {
                        const double g = oh->grad[i * dout + o];
                        for (std::size_t kk = 0; kk < din; ++kk)
                            wh->grad[o * din + kk] += g * xh->values[i * din + kk];
                    }
            }
            if (bh->requires_grad) {
                bh->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t o = 0; o < dout; ++o) bh->grad[o] += oh->grad[i * dout + o];
            }
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    DMF_CHECK(x.ndim() == 2, "softmax_rows: input must be 2-d");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        double mx = x.at(i, 0);
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < m; ++j) out.at(i, j) /= z;
    }
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh, n, m] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j)
                    dot += oh->grad[i * m + j] * oh->values[i * m + j];
                for (std::size_t j = 0; j < m; ++j) {
                    const double p = oh->values[i * m + j];
                    xh->grad[i * m + j] += p * (oh->grad[i * m + j] - dot);
                }
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift) {
    DMF_CHECK(x.ndim() == 2, "layer_norm: input must be 2-d");
    const std::size_t n = x.rows(), d = x.cols();
    DMF_CHECK(d >= 1, "layer_norm: empty rows");
    DMF_CHECK(gain.size() == d && shift.size() == d, "layer_norm: gain/shift dimension mismatch");
    Tensor out({n, d});
    std::vector<double> inv_std(n), normalized(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x.at(i, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.at(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + kLayerNormEpsilon);
        inv_std[i] = istd;
        for (std::size_t j = 0; j < d; ++j) {
            const double y = (x.at(i, j) - mu) * istd;
            normalized[i * d + j] = y;
            out.at(i, j) = gain.at(j) * y + shift.at(j);
        }
    }
    if (tracked({&x, &gain, &shift})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), gh = gain.handle(), sh = shift.handle(), oh = out.handle();
        record([xh, gh, sh, oh, n, d, inv_std = std::move(inv_std),
                normalized = std::move(normalized)] {
            if (oh->grad.empty()) return;
            if (gh->requires_grad) gh->ensure_grad();
            if (sh->requires_grad) sh->ensure_grad();
            if (xh->requires_grad) xh->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                if (gh->requires_grad || sh->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) {
                        const double g = oh->grad[i * d + j];
                        if (gh->requires_grad) gh->grad[j] += g * normalized[i * d + j];
                        if (sh->requires_grad) sh->grad[j] += g;
                    }
                }
                if (xh->requires_grad) {
                    double mean_gy = 0.0, mean_gyy = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gy = oh->grad[i * d + j] * gh->values[j];
                        mean_gy += gy;
                        mean_gyy += gy * normalized[i * d + j];
                    }
                    mean_gy /= static_cast<double>(d);
                    mean_gyy /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gy = oh->grad[i * d + j] * gh->values[j];
                        xh->grad[i * d + j] +=
                            (gy - mean_gy - normalized[i * d + j] * mean_gyy) * inv_std[i];
                    }
                }
            }
        });
    }
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    DMF_CHECK(a.ndim() == 2 && b.ndim() == 2, "concat_rows: 2-d operands required");
    DMF_CHECK(a.cols() == b.cols(), "concat_rows: column mismatch");
    const std::size_t ra = a.rows(), rb = b.rows(), c = a.cols();
    Tensor out({ra + rb, c});
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + ra * c);
    if (tracked({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ah = a.handle(), bh = b.handle(), oh = out.handle();
        record([ah, bh, oh, ra, rb, c] {
            if (oh->grad.empty()) return;
            if (ah->requires_grad) {
                ah->ensure_grad();
                for (std::size_t i = 0; i < ra * c; ++i) ah->grad[i] += oh->grad[i];
            }
            if (bh->requires_grad) {
                bh->ensure_grad();
                for (std::size_t i = 0; i < rb * c; ++i) bh->grad[i] += oh->grad[ra * c + i];
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t row_begin, std::size_t row_end) {
    DMF_CHECK(x.ndim() == 2, "slice_rows: input must be 2-d");
    DMF_CHECK(row_begin <= row_end && row_end <= x.rows(), "slice_rows: range out of bounds");
    const std::size_t c = x.cols(), r = row_end - row_begin;
    Tensor out({r, c});
    std::copy(x.values().begin() + row_begin * c, x.values().begin() + row_end * c,
              out.values().begin());
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh, row_begin, r, c] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < r * c; ++i) xh->grad[row_begin * c + i] += oh->grad[i];
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
    DMF_CHECK(x.ndim() == 2, "gather_rows: input must be 2-d");
    const std::size_t c = x.cols();
    Tensor out({indices.size(), c});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        DMF_CHECK(indices[i] < x.rows(), "gather_rows: index out of bounds");
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(indices[i], j);
    }
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh, indices, c] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < c; ++j)
                    xh->grad[indices[i] * c + j] += oh->grad[i * c + j];
        });
    }
    return out;
}

Tensor max_pool_rows(const Tensor& x) {
    DMF_CHECK(x.ndim() == 2 && x.rows() >= 1, "max_pool_rows: nonempty 2-d input required");
    const std::size_t n = x.rows(), d = x.cols();
    Tensor out({d});
    std::vector<std::size_t> argmax(d, 0);
    for (std::size_t j = 0; j < d; ++j) {
        double best = x.at(0, j);
        for (std::size_t i = 1; i < n; ++i)
            if (x.at(i, j) > best) {
                best = x.at(i, j);
                argmax[j] = i;
            }
        out.at(j) = best;
    }
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh, argmax = std::move(argmax), d] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) xh->grad[argmax[j] * d + j] += oh->grad[j];
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.at(i);
    Tensor out = Tensor::scalar(acc);
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < xh->grad.size(); ++i) xh->grad[i] += oh->grad[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    DMF_CHECK(x.size() >= 1, "mean: empty tensor");
    const double inv_n = 1.0 / static_cast<double>(x.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.at(i);
    Tensor out = Tensor::scalar(acc * inv_n);
    if (tracked({&x})) {
        out.set_requires_grad(true);
        DataPtr xh = x.handle(), oh = out.handle();
        record([xh, oh, inv_n] {
            if (oh->grad.empty()) return;
            xh->ensure_grad();
            for (std::size_t i = 0; i < xh->grad.size(); ++i) xh->grad[i] += oh->grad[0] * inv_n;
        });
    }
    return out;
}

Tensor cosine(const Tensor& a, const Tensor& b) {
    DMF_CHECK(a.size() == b.size() && a.size() >= 1, "cosine: size mismatch");
    const std::size_t n = a.size();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += a.at(i) * b.at(i);
        na2 += a.at(i) * a.at(i);
        nb2 += b.at(i) * b.at(i);
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const bool degenerate = (na == 0.0 || nb == 0.0);
    const double raw = degenerate ? 0.0 : dot / (na * nb);
    Tensor out = Tensor::scalar(std::clamp(raw, -1.0, 1.0));
    if (tracked({&a, &b})) {
        out.set_requires_grad(true);
        DataPtr ah = a.handle(), bh = b.handle(), oh = out.handle();
        record([ah, bh, oh, n, na, nb, raw, degenerate] {
            if (oh->grad.empty() || degenerate) return;
            const double g = oh->grad[0];
            if (ah->requires_grad) {
                ah->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    ah->grad[i] +=
                        g * (bh->values[i] / (na * nb) - raw * ah->values[i] / (na * na));
            }
            if (bh->requires_grad) {
                bh->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    bh->grad[i] +=
                        g * (ah->values[i] / (na * nb) - raw * bh->values[i] / (nb * nb));
            }
        });
    }
    return out;
}

Tensor dema_scan(const Tensor& g, const Tensor& alpha, const Tensor& delta) {
    DMF_CHECK(g.ndim() == 2, "dema_scan: input must be 2-d");
    const std::size_t len = g.rows(), d = g.cols();
    DMF_CHECK(len >= 1, "dema_scan: empty sequence");
    DMF_CHECK(alpha.size() == d, "dema_scan: alpha dimension mismatch");
    const bool damped = delta.defined();
    if (damped) DMF_CHECK(delta.size() == d, "dema_scan: delta dimension mismatch");

    // decay = 1 - alpha (.) delta
    std::vector<double> decay(d);
    for (std::size_t j = 0; j < d; ++j)
        decay[j] = 1.0 - alpha.at(j) * (damped ? delta.at(j) : 1.0);

    Tensor out({len, d});
    for (std::size_t j = 0; j < d; ++j) {
        double l = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            l = alpha.at(j) * g.at(i, j) + decay[j] * l;
            out.at(i, j) = l;
        }
    }

    const Tensor* maybe_delta = damped ? &delta : nullptr;
    if ((maybe_delta && tracked({&g, &alpha, maybe_delta})) ||
        (!maybe_delta && tracked({&g, &alpha}))) {
        out.set_requires_grad(true);
        DataPtr gh = g.handle(), ah = alpha.handle(), oh = out.handle();
        DataPtr dh = damped ? delta.handle() : nullptr;
        record([gh, ah, dh, oh, len, d, decay = std::move(decay)] {
            if (oh->grad.empty()) return;
            if (gh->requires_grad) gh->ensure_grad();
            if (ah->requires_grad) ah->ensure_grad();
            if (dh && dh->requires_grad) dh->ensure_grad();
            // Adjoint of the linear recurrence: run the suffix accumulation
            //   s_i = dL/dl_i + decay (.) s_{i+1}
            // backwards; then dg_i = alpha (.) s_i,
            // dalpha = sum_i s_i (.) (g_i - delta (.) l_{i-1}),
            // ddelta = -alpha (.) sum_i s_i (.) l_{i-1}.
            for (std::size_t j = 0; j < d; ++j) {
                const double a = ah->values[j];
                double s = 0.0;
                double acc_sg = 0.0;   // sum s_i * g_i
                double acc_sl = 0.0;   // sum s_i * l_{i-1}
                for (std::size_t i = len; i-- > 0;) {
                    s = oh->grad[i * d + j] + decay[j] * s;
                    const double l_prev = (i == 0) ? 0.0 : oh->values[(i - 1) * d + j];
                    acc_sg += s * gh->values[i * d + j];
                    acc_sl += s * l_prev;
                    if (gh->requires_grad) gh->grad[i * d + j] += a * s;
                }
                const double dl = dh ? dh->values[j] : 1.0;
                if (ah->requires_grad) ah->grad[j] += acc_sg - dl * acc_sl;
                if (dh && dh->requires_grad) dh->grad[j] += -a * acc_sl;
            }
        });
    }
    return out;
}

}  // namespace demaformer
