#include "msti/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace msti {

template <typename T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    if (root.value().size() != 1) throw Error("backward root must be a scalar, got " + root.shape().str());

    // Iterative post-order DFS yields a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior grads start from zero on every sweep; leaves accumulate until zeroed.
    for (Node<T>* n : order) {
        if (n->backward_fn) {
            n->ensure_grad().fill(T(0));
        } else {
            n->ensure_grad();
        }
    }
    root.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

namespace ops {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

void require_same(const Shape& a, const Shape& b, const char* op) {
    if (!(a == b)) throw Error(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

struct ConvGeometry {
    int cin, h, w, k, stride, pad, ho, wo;
};

// Output columns [lo, hi) read inside the input row for kernel column kx.
inline void valid_columns(const ConvGeometry& g, int kx, int& lo, int& hi) {
    const int off = kx - g.pad;
    lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
    hi = (g.w - 1 - off) / g.stride + 1;
    hi = std::clamp(hi, lo, g.wo);
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::size_t out_plane = static_cast<std::size_t>(g.ho) * g.wo;
    for (int ci = 0; ci < g.cin; ++ci) {
        const T* xc = x + static_cast<std::size_t>(ci) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                T* row = col + (static_cast<std::size_t>(ci) * g.k * g.k + ky * g.k + kx) * out_plane;
                int lo, hi;
                valid_columns(g, kx, lo, hi);
                const int off = kx - g.pad;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad;
                    T* dst = row + static_cast<std::size_t>(oy) * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* src = xc + static_cast<std::size_t>(iy) * g.w + off;
                    std::fill(dst, dst + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + lo, src + hi, dst + lo);
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
                    }
                    std::fill(dst + hi, dst + g.wo, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
    const std::size_t out_plane = static_cast<std::size_t>(g.ho) * g.wo;
    for (int ci = 0; ci < g.cin; ++ci) {
        T* dxc = dx + static_cast<std::size_t>(ci) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const T* row = col + (static_cast<std::size_t>(ci) * g.k * g.k + ky * g.k + kx) * out_plane;
                int lo, hi;
                valid_columns(g, kx, lo, hi);
                const int off = kx - g.pad;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad;
                    if (iy < 0 || iy >= g.h) continue;
                    const T* src = row + static_cast<std::size_t>(oy) * g.wo;
                    T* dst = dxc + static_cast<std::size_t>(iy) * g.w + off;
                    if (g.stride == 1) {
                        for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
T dot(const T* a, const T* b, int n) {
    T s = 0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
T norm(const T* a, int n) {
    return std::sqrt(dot(a, a, n));
}

// Cosine with guarded denominator and its partials:
// dcos/da = b/den - cos * a / |a|^2 (second term only when the guard is inactive).
template <typename T>
struct CosineTerms {
    T cos, den, na, nb;
    bool guarded;
};

template <typename T>
CosineTerms<T> cosine_terms(const T* a, const T* b, int n) {
    CosineTerms<T> c{};
    c.na = norm(a, n);
    c.nb = norm(b, n);
    const T prod = c.na * c.nb;
    c.guarded = prod < static_cast<T>(kCosineEps);
    c.den = c.guarded ? static_cast<T>(kCosineEps) : prod;
    c.cos = dot(a, b, n) / c.den;
    return c;
}

// Accumulates g * dcos/da into da and g * dcos/db into db (either may be null).
template <typename T>
void cosine_backward(const T* a, const T* b, int n, const CosineTerms<T>& c, T g, T* da, T* db) {
    if (g == T(0)) return;
    const T inv_den = g / c.den;
    if (c.guarded) {
        for (int i = 0; i < n; ++i) {
            if (da) da[i] += inv_den * b[i];
            if (db) db[i] += inv_den * a[i];
        }
        return;
    }
    const T ca = g * c.cos / (c.na * c.na);
    const T cb = g * c.cos / (c.nb * c.nb);
    for (int i = 0; i < n; ++i) {
        if (da) da[i] += inv_den * b[i] - ca * a[i];
        if (db) db[i] += inv_den * a[i] - cb * b[i];
    }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride) {
    const Shape xs = x.shape();
    const Shape ws = weight.shape();
    if (ws.h != ws.w || (ws.h != 1 && ws.h != 3)) throw Error("conv2d: unsupported kernel " + ws.str());
    if (ws.c != xs.c) {
        throw Error("conv2d: input channels " + std::to_string(xs.c) + " do not match weight " + ws.str());
    }
    if (bias.defined() && bias.value().size() != static_cast<std::size_t>(ws.n)) {
        throw Error("conv2d: bias size does not match output channels");
    }
    ConvGeometry g{xs.c, xs.h, xs.w, ws.h, stride, ws.h / 2, 0, 0};
    g.ho = (g.h + 2 * g.pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * g.pad - g.k) / stride + 1;
    const int cout = ws.n;
    const int kdim = g.cin * g.k * g.k;
    const int out_plane = g.ho * g.wo;
    const bool direct = g.k == 1 && stride == 1;

    Tensor<T> out(Shape{xs.n, cout, g.ho, g.wo});
    std::vector<T> col(direct ? 0 : static_cast<std::size_t>(kdim) * out_plane);
    ConstMatMap<T> wm(weight.value().data(), cout, kdim);
    for (int n = 0; n < xs.n; ++n) {
        const T* xn = x.value().data() + x.value().index(n, 0, 0, 0);
        if (!direct) im2col(xn, g, col.data());
        ConstMatMap<T> cm(direct ? xn : col.data(), kdim, out_plane);
        MatMap<T> om(out.data() + out.index(n, 0, 0, 0), cout, out_plane);
        om.noalias() = wm * cm;
        if (bias.defined()) {
            for (int co = 0; co < cout; ++co) om.row(co).array() += bias.value()[co];
        }
    }

    std::vector<Var<T>> parents{x, weight};
    if (bias.defined()) parents.push_back(bias);
    return make_op<T>(std::move(out), parents, [g, cout, kdim, out_plane, direct](Node<T>& self) {
        Node<T>& xn = self.parent(0);
        Node<T>& wn = self.parent(1);
        const bool has_bias = self.parents.size() > 2;
        const Shape xs = xn.value.shape();
        std::vector<T> col(direct ? 0 : static_cast<std::size_t>(kdim) * out_plane);
        std::vector<T> dcol(static_cast<std::size_t>(kdim) * out_plane);
        ConstMatMap<T> wm(wn.value.data(), cout, kdim);
        for (int n = 0; n < xs.n; ++n) {
            ConstMatMap<T> dom(self.grad.data() + self.grad.index(n, 0, 0, 0), cout, out_plane);
            const T* xd = xn.value.data() + xn.value.index(n, 0, 0, 0);
            if (wn.requires_grad) {
                if (!direct) im2col(xd, g, col.data());
                ConstMatMap<T> cm(direct ? xd : col.data(), kdim, out_plane);
                MatMap<T> dwm(wn.ensure_grad().data(), cout, kdim);
                dwm.noalias() += dom * cm.transpose();
            }
            if (has_bias && self.parent(2).requires_grad) {
                Tensor<T>& db = self.parent(2).ensure_grad();
                // Plain loop: Eigen's vectorized sum depends on pointer alignment, which breaks run-to-run determinism.
                for (int co = 0; co < cout; ++co) {
                    const T* row = dom.data() + static_cast<std::size_t>(co) * out_plane;
                    T acc = T(0);
                    for (int i = 0; i < out_plane; ++i) acc += row[i];
                    db[co] += acc;
                }
            }
            if (xn.requires_grad) {
                T* dx = xn.ensure_grad().data() + xn.grad.index(n, 0, 0, 0);
                if (direct) {
                    MatMap<T> dxm(dx, kdim, out_plane);
                    dxm.noalias() += wm.transpose() * dom;
                } else {
                    MatMap<T> dcm(dcol.data(), kdim, out_plane);
                    dcm.noalias() = wm.transpose() * dom;
                    col2im(dcol.data(), g, dx);
                }
            }
        }
    });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats,
                  bool training, T momentum, T eps) {
    const Shape s = x.shape();
    if (gamma.value().size() != static_cast<std::size_t>(s.c) ||
        beta.value().size() != static_cast<std::size_t>(s.c)) {
        throw Error("batch_norm: affine parameters do not match channels of " + s.str());
    }
    const std::size_t plane = s.plane();
    const std::size_t count = plane * s.n;
    std::vector<T> mean(s.c), invstd(s.c);
    const Tensor<T>& xv = x.value();
    if (training) {
        for (int c = 0; c < s.c; ++c) {
            T sum = 0;
            for (int n = 0; n < s.n; ++n)
                for (T v : xv.plane(n, c)) sum += v;
            const T m = sum / static_cast<T>(count);
            T sq = 0;
            for (int n = 0; n < s.n; ++n)
                for (T v : xv.plane(n, c)) sq += (v - m) * (v - m);
            const T var = sq / static_cast<T>(count);
            mean[c] = m;
            invstd[c] = T(1) / std::sqrt(var + eps);
            const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
            stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * m;
            stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < s.c; ++c) {
            mean[c] = stats.running_mean[c];
            invstd[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
        }
    }
    Tensor<T> out(s);
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const T a = gamma.value()[c] * invstd[c];
            const T b = beta.value()[c] - a * mean[c];
            auto src = xv.plane(n, c);
            auto dst = out.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) dst[i] = a * src[i] + b;
        }
    }
    return make_op<T>(std::move(out), {x, gamma, beta},
                      [mean = std::move(mean), invstd = std::move(invstd), training, count](Node<T>& self) {
        Node<T>& xn = self.parent(0);
        Node<T>& gn = self.parent(1);
        Node<T>& bn = self.parent(2);
        const Shape s = xn.value.shape();
        for (int c = 0; c < s.c; ++c) {
            T sum_dy = 0, sum_dy_xhat = 0;
            for (int n = 0; n < s.n; ++n) {
                auto dy = self.grad.plane(n, c);
                auto xv = xn.value.plane(n, c);
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * (xv[i] - mean[c]) * invstd[c];
                }
            }
            if (gn.requires_grad) gn.ensure_grad()[c] += sum_dy_xhat;
            if (bn.requires_grad) bn.ensure_grad()[c] += sum_dy;
            if (!xn.requires_grad) continue;
            const T g = gn.value[c];
            const T m = static_cast<T>(count);
            for (int n = 0; n < s.n; ++n) {
                auto dy = self.grad.plane(n, c);
                auto xv = xn.value.plane(n, c);
                auto dx = xn.ensure_grad().plane(n, c);
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    if (training) {
                        const T xhat = (xv[i] - mean[c]) * invstd[c];
                        dx[i] += g * invstd[c] * (dy[i] - sum_dy / m - xhat * sum_dy_xhat / m);
                    } else {
                        dx[i] += g * invstd[c] * dy[i];
                    }
                }
            }
        }
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        Node<T>& xn = self.parent(0);
        auto& dx = xn.ensure_grad();
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (xn.value[i] > T(0)) dx[i] += self.grad[i];
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-xv[i]));
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        auto& dx = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < dx.size(); ++i) {
            const T y = self.value[i];
            dx[i] += self.grad[i] * y * (T(1) - y);
        }
    });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        auto& dx = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < dx.size(); ++i) {
            const T y = self.value[i];
            dx[i] += self.grad[i] * (T(1) - y * y);
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            Node<T>& pn = self.parent(p);
            if (!pn.requires_grad) continue;
            auto& d = pn.ensure_grad();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>& an = self.parent(0);
        Node<T>& bn = self.parent(1);
        if (an.requires_grad) {
            auto& d = an.ensure_grad();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * bn.value[i];
        }
        if (bn.requires_grad) {
            auto& d = bn.ensure_grad();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * an.value[i];
        }
    });
}

template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& gate) {
    const Shape s = x.shape();
    const Shape gs = gate.shape();
    if (gs.n != s.n || gs.c != s.c || gs.h != 1 || gs.w != 1) {
        throw Error("mul_channel: gate " + gs.str() + " does not broadcast over " + s.str());
    }
    Tensor<T> out(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const T g = gate.value().at(n, c, 0, 0);
            auto src = x.value().plane(n, c);
            auto dst = out.plane(n, c);
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * g;
        }
    return make_op<T>(std::move(out), {x, gate}, [](Node<T>& self) {
        Node<T>& xn = self.parent(0);
        Node<T>& gn = self.parent(1);
        const Shape s = xn.value.shape();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                auto dy = self.grad.plane(n, c);
                auto xv = xn.value.plane(n, c);
                const T g = gn.value.at(n, c, 0, 0);
                if (xn.requires_grad) {
                    auto dx = xn.ensure_grad().plane(n, c);
                    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * g;
                }
                if (gn.requires_grad) {
                    T acc = 0;
                    for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * xv[i];
                    gn.ensure_grad().at(n, c, 0, 0) += acc;
                }
            }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * s;
    return make_op<T>(std::move(out), {x}, [s](Node<T>& self) {
        auto& d = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * s;
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const Shape as = a.shape();
    const Shape bs = b.shape();
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
        throw Error("concat_channels: spatial mismatch " + as.str() + " vs " + bs.str());
    }
    Tensor<T> out(Shape{as.n, as.c + bs.c, as.h, as.w});
    const std::size_t pa = as.c * as.plane();
    const std::size_t pb = bs.c * bs.plane();
    for (int n = 0; n < as.n; ++n) {
        T* dst = out.data() + out.index(n, 0, 0, 0);
        std::copy_n(a.value().data() + n * pa, pa, dst);
        std::copy_n(b.value().data() + n * pb, pb, dst + pa);
    }
    return make_op<T>(std::move(out), {a, b}, [pa, pb](Node<T>& self) {
        Node<T>& an = self.parent(0);
        Node<T>& bn = self.parent(1);
        const int batch = self.value.shape().n;
        for (int n = 0; n < batch; ++n) {
            const T* src = self.grad.data() + n * (pa + pb);
            if (an.requires_grad) {
                T* d = an.ensure_grad().data() + n * pa;
                for (std::size_t i = 0; i < pa; ++i) d[i] += src[i];
            }
            if (bn.requires_grad) {
                T* d = bn.ensure_grad().data() + n * pb;
                for (std::size_t i = 0; i < pb; ++i) d[i] += src[pa + i];
            }
        }
    });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    const Shape s = x.shape();
    Tensor<T> out(Shape{s.n, s.c, 1, 1});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            T sum = 0;
            for (T v : x.value().plane(n, c)) sum += v;
            out.at(n, c, 0, 0) = sum / static_cast<T>(s.plane());
        }
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        Node<T>& xn = self.parent(0);
        const Shape s = xn.value.shape();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                const T g = self.grad.at(n, c, 0, 0) / static_cast<T>(s.plane());
                for (T& d : xn.ensure_grad().plane(n, c)) d += g;
            }
    });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    const Shape s = x.shape();
    Tensor<T> out(Shape{s.n, s.c, s.h * 2, s.w * 2});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < 2 * s.h; ++y)
                for (int xx = 0; xx < 2 * s.w; ++xx) out.at(n, c, y, xx) = x.value().at(n, c, y / 2, xx / 2);
    return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
        Node<T>& xn = self.parent(0);
        const Shape s = self.value.shape();
        auto& dx = xn.ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c)
                for (int y = 0; y < s.h; ++y)
                    for (int xx = 0; xx < s.w; ++xx) dx.at(n, c, y / 2, xx / 2) += self.grad.at(n, c, y, xx);
    });
}

template <typename T>
Var<T> to_queries(const Var<T>& y) {
    const Shape s = y.shape();
    const int rows = s.n * s.h * s.w;
    Tensor<T> out(Shape{1, 1, rows, s.c});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int i = 0; i < s.h * s.w; ++i) out[(static_cast<std::size_t>(n) * s.h * s.w + i) * s.c + c] = y.value().plane(n, c)[i];
    return make_op<T>(std::move(out), {y}, [](Node<T>& self) {
        Node<T>& yn = self.parent(0);
        const Shape s = yn.value.shape();
        auto& dy = yn.ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                auto d = dy.plane(n, c);
                for (int i = 0; i < s.h * s.w; ++i) d[i] += self.grad[(static_cast<std::size_t>(n) * s.h * s.w + i) * s.c + c];
            }
    });
}

template <typename T>
Var<T> from_queries(const Var<T>& q, Shape s) {
    const Shape qs = q.shape();
    if (qs.h != s.n * s.h * s.w || qs.w != s.c) {
        throw Error("from_queries: query matrix " + qs.str() + " does not match feature " + s.str());
    }
    Tensor<T> out(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            auto d = out.plane(n, c);
            for (int i = 0; i < s.h * s.w; ++i) d[i] = q.value()[(static_cast<std::size_t>(n) * s.h * s.w + i) * s.c + c];
        }
    return make_op<T>(std::move(out), {q}, [](Node<T>& self) {
        Node<T>& qn = self.parent(0);
        const Shape s = self.value.shape();
        auto& dq = qn.ensure_grad();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                auto g = self.grad.plane(n, c);
                for (int i = 0; i < s.h * s.w; ++i) dq[(static_cast<std::size_t>(n) * s.h * s.w + i) * s.c + c] += g[i];
            }
    });
}

template <typename T>
Var<T> cosine_address(const Var<T>& queries, const Var<T>& items) {
    const Shape qs = queries.shape();
    const Shape ms = items.shape();
    if (qs.w != ms.w) {
        throw Error("cosine_address: query width " + std::to_string(qs.w) + " does not match item width " +
                    std::to_string(ms.w));
    }
    if (ms.h == 0) throw Error("cosine_address: empty memory");
    const int k_rows = qs.h, n_items = ms.h, dim = qs.w;
    Tensor<T> out(Shape{1, 1, k_rows, n_items});
    std::vector<T> logits(n_items);
    for (int k = 0; k < k_rows; ++k) {
        const T* q = queries.value().data() + static_cast<std::size_t>(k) * dim;
        T mx = -std::numeric_limits<T>::infinity();
        for (int i = 0; i < n_items; ++i) {
            logits[i] = cosine_terms(q, items.value().data() + static_cast<std::size_t>(i) * dim, dim).cos;
            mx = std::max(mx, logits[i]);
        }
        T z = 0;
        for (int i = 0; i < n_items; ++i) z += (logits[i] = std::exp(logits[i] - mx));
        for (int i = 0; i < n_items; ++i) out[static_cast<std::size_t>(k) * n_items + i] = logits[i] / z;
    }
    return make_op<T>(std::move(out), {queries, items}, [k_rows, n_items, dim](Node<T>& self) {
        Node<T>& qn = self.parent(0);
        Node<T>& mn = self.parent(1);
        T* dq = qn.requires_grad ? qn.ensure_grad().data() : nullptr;
        T* dm = mn.requires_grad ? mn.ensure_grad().data() : nullptr;
        for (int k = 0; k < k_rows; ++k) {
            const T* w = self.value.data() + static_cast<std::size_t>(k) * n_items;
            const T* dw = self.grad.data() + static_cast<std::size_t>(k) * n_items;
            T inner = 0;
            for (int i = 0; i < n_items; ++i) inner += w[i] * dw[i];
            const T* q = qn.value.data() + static_cast<std::size_t>(k) * dim;
            for (int i = 0; i < n_items; ++i) {
                const T dlogit = w[i] * (dw[i] - inner);
                const T* p = mn.value.data() + static_cast<std::size_t>(i) * dim;
                const auto terms = cosine_terms(q, p, dim);
                cosine_backward(q, p, dim, terms, dlogit, dq ? dq + static_cast<std::size_t>(k) * dim : nullptr,
                                dm ? dm + static_cast<std::size_t>(i) * dim : nullptr);
            }
        }
    });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Shape as = a.shape();
    const Shape bs = b.shape();
    if (as.n != 1 || as.c != 1 || bs.n != 1 || bs.c != 1 || as.w != bs.h) {
        throw Error("matmul: incompatible " + as.str() + " x " + bs.str());
    }
    Tensor<T> out(Shape{1, 1, as.h, bs.w});
    MatMap<T>(out.data(), as.h, bs.w).noalias() =
        ConstMatMap<T>(a.value().data(), as.h, as.w) * ConstMatMap<T>(b.value().data(), bs.h, bs.w);
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>& an = self.parent(0);
        Node<T>& bn = self.parent(1);
        const Shape as = an.value.shape();
        const Shape bs = bn.value.shape();
        ConstMatMap<T> g(self.grad.data(), as.h, bs.w);
        if (an.requires_grad) {
            MatMap<T>(an.ensure_grad().data(), as.h, as.w).noalias() +=
                g * ConstMatMap<T>(bn.value.data(), bs.h, bs.w).transpose();
        }
        if (bn.requires_grad) {
            MatMap<T>(bn.ensure_grad().data(), bs.h, bs.w).noalias() +=
                ConstMatMap<T>(an.value.data(), as.h, as.w).transpose() * g;
        }
    });
}

template <typename T>
Var<T> squared_error(const Var<T>& pred, const Var<T>& target, bool mean) {
    require_same(pred.shape(), target.shape(), "squared_error");
    T sum = 0;
    for (std::size_t i = 0; i < pred.value().size(); ++i) {
        const T d = pred.value()[i] - target.value()[i];
        sum += d * d;
    }
    const T denom = mean ? static_cast<T>(pred.value().size()) : T(1);
    return make_op<T>(Tensor<T>(Shape{}, sum / denom), {pred, target}, [denom](Node<T>& self) {
        Node<T>& pn = self.parent(0);
        Node<T>& tn = self.parent(1);
        const T g = T(2) * self.grad[0] / denom;
        for (std::size_t i = 0; i < pn.value.size(); ++i) {
            const T d = g * (pn.value[i] - tn.value[i]);
            if (pn.requires_grad) pn.ensure_grad()[i] += d;
            if (tn.requires_grad) tn.ensure_grad()[i] -= d;
        }
    });
}

template <typename T>
Var<T> row_entropy(const Var<T>& w) {
    const Shape s = w.shape();
    const int rows = s.n * s.c * s.h;
    T total = 0;
    for (std::size_t i = 0; i < w.value().size(); ++i) {
        const T v = w.value()[i];
        if (v > T(0)) total -= v * std::log(v);
    }
    return make_op<T>(Tensor<T>(Shape{}, total / static_cast<T>(rows)), {w}, [rows](Node<T>& self) {
        Node<T>& wn = self.parent(0);
        const T g = self.grad[0] / static_cast<T>(rows);
        auto& d = wn.ensure_grad();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const T v = wn.value[i];
            if (v > T(0)) d[i] -= g * (std::log(v) + T(1));
        }
    });
}

template <typename T>
Var<T> cosine_hinge(const Var<T>& a, const Var<T>& b, T delta, bool inverted) {
    require_same(a.shape(), b.shape(), "cosine_hinge");
    const Shape s = a.shape();
    const int rows = s.n * s.c * s.h;
    const int dim = s.w;
    T total = 0;
    for (int k = 0; k < rows; ++k) {
        const auto t = cosine_terms(a.value().data() + static_cast<std::size_t>(k) * dim,
                                    b.value().data() + static_cast<std::size_t>(k) * dim, dim);
        const T h = inverted ? T(1) - std::abs(t.cos) - delta : std::abs(t.cos) - delta;
        total += std::max(h, T(0));
    }
    return make_op<T>(Tensor<T>(Shape{}, total / static_cast<T>(rows)), {a, b},
                      [rows, dim, delta, inverted](Node<T>& self) {
        Node<T>& an = self.parent(0);
        Node<T>& bn = self.parent(1);
        T* da = an.requires_grad ? an.ensure_grad().data() : nullptr;
        T* db = bn.requires_grad ? bn.ensure_grad().data() : nullptr;
        const T g = self.grad[0] / static_cast<T>(rows);
        for (int k = 0; k < rows; ++k) {
            const T* av = an.value.data() + static_cast<std::size_t>(k) * dim;
            const T* bv = bn.value.data() + static_cast<std::size_t>(k) * dim;
            const auto t = cosine_terms(av, bv, dim);
            const T h = inverted ? T(1) - std::abs(t.cos) - delta : std::abs(t.cos) - delta;
            if (h <= T(0)) continue;
            const T sign = t.cos >= T(0) ? T(1) : T(-1);
            const T dcos = g * (inverted ? -sign : sign);
            cosine_backward(av, bv, dim, t, dcos, da ? da + static_cast<std::size_t>(k) * dim : nullptr,
                            db ? db + static_cast<std::size_t>(k) * dim : nullptr);
        }
    });
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
    if (terms.size() != weights.size()) throw Error("weighted_sum: terms and weights differ in length");
    T total = 0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].value().size() != 1) throw Error("weighted_sum: non-scalar term " + terms[i].shape().str());
        total += weights[i] * terms[i].value()[0];
    }
    return make_op<T>(Tensor<T>(Shape{}, total), terms, [weights](Node<T>& self) {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            Node<T>& p = self.parent(i);
            if (p.requires_grad) p.ensure_grad()[0] += weights[i] * self.grad[0];
        }
    });
}

#define MSTI_INSTANTIATE_OPS(T)                                                                        \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int);                          \
    template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormStats<T>&, bool, T, \
                               T);                                                                     \
    template Var<T> relu(const Var<T>&);                                                               \
    template Var<T> sigmoid(const Var<T>&);                                                            \
    template Var<T> tanh(const Var<T>&);                                                               \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                 \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                 \
    template Var<T> mul_channel(const Var<T>&, const Var<T>&);                                         \
    template Var<T> scale(const Var<T>&, T);                                                           \
    template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                     \
    template Var<T> global_avg_pool(const Var<T>&);                                                    \
    template Var<T> upsample_nearest2x(const Var<T>&);                                                 \
    template Var<T> to_queries(const Var<T>&);                                                         \
    template Var<T> from_queries(const Var<T>&, Shape);                                                \
    template Var<T> cosine_address(const Var<T>&, const Var<T>&);                                      \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                              \
    template Var<T> squared_error(const Var<T>&, const Var<T>&, bool);                                 \
    template Var<T> row_entropy(const Var<T>&);                                                        \
    template Var<T> cosine_hinge(const Var<T>&, const Var<T>&, T, bool);                               \
    template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&);

MSTI_INSTANTIATE_OPS(float)
MSTI_INSTANTIATE_OPS(double)

}  // namespace ops

template void backward(const Var<float>&);
template void backward(const Var<double>&);

}  // namespace msti
