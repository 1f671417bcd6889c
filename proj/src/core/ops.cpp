#include "oscar/core/ops.hpp"

#include <algorithm>
#include <cmath>

namespace oscar {

namespace {

Var finish(Tensor out, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(out);
    bool rg = false;
    if (grad_enabled()) {
        for (const auto& p : parents) rg = rg || p->requires_grad;
    }
    if (rg) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) +
                         " vs " + shape_str(b->value.shape()));
}

// decompose shape around an axis: numel = outer * n * inner
void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n,
                std::size_t& inner) {
    if (axis >= s.size()) throw ShapeError("axis out of range");
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

// ---------------- shape / movement ----------------

Var reshape(const Var& x, Shape s) {
    Tensor out = x->value.reshaped(std::move(s));
    Shape orig = x->value.shape();
    return finish(std::move(out), {x}, [x, orig](Node& self) {
        if (x->requires_grad) x->accumulate(self.grad.reshaped(orig));
    });
}

Var slice_axis(const Var& x, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = x->value.shape();
    std::size_t outer, n, inner;
    axis_split(s, axis, outer, n, inner);
    if (start + len > n) throw ShapeError("slice_axis: out of range");
    Shape os = s;
    os[axis] = len;
    Tensor out(os);
    const Real* src = x->value.data();
    Real* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
            std::copy_n(src + (o * n + start + k) * inner, inner, dst + (o * len + k) * inner);
    return finish(std::move(out), {x},
                  [x, outer, n, inner, start, len](Node& self) {
                      if (!x->requires_grad) return;
                      x->ensure_grad();
                      const Real* g = self.grad.data();
                      Real* d = x->grad.data();
                      for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t k = 0; k < len; ++k) {
                              const Real* gs = g + (o * len + k) * inner;
                              Real* dd = d + (o * n + start + k) * inner;
                              for (std::size_t i = 0; i < inner; ++i) dd[i] += gs[i];
                          }
                  });
}

Var concat_axis(const std::vector<Var>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat_axis: empty input");
    const Shape& s0 = xs[0]->value.shape();
    std::size_t outer, n0, inner;
    axis_split(s0, axis, outer, n0, inner);
    std::size_t total = 0;
    for (const auto& v : xs) {
        const Shape& si = v->value.shape();
        if (si.size() != s0.size()) throw ShapeError("concat_axis: rank mismatch");
        for (std::size_t i = 0; i < si.size(); ++i)
            if (i != axis && si[i] != s0[i]) throw ShapeError("concat_axis: shape mismatch");
        total += si[axis];
    }
    Shape os = s0;
    os[axis] = total;
    Tensor out(os);
    Real* dst = out.data();
    std::size_t off = 0;
    for (const auto& v : xs) {
        std::size_t ni = v->value.dim(axis);
        const Real* src = v->value.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src + o * ni * inner, ni * inner, dst + (o * total + off) * inner);
        off += ni;
    }
    std::vector<Var> parents = xs;
    return finish(std::move(out), parents, [xs, outer, inner, total, axis](Node& self) {
        const Real* g = self.grad.data();
        std::size_t off = 0;
        for (const auto& v : xs) {
            std::size_t ni = v->value.dim(axis);
            if (v->requires_grad) {
                v->ensure_grad();
                Real* d = v->grad.data();
                for (std::size_t o = 0; o < outer; ++o) {
                    const Real* gs = g + (o * total + off) * inner;
                    Real* dd = d + o * ni * inner;
                    for (std::size_t i = 0; i < ni * inner; ++i) dd[i] += gs[i];
                }
            }
            off += ni;
        }
    });
}

namespace {
Tensor do_permute_0213(const Tensor& x) {
    const Shape& s = x.shape();
    std::size_t A = s[0], B = s[1], C = s[2], D = s[3];
    Tensor out(Shape{A, C, B, D});
    const Real* src = x.data();
    Real* dst = out.data();
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                std::copy_n(src + ((a * B + b) * C + c) * D, D,
                            dst + ((a * C + c) * B + b) * D);
    return out;
}
}  // namespace

Var permute_0213(const Var& x) {
    if (x->value.ndim() != 4) throw ShapeError("permute_0213: rank-4 required");
    Tensor out = do_permute_0213(x->value);
    return finish(std::move(out), {x}, [x](Node& self) {
        if (x->requires_grad) x->accumulate(do_permute_0213(self.grad));
    });
}

Var patchify(const Var& x, std::size_t patch) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) throw ShapeError("patchify: rank-4 required");
    std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (H % patch != 0 || W % patch != 0)
        throw ShapeError("patchify: spatial size not divisible by patch size");
    std::size_t gy = H / patch, gx = W / patch, N = gy * gx, F = C * patch * patch;
    Tensor out(Shape{B, N, F});
    const Real* src = x->value.data();
    Real* dst = out.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ty = 0; ty < gy; ++ty)
            for (std::size_t tx = 0; tx < gx; ++tx) {
                std::size_t tok = ty * gx + tx;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < patch; ++i)
                        for (std::size_t j = 0; j < patch; ++j)
                            dst[((b * N + tok) * F) + (c * patch + i) * patch + j] =
                                src[((b * C + c) * H + ty * patch + i) * W + tx * patch + j];
            }
    return finish(std::move(out), {x}, [x, B, C, H, W, patch, gy, gx, N, F](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real* g = self.grad.data();
        Real* d = x->grad.data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t ty = 0; ty < gy; ++ty)
                for (std::size_t tx = 0; tx < gx; ++tx) {
                    std::size_t tok = ty * gx + tx;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t i = 0; i < patch; ++i)
                            for (std::size_t j = 0; j < patch; ++j)
                                d[((b * C + c) * H + ty * patch + i) * W + tx * patch + j] +=
                                    g[((b * N + tok) * F) + (c * patch + i) * patch + j];
                }
    });
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    Real* o = out.data();
    const Real* bb = b->value.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] += bb[i];
    return finish(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) a->accumulate(self.grad);
        if (b->requires_grad) b->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->value;
    Real* o = out.data();
    const Real* bb = b->value.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] -= bb[i];
    return finish(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) a->accumulate(self.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            const Real* g = self.grad.data();
            Real* d = b->grad.data();
            for (std::size_t i = 0; i < b->grad.numel(); ++i) d[i] -= g[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    Real* o = out.data();
    const Real* bb = b->value.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] *= bb[i];
    return finish(std::move(out), {a, b}, [a, b](Node& self) {
        const Real* g = self.grad.data();
        if (a->requires_grad) {
            a->ensure_grad();
            Real* d = a->grad.data();
            const Real* bv = b->value.data();
            for (std::size_t i = 0; i < a->grad.numel(); ++i) d[i] += g[i] * bv[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            Real* d = b->grad.data();
            const Real* av = a->value.data();
            for (std::size_t i = 0; i < b->grad.numel(); ++i) d[i] += g[i] * av[i];
        }
    });
}

Var divv(const Var& a, const Var& b) {
    check_same_shape(a, b, "div");
    Tensor out = a->value;
    Real* o = out.data();
    const Real* bb = b->value.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] /= bb[i];
    return finish(std::move(out), {a, b}, [a, b](Node& self) {
        const Real* g = self.grad.data();
        const Real* av = a->value.data();
        const Real* bv = b->value.data();
        if (a->requires_grad) {
            a->ensure_grad();
            Real* d = a->grad.data();
            for (std::size_t i = 0; i < a->grad.numel(); ++i) d[i] += g[i] / bv[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            Real* d = b->grad.data();
            for (std::size_t i = 0; i < b->grad.numel(); ++i)
                d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

Var adds(const Var& a, Real c) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v += c;
    return finish(std::move(out), {a}, [a](Node& self) {
        if (a->requires_grad) a->accumulate(self.grad);
    });
}

Var muls(const Var& a, Real c) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v *= c;
    return finish(std::move(out), {a}, [a, c](Node& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const Real* g = self.grad.data();
        Real* d = a->grad.data();
        for (std::size_t i = 0; i < a->grad.numel(); ++i) d[i] += c * g[i];
    });
}

Var neg(const Var& a) { return muls(a, -1.0); }

namespace {
template <class Fwd, class Bwd>
Var unary_op(const Var& a, Fwd f, Bwd dfdx) {
    Tensor out = a->value;
    for (auto& v : out.vec()) v = f(v);
    return finish(std::move(out), {a}, [a, dfdx](Node& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const Real* g = self.grad.data();
        const Real* xv = a->value.data();
        const Real* yv = self.value.data();
        Real* d = a->grad.data();
        for (std::size_t i = 0; i < a->grad.numel(); ++i) d[i] += g[i] * dfdx(xv[i], yv[i]);
    });
}
}  // namespace

Var exp_v(const Var& a) {
    return unary_op(a, [](Real x) { return std::exp(x); },
                    [](Real, Real y) { return y; });
}

Var log_v(const Var& a) {
    return unary_op(a, [](Real x) { return std::log(x); },
                    [](Real x, Real) { return 1.0 / x; });
}

Var sqrt_v(const Var& a) {
    return unary_op(a, [](Real x) { return std::sqrt(x); },
                    [](Real, Real y) { return 0.5 / y; });
}

Var square_v(const Var& a) {
    return unary_op(a, [](Real x) { return x * x; },
                    [](Real x, Real) { return 2.0 * x; });
}

Var pow_scalar(const Var& a, Real p) {
    if (p == 1.0) return muls(a, 1.0);
    return unary_op(a, [p](Real x) { return std::pow(x, p); },
                    [p](Real x, Real) { return p * std::pow(x, p - 1.0); });
}

Var sigmoid_v(const Var& a) {
    return unary_op(a,
                    [](Real x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                               : std::exp(x) / (1.0 + std::exp(x)); },
                    [](Real, Real y) { return y * (1.0 - y); });
}

Var silu_v(const Var& a) {
    return unary_op(a,
                    [](Real x) {
                        Real s = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                        : std::exp(x) / (1.0 + std::exp(x));
                        return x * s;
                    },
                    [](Real x, Real) {
                        Real s = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                        : std::exp(x) / (1.0 + std::exp(x));
                        return s * (1.0 + x * (1.0 - s));
                    });
}

Var gelu_v(const Var& a) {
    constexpr Real inv_sqrt2 = 0.7071067811865475244;
    constexpr Real inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(a,
                    [=](Real x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
                    [=](Real x, Real) {
                        Real cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                        Real pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                        return cdf + x * pdf;
                    });
}

Var relu_v(const Var& a) {
    return unary_op(a, [](Real x) { return x > 0 ? x : 0.0; },
                    [](Real x, Real) { return x > 0 ? 1.0 : 0.0; });
}

Var softplus_v(const Var& a) {
    return unary_op(a,
                    [](Real x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
                    [](Real x, Real) {
                        return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                      : std::exp(x) / (1.0 + std::exp(x));
                    });
}

Var clamp_v(const Var& a, Real lo, Real hi) {
    return unary_op(a, [lo, hi](Real x) { return std::min(std::max(x, lo), hi); },
                    [lo, hi](Real x, Real) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var dropout(const Var& a, Real p, Rng& rng) {
    if (p <= 0.0) return muls(a, 1.0);
    Tensor mask(a->value.shape());
    Real keep = 1.0 - p;
    for (auto& m : mask.vec()) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    Tensor out = a->value;
    Real* o = out.data();
    const Real* m = mask.data();
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] *= m[i];
    return finish(std::move(out), {a}, [a, mask = std::move(mask)](Node& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const Real* g = self.grad.data();
        const Real* m = mask.data();
        Real* d = a->grad.data();
        for (std::size_t i = 0; i < a->grad.numel(); ++i) d[i] += g[i] * m[i];
    });
}

// ---------------- broadcasting adds ----------------

Var add_broadcast_suffix(const Var& x, const Var& b) {
    const Shape& xs = x->value.shape();
    const Shape& bs = b->value.shape();
    if (bs.size() > xs.size()) throw ShapeError("add_broadcast_suffix: rank mismatch");
    for (std::size_t i = 0; i < bs.size(); ++i)
        if (bs[i] != xs[xs.size() - bs.size() + i])
            throw ShapeError("add_broadcast_suffix: suffix mismatch");
    std::size_t bn = b->value.numel();
    std::size_t reps = x->value.numel() / bn;
    Tensor out = x->value;
    Real* o = out.data();
    const Real* bv = b->value.data();
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < bn; ++i) o[r * bn + i] += bv[i];
    return finish(std::move(out), {x, b}, [x, b, reps, bn](Node& self) {
        const Real* g = self.grad.data();
        if (x->requires_grad) x->accumulate(self.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            Real* d = b->grad.data();
            for (std::size_t r = 0; r < reps; ++r)
                for (std::size_t i = 0; i < bn; ++i) d[i] += g[r * bn + i];
        }
    });
}

Var add_channel_bias(const Var& x, const Var& b) {
    const Shape& xs = x->value.shape();
    const Shape& bs = b->value.shape();
    if (xs.size() != 4 || bs.size() != 2 || bs[0] != xs[0] || bs[1] != xs[1])
        throw ShapeError("add_channel_bias: expected x(B,C,H,W), b(B,C)");
    std::size_t BC = bs[0] * bs[1], HW = xs[2] * xs[3];
    Tensor out = x->value;
    Real* o = out.data();
    const Real* bv = b->value.data();
    for (std::size_t bc = 0; bc < BC; ++bc)
        for (std::size_t i = 0; i < HW; ++i) o[bc * HW + i] += bv[bc];
    return finish(std::move(out), {x, b}, [x, b, BC, HW](Node& self) {
        const Real* g = self.grad.data();
        if (x->requires_grad) x->accumulate(self.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            Real* d = b->grad.data();
            for (std::size_t bc = 0; bc < BC; ++bc) {
                Real s = 0;
                for (std::size_t i = 0; i < HW; ++i) s += g[bc * HW + i];
                d[bc] += s;
            }
        }
    });
}

// ---------------- matmul ----------------

namespace {
void mm_dims(const Shape& as, const Shape& bs, bool ta, bool tb, std::size_t& M,
             std::size_t& K, std::size_t& N) {
    std::size_t ar = as[as.size() - 2], ac = as[as.size() - 1];
    std::size_t br = bs[bs.size() - 2], bc = bs[bs.size() - 1];
    M = ta ? ac : ar;
    K = ta ? ar : ac;
    std::size_t Kb = tb ? bc : br;
    N = tb ? br : bc;
    if (K != Kb) throw ShapeError("matmul: inner dimension mismatch");
}

// C (M,N) += or = op(A)·op(B) on raw row-major buffers
void gemm(const Real* a, std::size_t ar, std::size_t ac, bool ta, const Real* b,
          std::size_t br, std::size_t bc, bool tb, Real* c, std::size_t M, std::size_t N,
          bool accumulate) {
    ECMap A(a, ar, ac);
    ECMap B(b, br, bc);
    EMap C(c, M, N);
    if (!ta && !tb) {
        if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
    } else if (ta && !tb) {
        if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
    } else if (!ta && tb) {
        if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}
}  // namespace

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
    const Shape& as = a->value.shape();
    const Shape& bs = b->value.shape();
    if (as.size() != 2 || bs.size() != 2) throw ShapeError("matmul: rank-2 required");
    std::size_t M, K, N;
    mm_dims(as, bs, ta, tb, M, K, N);
    Tensor out(Shape{M, N});
    gemm(a->value.data(), as[0], as[1], ta, b->value.data(), bs[0], bs[1], tb, out.data(), M,
         N, false);
    return finish(std::move(out), {a, b}, [a, b, ta, tb, M, N](Node& self) {
        const Shape& as = a->value.shape();
        const Shape& bs = b->value.shape();
        const Real* g = self.grad.data();
        if (a->requires_grad) {
            a->ensure_grad();
            // dA = dY·op(B)^T  (or op(B)·dY^T when A is transposed)
            if (!ta)
                gemm(g, M, N, false, b->value.data(), bs[0], bs[1], !tb, a->grad.data(),
                     as[0], as[1], true);
            else
                gemm(b->value.data(), bs[0], bs[1], tb, g, M, N, true, a->grad.data(), as[0],
                     as[1], true);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            if (!tb)
                gemm(a->value.data(), as[0], as[1], !ta, g, M, N, false, b->grad.data(),
                     bs[0], bs[1], true);
            else
                gemm(g, M, N, true, a->value.data(), as[0], as[1], ta, b->grad.data(), bs[0],
                     bs[1], true);
        }
    });
}

Var bmm(const Var& a, const Var& b, bool ta, bool tb) {
    const Shape& as = a->value.shape();
    const Shape& bs = b->value.shape();
    if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0])
        throw ShapeError("bmm: rank-3 with equal batch required");
    std::size_t Bn = as[0];
    std::size_t M, K, N;
    mm_dims(as, bs, ta, tb, M, K, N);
    Tensor out(Shape{Bn, M, N});
    std::size_t astep = as[1] * as[2], bstep = bs[1] * bs[2], ostep = M * N;
    for (std::size_t i = 0; i < Bn; ++i)
        gemm(a->value.data() + i * astep, as[1], as[2], ta, b->value.data() + i * bstep,
             bs[1], bs[2], tb, out.data() + i * ostep, M, N, false);
    return finish(std::move(out), {a, b},
                  [a, b, ta, tb, Bn, M, N, astep, bstep, ostep](Node& self) {
                      const Shape& as = a->value.shape();
                      const Shape& bs = b->value.shape();
                      const Real* g = self.grad.data();
                      if (a->requires_grad) {
                          a->ensure_grad();
                          for (std::size_t i = 0; i < Bn; ++i) {
                              if (!ta)
                                  gemm(g + i * ostep, M, N, false, b->value.data() + i * bstep,
                                       bs[1], bs[2], !tb, a->grad.data() + i * astep, as[1],
                                       as[2], true);
                              else
                                  gemm(b->value.data() + i * bstep, bs[1], bs[2], tb,
                                       g + i * ostep, M, N, true, a->grad.data() + i * astep,
                                       as[1], as[2], true);
                          }
                      }
                      if (b->requires_grad) {
                          b->ensure_grad();
                          for (std::size_t i = 0; i < Bn; ++i) {
                              if (!tb)
                                  gemm(a->value.data() + i * astep, as[1], as[2], !ta,
                                       g + i * ostep, M, N, false, b->grad.data() + i * bstep,
                                       bs[1], bs[2], true);
                              else
                                  gemm(g + i * ostep, M, N, true,
                                       a->value.data() + i * astep, as[1], as[2], ta,
                                       b->grad.data() + i * bstep, bs[1], bs[2], true);
                          }
                      }
                  });
}

// ---------------- reductions ----------------

Var reduce_sum(const Var& x, std::size_t axis) {
    const Shape& s = x->value.shape();
    std::size_t outer, n, inner;
    axis_split(s, axis, outer, n, inner);
    Shape os;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) os.push_back(s[i]);
    if (os.empty()) os.push_back(1);
    Tensor out(os);
    const Real* src = x->value.data();
    Real* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i)
                dst[o * inner + i] += src[(o * n + k) * inner + i];
    return finish(std::move(out), {x}, [x, outer, n, inner](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real* g = self.grad.data();
        Real* d = x->grad.data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t i = 0; i < inner; ++i)
                    d[(o * n + k) * inner + i] += g[o * inner + i];
    });
}

Var reduce_mean(const Var& x, std::size_t axis) {
    std::size_t n = x->value.dim(axis);
    return muls(reduce_sum(x, axis), 1.0 / static_cast<Real>(n));
}

Var sum_all(const Var& x) {
    Real s = 0;
    for (Real v : x->value.vec()) s += v;
    Tensor out = Tensor::scalar(s);
    return finish(std::move(out), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        Real g = self.grad[0];
        Real* d = x->grad.data();
        for (std::size_t i = 0; i < x->grad.numel(); ++i) d[i] += g;
    });
}

Var mean_all(const Var& x) {
    return muls(sum_all(x), 1.0 / static_cast<Real>(x->value.numel()));
}

// ---------------- normalization / softmax ----------------

Var softmax_last(const Var& x) {
    const Shape& s = x->value.shape();
    std::size_t n = s.back();
    std::size_t rows = x->value.numel() / n;
    Tensor out(s);
    const Real* src = x->value.data();
    Real* dst = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = src + r * n;
        Real* yr = dst + r * n;
        Real mx = xr[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
        Real sum = 0;
        for (std::size_t i = 0; i < n; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            sum += yr[i];
        }
        for (std::size_t i = 0; i < n; ++i) yr[i] /= sum;
    }
    return finish(std::move(out), {x}, [x, rows, n](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real* g = self.grad.data();
        const Real* y = self.value.data();
        Real* d = x->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* gr = g + r * n;
            const Real* yr = y + r * n;
            Real dot = 0;
            for (std::size_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
            Real* dr = d + r * n;
            for (std::size_t i = 0; i < n; ++i) dr[i] += yr[i] * (gr[i] - dot);
        }
    });
}

Var normalize_sum_last(const Var& x) {
    const Shape& s = x->value.shape();
    std::size_t n = s.back();
    std::size_t rows = x->value.numel() / n;
    Tensor out(s);
    std::vector<Real> sums(rows);
    const Real* src = x->value.data();
    Real* dst = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        Real sum = 0;
        for (std::size_t i = 0; i < n; ++i) sum += src[r * n + i];
        sums[r] = sum;
        for (std::size_t i = 0; i < n; ++i) dst[r * n + i] = src[r * n + i] / sum;
    }
    return finish(std::move(out), {x}, [x, rows, n, sums = std::move(sums)](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real* g = self.grad.data();
        const Real* y = self.value.data();
        Real* d = x->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            Real dot = 0;
            for (std::size_t i = 0; i < n; ++i) dot += g[r * n + i] * y[r * n + i];
            for (std::size_t i = 0; i < n; ++i)
                d[r * n + i] += (g[r * n + i] - dot) / sums[r];
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps) {
    const Shape& s = x->value.shape();
    std::size_t n = s.back();
    if (gamma->value.numel() != n || beta->value.numel() != n)
        throw ShapeError("layer_norm: affine params must match last dim");
    std::size_t rows = x->value.numel() / n;
    Tensor out(s);
    std::vector<Real> means(rows), istds(rows);
    const Real* src = x->value.data();
    const Real* gv = gamma->value.data();
    const Real* bv = beta->value.data();
    Real* dst = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = src + r * n;
        Real m = 0;
        for (std::size_t i = 0; i < n; ++i) m += xr[i];
        m /= static_cast<Real>(n);
        Real var = 0;
        for (std::size_t i = 0; i < n; ++i) var += (xr[i] - m) * (xr[i] - m);
        var /= static_cast<Real>(n);
        Real istd = 1.0 / std::sqrt(var + eps);
        means[r] = m;
        istds[r] = istd;
        Real* yr = dst + r * n;
        for (std::size_t i = 0; i < n; ++i) yr[i] = (xr[i] - m) * istd * gv[i] + bv[i];
    }
    return finish(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, rows, n, means = std::move(means),
                   istds = std::move(istds)](Node& self) {
                      const Real* g = self.grad.data();
                      const Real* xv = x->value.data();
                      const Real* gv = gamma->value.data();
                      if (gamma->requires_grad) gamma->ensure_grad();
                      if (beta->requires_grad) beta->ensure_grad();
                      if (x->requires_grad) x->ensure_grad();
                      for (std::size_t r = 0; r < rows; ++r) {
                          const Real* xr = xv + r * n;
                          const Real* gr = g + r * n;
                          Real m = means[r], istd = istds[r];
                          Real sum_gh = 0, sum_ghx = 0;  // over gamma-scaled grads
                          for (std::size_t i = 0; i < n; ++i) {
                              Real xh = (xr[i] - m) * istd;
                              Real gh = gr[i] * gv[i];
                              sum_gh += gh;
                              sum_ghx += gh * xh;
                              if (gamma->requires_grad) gamma->grad.data()[i] += gr[i] * xh;
                              if (beta->requires_grad) beta->grad.data()[i] += gr[i];
                          }
                          if (x->requires_grad) {
                              Real* dr = x->grad.data() + r * n;
                              Real inv_n = 1.0 / static_cast<Real>(n);
                              for (std::size_t i = 0; i < n; ++i) {
                                  Real xh = (xr[i] - m) * istd;
                                  Real gh = gr[i] * gv[i];
                                  dr[i] += istd * (gh - inv_n * sum_gh - xh * inv_n * sum_ghx);
                              }
                          }
                      }
                  });
}

Var group_norm4(const Var& x, std::size_t groups, const Var& gamma, const Var& beta,
                Real eps) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) throw ShapeError("group_norm4: rank-4 required");
    std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (C % groups != 0) throw ShapeError("group_norm4: channels not divisible by groups");
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw ShapeError("group_norm4: affine params must have C entries");
    std::size_t Cg = C / groups, HW = H * W, m = Cg * HW;
    Tensor out(s);
    std::vector<Real> means(B * groups), istds(B * groups);
    const Real* xv = x->value.data();
    const Real* gv = gamma->value.data();
    const Real* bv = beta->value.data();
    Real* yv = out.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t g = 0; g < groups; ++g) {
            const Real* base = xv + (b * C + g * Cg) * HW;
            Real mean = 0;
            for (std::size_t i = 0; i < m; ++i) mean += base[i];
            mean /= static_cast<Real>(m);
            Real var = 0;
            for (std::size_t i = 0; i < m; ++i) var += (base[i] - mean) * (base[i] - mean);
            var /= static_cast<Real>(m);
            Real istd = 1.0 / std::sqrt(var + eps);
            means[b * groups + g] = mean;
            istds[b * groups + g] = istd;
            Real* dst = yv + (b * C + g * Cg) * HW;
            for (std::size_t c = 0; c < Cg; ++c) {
                Real ga = gv[g * Cg + c], be = bv[g * Cg + c];
                for (std::size_t i = 0; i < HW; ++i)
                    dst[c * HW + i] = (base[c * HW + i] - mean) * istd * ga + be;
            }
        }
    return finish(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, B, C, HW, groups, Cg, m, means = std::move(means),
         istds = std::move(istds)](Node& self) {
            const Real* g = self.grad.data();
            const Real* xv = x->value.data();
            const Real* gv = gamma->value.data();
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t gr = 0; gr < groups; ++gr) {
                    std::size_t off = (b * C + gr * Cg) * HW;
                    Real mean = means[b * groups + gr], istd = istds[b * groups + gr];
                    Real sum_gh = 0, sum_ghx = 0;
                    for (std::size_t c = 0; c < Cg; ++c) {
                        Real ga = gv[gr * Cg + c];
                        Real dg = 0, db = 0;
                        for (std::size_t i = 0; i < HW; ++i) {
                            Real xh = (xv[off + c * HW + i] - mean) * istd;
                            Real gg = g[off + c * HW + i];
                            dg += gg * xh;
                            db += gg;
                            sum_gh += gg * ga;
                            sum_ghx += gg * ga * xh;
                        }
                        if (gamma->requires_grad) gamma->grad.data()[gr * Cg + c] += dg;
                        if (beta->requires_grad) beta->grad.data()[gr * Cg + c] += db;
                    }
                    if (x->requires_grad) {
                        Real inv_m = 1.0 / static_cast<Real>(m);
                        for (std::size_t c = 0; c < Cg; ++c) {
                            Real ga = gv[gr * Cg + c];
                            for (std::size_t i = 0; i < HW; ++i) {
                                Real xh = (xv[off + c * HW + i] - mean) * istd;
                                Real gh = g[off + c * HW + i] * ga;
                                x->grad.data()[off + c * HW + i] +=
                                    istd * (gh - inv_m * sum_gh - xh * inv_m * sum_ghx);
                            }
                        }
                    }
                }
        });
}

// ---------------- spatial ----------------

namespace {
void im2col(const Real* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho,
            std::size_t Wo, Real* col) {
    // col layout: (C*kh*kw, Ho*Wo)
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
                Real* row = col + ((c * kh + i) * kw + j) * (Ho * Wo);
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                            static_cast<std::ptrdiff_t>(pad);
                        Real v = 0;
                        if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(H) && ix >= 0 &&
                            ix < static_cast<std::ptrdiff_t>(W))
                            v = x[(c * H + iy) * W + ix];
                        row[oy * Wo + ox] = v;
                    }
                }
            }
}

void col2im_accum(const Real* col, std::size_t C, std::size_t H, std::size_t W,
                  std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                  std::size_t Ho, std::size_t Wo, Real* dx) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
                const Real* row = col + ((c * kh + i) * kw + j) * (Ho * Wo);
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                            static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                        dx[(c * H + iy) * W + ix] += row[oy * Wo + ox];
                    }
                }
            }
}
}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad) {
    const Shape& xs = x->value.shape();
    const Shape& ws = w->value.shape();
    if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d: rank-4 required");
    std::size_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    std::size_t Cout = ws[0], kh = ws[2], kw = ws[3];
    if (ws[1] != Cin) throw ShapeError("conv2d: channel mismatch");
    if (b->value.numel() != Cout) throw ShapeError("conv2d: bias size mismatch");
    std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    std::size_t ck = Cin * kh * kw;
    Tensor out(Shape{B, Cout, Ho, Wo});
    std::vector<Real> col(ck * Ho * Wo);
    for (std::size_t bi = 0; bi < B; ++bi) {
        im2col(x->value.data() + bi * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
               col.data());
        gemm(w->value.data(), Cout, ck, false, col.data(), ck, Ho * Wo, false,
             out.data() + bi * Cout * Ho * Wo, Cout, Ho * Wo, false);
        Real* dst = out.data() + bi * Cout * Ho * Wo;
        const Real* bv = b->value.data();
        for (std::size_t c = 0; c < Cout; ++c)
            for (std::size_t i = 0; i < Ho * Wo; ++i) dst[c * Ho * Wo + i] += bv[c];
    }
    return finish(
        std::move(out), {x, w, b},
        [x, w, b, B, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, ck](Node& self) {
            const Real* g = self.grad.data();
            std::vector<Real> col(ck * Ho * Wo);
            if (x->requires_grad) x->ensure_grad();
            if (w->requires_grad) w->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            std::vector<Real> dcol(ck * Ho * Wo);
            for (std::size_t bi = 0; bi < B; ++bi) {
                const Real* gslice = g + bi * Cout * Ho * Wo;
                if (w->requires_grad) {
                    im2col(x->value.data() + bi * Cin * H * W, Cin, H, W, kh, kw, stride,
                           pad, Ho, Wo, col.data());
                    gemm(gslice, Cout, Ho * Wo, false, col.data(), ck, Ho * Wo, true,
                         w->grad.data(), Cout, ck, true);
                }
                if (b->requires_grad) {
                    Real* db = b->grad.data();
                    for (std::size_t c = 0; c < Cout; ++c) {
                        Real s = 0;
                        for (std::size_t i = 0; i < Ho * Wo; ++i) s += gslice[c * Ho * Wo + i];
                        db[c] += s;
                    }
                }
                if (x->requires_grad) {
                    gemm(w->value.data(), Cout, ck, true, gslice, Cout, Ho * Wo, false,
                         dcol.data(), ck, Ho * Wo, false);
                    col2im_accum(dcol.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                 x->grad.data() + bi * Cin * H * W);
                }
            }
        });
}

Var avg_pool2(const Var& x) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) throw ShapeError("avg_pool2: rank-4 required");
    std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (H % 2 != 0 || W % 2 != 0) throw ShapeError("avg_pool2: odd spatial size");
    std::size_t Ho = H / 2, Wo = W / 2;
    Tensor out(Shape{B, C, Ho, Wo});
    const Real* xv = x->value.data();
    Real* yv = out.data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const Real* p = xv + bc * H * W + 2 * oy * W + 2 * ox;
                yv[bc * Ho * Wo + oy * Wo + ox] = 0.25 * (p[0] + p[1] + p[W] + p[W + 1]);
            }
    return finish(std::move(out), {x}, [x, B, C, H, W, Ho, Wo](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real* g = self.grad.data();
        Real* d = x->grad.data();
        for (std::size_t bc = 0; bc < B * C; ++bc)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    Real gv = 0.25 * g[bc * Ho * Wo + oy * Wo + ox];
                    Real* p = d + bc * H * W + 2 * oy * W + 2 * ox;
                    p[0] += gv;
                    p[1] += gv;
                    p[W] += gv;
                    p[W + 1] += gv;
                }
    });
}

Var upsample_nearest2(const Var& x) {
    const Shape& s = x->value.shape();
    if (s.size() != 4) throw ShapeError("upsample_nearest2: rank-4 required");
    std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    std::size_t Ho = H * 2, Wo = W * 2;
    Tensor out(Shape{B, C, Ho, Wo});
    const Real* xv = x->value.data();
    Real* yv = out.data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
                Real v = xv[bc * H * W + y * W + xx];
                Real* p = yv + bc * Ho * Wo + 2 * y * Wo + 2 * xx;
                p[0] = v;
                p[1] = v;
                p[Wo] = v;
                p[Wo + 1] = v;
            }
    return finish(std::move(out), {x}, [x, B, C, H, W, Ho, Wo](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const Real* g = self.grad.data();
        Real* d = x->grad.data();
        for (std::size_t bc = 0; bc < B * C; ++bc)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    const Real* p = g + bc * Ho * Wo + 2 * y * Wo + 2 * xx;
                    d[bc * H * W + y * W + xx] += p[0] + p[1] + p[Wo] + p[Wo + 1];
                }
    });
}

// ---------------- lookup ----------------

Var embedding(const Var& table, const std::vector<std::int64_t>& ids, std::size_t batch,
              std::size_t seq_len) {
    const Shape& ts = table->value.shape();
    if (ts.size() != 2) throw ShapeError("embedding: table must be rank-2");
    if (ids.size() != batch * seq_len) throw ShapeError("embedding: id count mismatch");
    std::size_t V = ts[0], d = ts[1];
    for (auto id : ids)
        if (id < 0 || id >= static_cast<std::int64_t>(V))
            throw ValidationError("embedding: id out of vocabulary");
    Tensor out(Shape{batch, seq_len, d});
    const Real* tv = table->value.data();
    Real* ov = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(tv + static_cast<std::size_t>(ids[i]) * d, d, ov + i * d);
    return finish(std::move(out), {table}, [table, ids, d](Node& self) {
        if (!table->requires_grad) return;
        table->ensure_grad();
        const Real* g = self.grad.data();
        Real* dt = table->grad.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            Real* row = dt + static_cast<std::size_t>(ids[i]) * d;
            const Real* gr = g + i * d;
            for (std::size_t k = 0; k < d; ++k) row[k] += gr[k];
        }
    });
}

Tensor bilinear_resize_grid(const Tensor& grid, std::size_t in_h, std::size_t in_w,
                            std::size_t out_h, std::size_t out_w) {
    const Shape& s = grid.shape();
    if (s.size() != 2 || s[0] != in_h * in_w)
        throw ShapeError("bilinear_resize_grid: rows must equal in_h*in_w");
    std::size_t d = s[1];
    Tensor out(Shape{out_h * out_w, d});
    const Real* src = grid.data();
    Real* dst = out.data();
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        Real fy = (static_cast<Real>(oy) + 0.5) * static_cast<Real>(in_h) /
                      static_cast<Real>(out_h) - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<Real>(in_h - 1));
        std::size_t y0 = static_cast<std::size_t>(fy);
        std::size_t y1 = std::min(y0 + 1, in_h - 1);
        Real wy = fy - static_cast<Real>(y0);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            Real fx = (static_cast<Real>(ox) + 0.5) * static_cast<Real>(in_w) /
                          static_cast<Real>(out_w) - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<Real>(in_w - 1));
            std::size_t x0 = static_cast<std::size_t>(fx);
            std::size_t x1 = std::min(x0 + 1, in_w - 1);
            Real wx = fx - static_cast<Real>(x0);
            const Real* p00 = src + (y0 * in_w + x0) * d;
            const Real* p01 = src + (y0 * in_w + x1) * d;
            const Real* p10 = src + (y1 * in_w + x0) * d;
            const Real* p11 = src + (y1 * in_w + x1) * d;
            Real* o = dst + (oy * out_w + ox) * d;
            for (std::size_t k = 0; k < d; ++k)
                o[k] = (1 - wy) * ((1 - wx) * p00[k] + wx * p01[k]) +
                       wy * ((1 - wx) * p10[k] + wx * p11[k]);
        }
    }
    return out;
}

}  // namespace oscar
