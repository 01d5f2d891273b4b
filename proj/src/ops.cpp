#include "evlm/ops.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <type_traits>

#include "evlm/kernels.hpp"

namespace evlm::ops {

namespace {

template <typename Fn>
void with_prec(Prec p, Fn&& fn) {
    if (p == Prec::f32)
        fn(float{});
    else
        fn(double{});
}

template <typename T>
T* data_ptr(Storage& s) {
    if constexpr (std::is_same_v<T, float>)
        return s.f32();
    else
        return s.f64();
}

template <typename T>
const T* data_ptr(const Storage& s) {
    if constexpr (std::is_same_v<T, float>)
        return s.f32();
    else
        return s.f64();
}

Tensor make_like(std::vector<int64_t> shape, Prec p) {
    PrecGuard g(p);
    return Tensor::zeros(std::move(shape));
}

void require_same_prec(const Tensor& a, const Tensor& b, const char* op) {
    check(a.prec() == b.prec(), ErrKind::contract, msg(op, ": mixed precision operands"));
}

void require_rank2(const Tensor& a, const char* op) {
    check(a.rank() == 2, ErrKind::dimension, msg(op, ": expected a matrix, got rank ", a.rank()));
}

bool should_record(std::initializer_list<Tensor> ins) {
    if (!recording()) return false;
    for (const Tensor& t : ins)
        if (wants_grad(t)) return true;
    return false;
}

void maybe_record(const char* op, std::vector<Tensor> ins, Tensor& out, std::function<void()> bwd) {
    Tape::current()->record(op, std::move(ins), out, std::move(bwd));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    require_same_prec(a, b, "matmul");
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    check(b.dim(0) == k, ErrKind::dimension, msg("matmul: inner extents ", k, " vs ", b.dim(0)));
    Tensor out = make_like({m, n}, a.prec());
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        kern::matmul<T>(data_ptr<T>(a.store()), data_ptr<T>(b.store()), data_ptr<T>(out.store()), m, k, n);
    });
    if (should_record({a, b})) {
        Tensor ac = a, bc = b, oc = out;
        maybe_record("matmul", {a, b}, out, [ac, bc, oc, m, k, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                const T* dout = data_ptr<T>(oc.grad_store());
                if (wants_grad(ac))
                    kern::matmul_nt<T>(dout, data_ptr<T>(bc.store()), data_ptr<T>(ac.grad_store()), m, n, k, true);
                if (wants_grad(bc))
                    kern::matmul_tn<T>(data_ptr<T>(ac.store()), dout, data_ptr<T>(bc.grad_store()), m, k, n, true);
            });
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = make_like({n, m}, a.prec());
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) op[j * m + i] = ap[i * n + j];
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        maybe_record("transpose", {a}, out, [ac, oc, m, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                const T* dout = data_ptr<T>(oc.grad_store());
                T* da = data_ptr<T>(ac.grad_store());
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) da[i * n + j] += dout[j * m + i];
            });
        });
    }
    return out;
}

namespace {

enum class EwKind { add, sub, mul };

Tensor elementwise2(const Tensor& a, const Tensor& b, EwKind kind, const char* name) {
    require_same_prec(a, b, name);
    check(a.shape() == b.shape(), ErrKind::dimension, msg(name, ": shape mismatch"));
    Tensor out = make_like(a.shape(), a.prec());
    int64_t n = a.numel();
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        const T* bp = data_ptr<T>(b.store());
        T* op = data_ptr<T>(out.store());
        switch (kind) {
            case EwKind::add:
                for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
                break;
            case EwKind::sub:
                for (int64_t i = 0; i < n; ++i) op[i] = ap[i] - bp[i];
                break;
            case EwKind::mul:
                for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
                break;
        }
    });
    if (should_record({a, b})) {
        Tensor ac = a, bc = b, oc = out;
        maybe_record(name, {a, b}, out, [ac, bc, oc, kind, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                const T* dout = data_ptr<T>(oc.grad_store());
                if (wants_grad(ac)) {
                    T* da = data_ptr<T>(ac.grad_store());
                    if (kind == EwKind::mul) {
                        const T* bp = data_ptr<T>(bc.store());
                        for (int64_t i = 0; i < n; ++i) da[i] += dout[i] * bp[i];
                    } else {
                        for (int64_t i = 0; i < n; ++i) da[i] += dout[i];
                    }
                }
                if (wants_grad(bc)) {
                    T* db = data_ptr<T>(bc.grad_store());
                    if (kind == EwKind::mul) {
                        const T* ap = data_ptr<T>(ac.store());
                        for (int64_t i = 0; i < n; ++i) db[i] += dout[i] * ap[i];
                    } else if (kind == EwKind::sub) {
                        for (int64_t i = 0; i < n; ++i) db[i] -= dout[i];
                    } else {
                        for (int64_t i = 0; i < n; ++i) db[i] += dout[i];
                    }
                }
            });
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise2(a, b, EwKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise2(a, b, EwKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise2(a, b, EwKind::mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
    Tensor out = make_like(a.shape(), a.prec());
    int64_t n = a.numel();
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        T sv = static_cast<T>(s);
        for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * sv;
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        maybe_record("scale", {a}, out, [ac, oc, s, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                const T* dout = data_ptr<T>(oc.grad_store());
                T* da = data_ptr<T>(ac.grad_store());
                T sv = static_cast<T>(s);
                for (int64_t i = 0; i < n; ++i) da[i] += dout[i] * sv;
            });
        });
    }
    return out;
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    require_same_prec(a, s, "scale_by");
    check(s.numel() == 1, ErrKind::dimension, "scale_by: scale must be a single element");
    Tensor out = make_like(a.shape(), a.prec());
    int64_t n = a.numel();
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        T sv = data_ptr<T>(s.store())[0];
        for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * sv;
    });
    if (should_record({a, s})) {
        Tensor ac = a, sc = s, oc = out;
        maybe_record("scale_by", {a, s}, out, [ac, sc, oc, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                const T* dout = data_ptr<T>(oc.grad_store());
                if (wants_grad(ac)) {
                    T* da = data_ptr<T>(ac.grad_store());
                    T sv = data_ptr<T>(sc.store())[0];
                    for (int64_t i = 0; i < n; ++i) da[i] += dout[i] * sv;
                }
                if (wants_grad(sc)) {
                    const T* ap = data_ptr<T>(ac.store());
                    T acc = T(0);
                    for (int64_t i = 0; i < n; ++i) acc += dout[i] * ap[i];
                    data_ptr<T>(sc.grad_store())[0] += acc;
                }
            });
        });
    }
    return out;
}

Tensor exp(const Tensor& a) {
    Tensor out = make_like(a.shape(), a.prec());
    int64_t n = a.numel();
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        for (int64_t i = 0; i < n; ++i) op[i] = std::exp(ap[i]);
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        maybe_record("exp", {a}, out, [ac, oc, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                const T* dout = data_ptr<T>(oc.grad_store());
                const T* op = data_ptr<T>(oc.store());
                T* da = data_ptr<T>(ac.grad_store());
                for (int64_t i = 0; i < n; ++i) da[i] += dout[i] * op[i];
            });
        });
    }
    return out;
}

Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
    require_rank2(a, "add_rowwise");
    require_same_prec(a, bias, "add_rowwise");
    check(bias.rank() == 1 && bias.dim(0) == a.dim(1), ErrKind::dimension,
          msg("add_rowwise: bias length ", bias.numel(), " vs width ", a.dim(1)));
    int64_t n = a.dim(0), d = a.dim(1);
    Tensor out = make_like({n, d}, a.prec());
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        const T* bp = data_ptr<T>(bias.store());
        T* op = data_ptr<T>(out.store());
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) op[i * d + j] = ap[i * d + j] + bp[j];
    });
    if (should_record({a, bias})) {
        Tensor ac = a, bc = bias, oc = out;
        maybe_record("add_rowwise", {a, bias}, out, [ac, bc, oc, n, d]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                const T* dout = data_ptr<T>(oc.grad_store());
                if (wants_grad(ac)) {
                    T* da = data_ptr<T>(ac.grad_store());
                    for (int64_t i = 0; i < n * d; ++i) da[i] += dout[i];
                }
                if (wants_grad(bc)) {
                    T* db = data_ptr<T>(bc.grad_store());
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) db[j] += dout[i * d + j];
                }
            });
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), ErrKind::contract, "concat_rows: no parts");
    int64_t d = parts[0].dim(1), total = 0;
    Prec p = parts[0].prec();
    for (const Tensor& t : parts) {
        require_rank2(t, "concat_rows");
        check(t.dim(1) == d, ErrKind::dimension, msg("concat_rows: width ", t.dim(1), " vs ", d));
        check(t.prec() == p, ErrKind::contract, "concat_rows: mixed precision parts");
        total += t.dim(0);
    }
    Tensor out = make_like({total, d}, p);
    with_prec(p, [&](auto tag) {
        using T = decltype(tag);
        T* op = data_ptr<T>(out.store());
        int64_t row = 0;
        for (const Tensor& t : parts) {
            const T* tp = data_ptr<T>(t.store());
            std::memcpy(op + row * d, tp, static_cast<size_t>(t.numel()) * sizeof(T));
            row += t.dim(0);
        }
    });
    bool rec = false;
    if (recording())
        for (const Tensor& t : parts)
            if (wants_grad(t)) rec = true;
    if (rec) {
        std::vector<Tensor> pc = parts;
        Tensor oc = out;
        maybe_record("concat_rows", pc, out, [pc, oc, d]() mutable {
            with_prec(oc.prec(), [&](auto tag) {
                using T = decltype(tag);
                const T* dout = data_ptr<T>(oc.grad_store());
                int64_t row = 0;
                for (Tensor& t : pc) {
                    if (wants_grad(t)) {
                        T* dt = data_ptr<T>(t.grad_store());
                        int64_t count = t.numel();
                        const T* src = dout + row * d;
                        for (int64_t i = 0; i < count; ++i) dt[i] += src[i];
                    }
                    row += t.dim(0);
                }
            });
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& rows) {
    require_rank2(a, "gather_rows");
    int64_t n = a.dim(0), d = a.dim(1);
    for (int64_t r : rows)
        check(r >= 0 && r < n, ErrKind::index, msg("gather_rows: row ", r, " of ", n));
    Tensor out = make_like({static_cast<int64_t>(rows.size()), d}, a.prec());
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        for (size_t i = 0; i < rows.size(); ++i)
            std::memcpy(op + static_cast<int64_t>(i) * d, ap + rows[i] * d, static_cast<size_t>(d) * sizeof(T));
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        std::vector<int64_t> rc = rows;
        maybe_record("gather_rows", {a}, out, [ac, oc, rc, d]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                const T* dout = data_ptr<T>(oc.grad_store());
                T* da = data_ptr<T>(ac.grad_store());
                for (size_t i = 0; i < rc.size(); ++i) {
                    const T* src = dout + static_cast<int64_t>(i) * d;
                    T* dst = da + rc[i] * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
            });
        });
    }
    return out;
}

Tensor scatter_rows(const Tensor& base, const std::vector<int64_t>& rows, const Tensor& values) {
    require_rank2(base, "scatter_rows");
    require_rank2(values, "scatter_rows");
    require_same_prec(base, values, "scatter_rows");
    int64_t n = base.dim(0), d = base.dim(1);
    check(values.dim(1) == d, ErrKind::dimension,
          msg("scatter_rows: width ", values.dim(1), " vs ", d));
    check(values.dim(0) == static_cast<int64_t>(rows.size()), ErrKind::dimension,
          msg("scatter_rows: ", rows.size(), " rows for ", values.dim(0), " values"));
    std::vector<char> hit(static_cast<size_t>(n), 0);
    for (int64_t r : rows) {
        check(r >= 0 && r < n, ErrKind::index, msg("scatter_rows: row ", r, " of ", n));
        check(!hit[static_cast<size_t>(r)], ErrKind::contract, msg("scatter_rows: duplicate row ", r));
        hit[static_cast<size_t>(r)] = 1;
    }
    Tensor out = make_like({n, d}, base.prec());
    with_prec(base.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* bp = data_ptr<T>(base.store());
        const T* vp = data_ptr<T>(values.store());
        T* op = data_ptr<T>(out.store());
        std::memcpy(op, bp, static_cast<size_t>(n * d) * sizeof(T));
        for (size_t i = 0; i < rows.size(); ++i)
            std::memcpy(op + rows[i] * d, vp + static_cast<int64_t>(i) * d, static_cast<size_t>(d) * sizeof(T));
    });
    if (should_record({base, values})) {
        Tensor bc = base, vc = values, oc = out;
        std::vector<int64_t> rc = rows;
        std::vector<char> hc = hit;
        maybe_record("scatter_rows", {base, values}, out, [bc, vc, oc, rc, hc, n, d]() mutable {
            with_prec(bc.prec(), [&](auto tag) {
                using T = decltype(tag);
                const T* dout = data_ptr<T>(oc.grad_store());
                if (wants_grad(bc)) {
                    T* db = data_ptr<T>(bc.grad_store());
                    for (int64_t i = 0; i < n; ++i) {
                        if (hc[static_cast<size_t>(i)]) continue;
                        const T* src = dout + i * d;
                        T* dst = db + i * d;
                        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                    }
                }
                if (wants_grad(vc)) {
                    T* dv = data_ptr<T>(vc.grad_store());
                    for (size_t i = 0; i < rc.size(); ++i) {
                        const T* src = dout + rc[i] * d;
                        T* dst = dv + static_cast<int64_t>(i) * d;
                        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                    }
                }
            });
        });
    }
    return out;
}

Tensor group_mean(const Tensor& a, const std::vector<std::vector<int64_t>>& groups) {
    require_rank2(a, "group_mean");
    int64_t n = a.dim(0), d = a.dim(1);
    for (const auto& g : groups) {
        check(!g.empty(), ErrKind::contract, "group_mean: empty group");
        for (int64_t r : g) check(r >= 0 && r < n, ErrKind::index, msg("group_mean: row ", r, " of ", n));
    }
    Tensor out = make_like({static_cast<int64_t>(groups.size()), d}, a.prec());
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        for (size_t g = 0; g < groups.size(); ++g) {
            T* orow = op + static_cast<int64_t>(g) * d;
            for (int64_t r : groups[g]) {
                const T* arow = ap + r * d;
                for (int64_t j = 0; j < d; ++j) orow[j] += arow[j];
            }
            T inv = T(1) / static_cast<T>(groups[g].size());
            for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
        }
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        std::vector<std::vector<int64_t>> gc = groups;
        maybe_record("group_mean", {a}, out, [ac, oc, gc, d]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                const T* dout = data_ptr<T>(oc.grad_store());
                T* da = data_ptr<T>(ac.grad_store());
                for (size_t g = 0; g < gc.size(); ++g) {
                    const T* orow = dout + static_cast<int64_t>(g) * d;
                    T inv = T(1) / static_cast<T>(gc[g].size());
                    for (int64_t r : gc[g]) {
                        T* dst = da + r * d;
                        for (int64_t j = 0; j < d; ++j) dst[j] += orow[j] * inv;
                    }
                }
            });
        });
    }
    return out;
}

Tensor rmsnorm(const Tensor& a, const Tensor& gain, double eps) {
    require_rank2(a, "rmsnorm");
    require_same_prec(a, gain, "rmsnorm");
    int64_t n = a.dim(0), d = a.dim(1);
    check(gain.rank() == 1 && gain.dim(0) == d, ErrKind::dimension, "rmsnorm: gain width mismatch");
    Tensor out = make_like({n, d}, a.prec());
    auto inv_rms = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        const T* gp = data_ptr<T>(gain.store());
        T* op = data_ptr<T>(out.store());
        for (int64_t i = 0; i < n; ++i) {
            const T* x = ap + i * d;
            T ss = T(0);
            for (int64_t j = 0; j < d; ++j) ss += x[j] * x[j];
            T r = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
            (*inv_rms)[static_cast<size_t>(i)] = static_cast<double>(r);
            T* y = op + i * d;
            for (int64_t j = 0; j < d; ++j) y[j] = x[j] * r * gp[j];
        }
    });
    if (should_record({a, gain})) {
        Tensor ac = a, gcn = gain, oc = out;
        maybe_record("rmsnorm", {a, gain}, out, [ac, gcn, oc, inv_rms, n, d]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                const T* dout = data_ptr<T>(oc.grad_store());
                const T* ap = data_ptr<T>(ac.store());
                const T* gp = data_ptr<T>(gcn.store());
                bool wa = wants_grad(ac), wg = wants_grad(gcn);
                T* da = wa ? data_ptr<T>(ac.grad_store()) : nullptr;
                T* dg = wg ? data_ptr<T>(gcn.grad_store()) : nullptr;
                for (int64_t i = 0; i < n; ++i) {
                    const T* x = ap + i * d;
                    const T* dy = dout + i * d;
                    T r = static_cast<T>((*inv_rms)[static_cast<size_t>(i)]);
                    if (wa) {
                        T s = T(0);
                        for (int64_t j = 0; j < d; ++j) s += dy[j] * gp[j] * x[j];
                        T coef = r * r * r * s / static_cast<T>(d);
                        T* dst = da + i * d;
                        for (int64_t j = 0; j < d; ++j) dst[j] += gp[j] * r * dy[j] - x[j] * coef;
                    }
                    if (wg)
                        for (int64_t j = 0; j < d; ++j) dg[j] += dy[j] * x[j] * r;
                }
            });
        });
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    Tensor out = make_like(a.shape(), a.prec());
    int64_t n = a.numel();
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        for (int64_t i = 0; i < n; ++i) {
            T x = ap[i];
            op[i] = T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
        }
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        maybe_record("gelu", {a}, out, [ac, oc, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                const T* dout = data_ptr<T>(oc.grad_store());
                const T* ap = data_ptr<T>(ac.store());
                T* da = data_ptr<T>(ac.grad_store());
                for (int64_t i = 0; i < n; ++i) {
                    T x = ap[i];
                    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
                    T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
                    da[i] += dout[i] * (cdf + x * pdf);
                }
            });
        });
    }
    return out;
}

Tensor rope(const Tensor& a, const std::vector<int64_t>& positions, int heads, double base) {
    require_rank2(a, "rope");
    int64_t n = a.dim(0), d = a.dim(1);
    check(static_cast<int64_t>(positions.size()) == n, ErrKind::dimension,
          msg("rope: ", positions.size(), " positions for ", n, " rows"));
    check(heads > 0 && d % heads == 0, ErrKind::contract, "rope: width not divisible by heads");
    int64_t dh = d / heads;
    check(dh % 2 == 0, ErrKind::contract, "rope: head width must be even");
    Tensor out = make_like({n, d}, a.prec());
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        for (int64_t i = 0; i < n; ++i) {
            double pos = static_cast<double>(positions[static_cast<size_t>(i)]);
            for (int h = 0; h < heads; ++h) {
                const T* x = ap + i * d + static_cast<int64_t>(h) * dh;
                T* y = op + i * d + static_cast<int64_t>(h) * dh;
                for (int64_t p = 0; p < dh / 2; ++p) {
                    double ang = pos * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(dh));
                    T c = static_cast<T>(std::cos(ang)), s = static_cast<T>(std::sin(ang));
                    T x0 = x[2 * p], x1 = x[2 * p + 1];
                    y[2 * p] = x0 * c - x1 * s;
                    y[2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        std::vector<int64_t> pc = positions;
        maybe_record("rope", {a}, out, [ac, oc, pc, heads, base, n, d, dh]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                const T* dout = data_ptr<T>(oc.grad_store());
                T* da = data_ptr<T>(ac.grad_store());
                for (int64_t i = 0; i < n; ++i) {
                    double pos = static_cast<double>(pc[static_cast<size_t>(i)]);
                    for (int h = 0; h < heads; ++h) {
                        const T* dy = dout + i * d + static_cast<int64_t>(h) * dh;
                        T* dx = da + i * d + static_cast<int64_t>(h) * dh;
                        for (int64_t p = 0; p < dh / 2; ++p) {
                            double ang = pos * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(dh));
                            T c = static_cast<T>(std::cos(ang)), s = static_cast<T>(std::sin(ang));
                            T d0 = dy[2 * p], d1 = dy[2 * p + 1];
                            dx[2 * p] += d0 * c + d1 * s;
                            dx[2 * p + 1] += -d0 * s + d1 * c;
                        }
                    }
                }
            });
        });
    }
    return out;
}

namespace {

Tensor attention_impl(const Tensor& q, const Tensor& k, const Tensor& v,
                      std::shared_ptr<std::vector<int64_t>> lo, std::shared_ptr<std::vector<int64_t>> hi,
                      int heads, const char* name) {
    require_rank2(q, name);
    require_rank2(k, name);
    require_rank2(v, name);
    require_same_prec(q, k, name);
    require_same_prec(q, v, name);
    int64_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
    check(k.dim(1) == d && v.dim(1) == d && v.dim(0) == nk, ErrKind::dimension, msg(name, ": q/k/v shape mismatch"));
    check(heads > 0 && d % heads == 0, ErrKind::contract, msg(name, ": width not divisible by heads"));
    for (int64_t i = 0; i < nq; ++i) {
        int64_t a = (*lo)[static_cast<size_t>(i)], b = (*hi)[static_cast<size_t>(i)];
        check(a >= 0 && a < b && b <= nk, ErrKind::contract, msg(name, ": empty or invalid range [", a, ",", b, ") for query ", i));
    }
    double scl = 1.0 / std::sqrt(static_cast<double>(d / heads));
    Tensor out = make_like({nq, d}, q.prec());

    bool rec = should_record({q, k, v});
    std::shared_ptr<std::vector<double>> probs;
    std::shared_ptr<std::vector<int64_t>> poff;
    double* probs_ptr = nullptr;
    const int64_t* poff_ptr = nullptr;
    if (rec) {
        poff = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(heads) * static_cast<size_t>(nq));
        int64_t off = 0;
        for (int h = 0; h < heads; ++h)
            for (int64_t i = 0; i < nq; ++i) {
                (*poff)[static_cast<size_t>(h) * static_cast<size_t>(nq) + static_cast<size_t>(i)] = off;
                off += (*hi)[static_cast<size_t>(i)] - (*lo)[static_cast<size_t>(i)];
            }
        probs = std::make_shared<std::vector<double>>(static_cast<size_t>(off));
        probs_ptr = probs->data();
        poff_ptr = poff->data();
    }

    with_prec(q.prec(), [&](auto tag) {
        using T = decltype(tag);
        kern::attn_ranges<T>(data_ptr<T>(q.store()), data_ptr<T>(k.store()), data_ptr<T>(v.store()),
                             data_ptr<T>(out.store()), nq, nk, heads, d, scl, lo->data(), hi->data(),
                             probs_ptr, poff_ptr);
    });

    if (rec) {
        Tensor qc = q, kc = k, vc = v, oc = out;
        maybe_record(name, {q, k, v}, out, [qc, kc, vc, oc, lo, hi, probs, poff, heads, scl, nq, d]() mutable {
            with_prec(qc.prec(), [&](auto tag) {
                using T = decltype(tag);
                int64_t dh = d / heads;
                const T* dout = data_ptr<T>(oc.grad_store());
                const T* qp = data_ptr<T>(qc.store());
                const T* kp = data_ptr<T>(kc.store());
                const T* vp = data_ptr<T>(vc.store());
                bool wq = wants_grad(qc), wk = wants_grad(kc), wv = wants_grad(vc);
                T* dq = wq ? data_ptr<T>(qc.grad_store()) : nullptr;
                T* dk = wk ? data_ptr<T>(kc.grad_store()) : nullptr;
                T* dv = wv ? data_ptr<T>(vc.grad_store()) : nullptr;
                std::vector<T> dp;
                unsigned long long mac_total = 0;
                for (int h = 0; h < heads; ++h) {
                    for (int64_t i = 0; i < nq; ++i) {
                        int64_t a = (*lo)[static_cast<size_t>(i)], b = (*hi)[static_cast<size_t>(i)];
                        int64_t len = b - a;
                        const double* prow =
                            probs->data() + (*poff)[static_cast<size_t>(h) * static_cast<size_t>(nq) + static_cast<size_t>(i)];
                        const T* doi = dout + i * d + static_cast<int64_t>(h) * dh;
                        dp.assign(static_cast<size_t>(len), T(0));
                        // dp_j = dout . v_j ; dv_j += p_j * dout
                        for (int64_t j = 0; j < len; ++j) {
                            const T* vj = vp + (a + j) * d + static_cast<int64_t>(h) * dh;
                            T acc = T(0);
                            for (int64_t e = 0; e < dh; ++e) acc += doi[e] * vj[e];
                            dp[static_cast<size_t>(j)] = acc;
                            if (wv) {
                                T pj = static_cast<T>(prow[j]);
                                T* dvj = dv + (a + j) * d + static_cast<int64_t>(h) * dh;
                                for (int64_t e = 0; e < dh; ++e) dvj[e] += pj * doi[e];
                            }
                        }
                        // softmax backward: ds_j = p_j * (dp_j - sum_l p_l dp_l)
                        T sum_pd = T(0);
                        for (int64_t j = 0; j < len; ++j) sum_pd += static_cast<T>(prow[j]) * dp[static_cast<size_t>(j)];
                        const T* qi = qp + i * d + static_cast<int64_t>(h) * dh;
                        for (int64_t j = 0; j < len; ++j) {
                            T ds = static_cast<T>(prow[j]) * (dp[static_cast<size_t>(j)] - sum_pd) * static_cast<T>(scl);
                            const T* kj = kp + (a + j) * d + static_cast<int64_t>(h) * dh;
                            if (wq) {
                                T* dqi = dq + i * d + static_cast<int64_t>(h) * dh;
                                for (int64_t e = 0; e < dh; ++e) dqi[e] += ds * kj[e];
                            }
                            if (wk) {
                                T* dkj = dk + (a + j) * d + static_cast<int64_t>(h) * dh;
                                for (int64_t e = 0; e < dh; ++e) dkj[e] += ds * qi[e];
                            }
                        }
                        mac_total += static_cast<unsigned long long>(len) * static_cast<unsigned long long>(dh) * 4ull;
                    }
                }
                kern::count_macs(mac_total);
            });
        });
    }
    return out;
}

}  // namespace

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    int64_t n = q.dim(0);
    check(k.dim(0) == n, ErrKind::dimension, "causal_attention: q/k length mismatch");
    auto lo = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n), 0);
    auto hi = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) (*hi)[static_cast<size_t>(i)] = i + 1;
    return attention_impl(q, k, v, lo, hi, heads, "causal_attention");
}

Tensor ranged_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const std::vector<int64_t>& lo, const std::vector<int64_t>& hi, int heads) {
    check(lo.size() == hi.size() && static_cast<int64_t>(lo.size()) == q.dim(0), ErrKind::dimension,
          "ranged_attention: range list length mismatch");
    auto lop = std::make_shared<std::vector<int64_t>>(lo);
    auto hip = std::make_shared<std::vector<int64_t>>(hi);
    return attention_impl(q, k, v, lop, hip, heads, "ranged_attention");
}

Tensor softmax_ce(const Tensor& logits, const std::vector<int>& targets) {
    require_rank2(logits, "softmax_ce");
    int64_t n = logits.dim(0), vsz = logits.dim(1);
    check(static_cast<int64_t>(targets.size()) == n, ErrKind::dimension,
          msg("softmax_ce: ", targets.size(), " targets for ", n, " rows"));
    check(n > 0, ErrKind::contract, "softmax_ce: empty batch");
    for (int t : targets) check(t >= 0 && t < vsz, ErrKind::index, msg("softmax_ce: target ", t, " of ", vsz));
    Tensor out = make_like({1}, logits.prec());
    with_prec(logits.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* lp = data_ptr<T>(logits.store());
        T total = T(0);
        for (int64_t i = 0; i < n; ++i) {
            const T* row = lp + i * vsz;
            T mx = row[0];
            for (int64_t j = 1; j < vsz; ++j)
                if (row[j] > mx) mx = row[j];
            T sum = T(0);
            for (int64_t j = 0; j < vsz; ++j) sum += std::exp(row[j] - mx);
            T lse = mx + std::log(sum);
            total += lse - row[targets[static_cast<size_t>(i)]];
        }
        data_ptr<T>(out.store())[0] = total / static_cast<T>(n);
    });
    if (should_record({logits})) {
        Tensor lc = logits, oc = out;
        std::vector<int> tc = targets;
        maybe_record("softmax_ce", {logits}, out, [lc, oc, tc, n, vsz]() mutable {
            with_prec(lc.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(lc)) return;
                T g = data_ptr<T>(oc.grad_store())[0] / static_cast<T>(n);
                const T* lp = data_ptr<T>(lc.store());
                T* dl = data_ptr<T>(lc.grad_store());
                for (int64_t i = 0; i < n; ++i) {
                    const T* row = lp + i * vsz;
                    T mx = row[0];
                    for (int64_t j = 1; j < vsz; ++j)
                        if (row[j] > mx) mx = row[j];
                    T sum = T(0);
                    for (int64_t j = 0; j < vsz; ++j) sum += std::exp(row[j] - mx);
                    T* drow = dl + i * vsz;
                    for (int64_t j = 0; j < vsz; ++j) {
                        T p = std::exp(row[j] - mx) / sum;
                        drow[j] += g * (p - (j == tc[static_cast<size_t>(i)] ? T(1) : T(0)));
                    }
                }
            });
        });
    }
    return out;
}

Tensor l2_normalize_rows(const Tensor& a) {
    require_rank2(a, "l2_normalize_rows");
    int64_t n = a.dim(0), d = a.dim(1);
    Tensor out = make_like({n, d}, a.prec());
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T* op = data_ptr<T>(out.store());
        for (int64_t i = 0; i < n; ++i) {
            const T* x = ap + i * d;
            T ss = T(0);
            for (int64_t j = 0; j < d; ++j) ss += x[j] * x[j];
            T nrm = std::sqrt(ss);
            check(static_cast<double>(nrm) > 1e-30, ErrKind::numeric,
                  msg("l2_normalize_rows: zero-norm row ", i));
            (*norms)[static_cast<size_t>(i)] = static_cast<double>(nrm);
            T inv = T(1) / nrm;
            T* y = op + i * d;
            for (int64_t j = 0; j < d; ++j) y[j] = x[j] * inv;
        }
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        maybe_record("l2_normalize_rows", {a}, out, [ac, oc, norms, n, d]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                const T* dout = data_ptr<T>(oc.grad_store());
                const T* op = data_ptr<T>(oc.store());
                T* da = data_ptr<T>(ac.grad_store());
                for (int64_t i = 0; i < n; ++i) {
                    const T* y = op + i * d;
                    const T* dy = dout + i * d;
                    T ydy = T(0);
                    for (int64_t j = 0; j < d; ++j) ydy += y[j] * dy[j];
                    T inv = static_cast<T>(1.0 / (*norms)[static_cast<size_t>(i)]);
                    T* dst = da + i * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += (dy[j] - y[j] * ydy) * inv;
                }
            });
        });
    }
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_prec(a, b, "mse");
    check(a.shape() == b.shape(), ErrKind::dimension, "mse: shape mismatch");
    int64_t n = a.numel();
    check(n > 0, ErrKind::contract, "mse: empty tensors");
    Tensor out = make_like({1}, a.prec());
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        const T* bp = data_ptr<T>(b.store());
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) {
            T dlt = ap[i] - bp[i];
            acc += dlt * dlt;
        }
        data_ptr<T>(out.store())[0] = acc / static_cast<T>(n);
    });
    if (should_record({a, b})) {
        Tensor ac = a, bc = b, oc = out;
        maybe_record("mse", {a, b}, out, [ac, bc, oc, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                T g = data_ptr<T>(oc.grad_store())[0] * T(2) / static_cast<T>(n);
                const T* ap = data_ptr<T>(ac.store());
                const T* bp = data_ptr<T>(bc.store());
                if (wants_grad(ac)) {
                    T* da = data_ptr<T>(ac.grad_store());
                    for (int64_t i = 0; i < n; ++i) da[i] += g * (ap[i] - bp[i]);
                }
                if (wants_grad(bc)) {
                    T* db = data_ptr<T>(bc.grad_store());
                    for (int64_t i = 0; i < n; ++i) db[i] -= g * (ap[i] - bp[i]);
                }
            });
        });
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    int64_t n = a.numel();
    Tensor out = make_like({1}, a.prec());
    with_prec(a.prec(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = data_ptr<T>(a.store());
        T acc = T(0);
        for (int64_t i = 0; i < n; ++i) acc += ap[i];
        data_ptr<T>(out.store())[0] = acc;
    });
    if (should_record({a})) {
        Tensor ac = a, oc = out;
        maybe_record("sum_all", {a}, out, [ac, oc, n]() mutable {
            with_prec(ac.prec(), [&](auto tag) {
                using T = decltype(tag);
                if (!wants_grad(ac)) return;
                T g = data_ptr<T>(oc.grad_store())[0];
                T* da = data_ptr<T>(ac.grad_store());
                for (int64_t i = 0; i < n; ++i) da[i] += g;
            });
        });
    }
    return out;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
    check(x.prec() == Prec::f64, ErrKind::contract, "grad_check requires an f64 tensor");
    x.set_requires_grad(true);
    x.zero_grad();
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = f(x);
        check(y.defined() && y.numel() == 1, ErrKind::contract, "grad_check: f must return a scalar");
        tape.backward(y);
        analytic.assign(static_cast<size_t>(x.numel()), 0.0);
        if (x.has_grad())
            for (int64_t i = 0; i < x.numel(); ++i) analytic[static_cast<size_t>(i)] = x.grad_at(i);
    }
    auto eval = [&]() {
        NoGradGuard ng;
        Tensor y = f(x);
        double v = y.at(0);
        check(std::isfinite(v), ErrKind::numeric, "grad_check: non-finite objective");
        return v;
    };
    GradCheckReport rep;
    rep.n_checked = x.numel();
    for (int64_t i = 0; i < x.numel(); ++i) {
        double orig = x.at(i);
        x.set(i, orig + h);
        double yp = eval();
        x.set(i, orig - h);
        double ym = eval();
        x.set(i, orig);
        double fd = (yp - ym) / (2.0 * h);
        double a = analytic[static_cast<size_t>(i)];
        check(std::isfinite(a), ErrKind::numeric, msg("grad_check: non-finite analytic gradient at ", i));
        double diff = std::fabs(a - fd);
        double rel = diff / std::max(1.0, std::fabs(a));
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
        }
        if (diff > rep.max_abs_diff) rep.max_abs_diff = diff;
    }
    return rep;
}

}  // namespace evlm::ops
