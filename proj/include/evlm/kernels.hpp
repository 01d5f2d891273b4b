#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "evlm/common.hpp"

#ifdef EVLM_HAVE_OPENMP
#include <omp.h>
#endif

// Dense compute kernels. Two implementations of each: kern::serial::* is the
// plain-loop reference; the kern::* entry points are OpenMP-parallel across
// independent output elements. Both keep every reduction sequential in
// ascending index, so results are bitwise identical between the two paths and
// across thread counts. All kernels add to a global multiply-accumulate
// counter (one atomic add per call) used by the profiler.

namespace evlm::kern {

void reset_macs();
unsigned long long macs();
void count_macs(unsigned long long n);

inline int thread_id() {
#ifdef EVLM_HAVE_OPENMP
    return omp_get_thread_num();
#else
    return 0;
#endif
}

namespace serial {

// c(m x n) = a(m x k) . b(k x n); accumulate adds into c instead.
template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            const T* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    count_macs(static_cast<unsigned long long>(m) * k * n);
}

// c(m x n) = a(m x k) . b(n x k)^T. b is transposed into scratch first so the
// hot loop runs row-contiguous; per-element accumulation order over k is
// unchanged (ascending), so results match the direct dot-product form bitwise.
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
    std::vector<T> bt(static_cast<size_t>(k * n));
    for (int64_t j = 0; j < n; ++j)
        for (int64_t kk = 0; kk < k; ++kk) bt[static_cast<size_t>(kk * n + j)] = b[j * k + kk];
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            const T* brow = bt.data() + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    count_macs(static_cast<unsigned long long>(m) * k * n);
}

// c(k x n) = a(m x k)^T . b(m x n)
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
    for (int64_t i = 0; i < k; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        for (int64_t mm = 0; mm < m; ++mm) {
            T av = a[mm * k + i];
            const T* brow = b + mm * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    count_macs(static_cast<unsigned long long>(m) * k * n);
}

// Ranged multi-head attention. Query i attends to keys [lo[i], hi[i]) —
// causal self-attention uses lo=0, hi=i+1; marker cross-attention passes one
// segment per query. q is nq x d_model, k/v are nk x d_model, heads split
// d_model evenly. When probs != nullptr the softmax row for (head h, query i)
// is stored at probs + probs_off[h*nq + i] (length hi[i]-lo[i]) for backward.
template <typename T>
void attn_ranges(const T* q, const T* k, const T* v, T* out, int64_t nq, int64_t nk,
                 int heads, int64_t d_model, double scale, const int64_t* lo, const int64_t* hi,
                 double* probs, const int64_t* probs_off) {
    int64_t dh = d_model / heads;
    std::vector<T> sc(static_cast<size_t>(nk));
    for (int h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < nq; ++i) {
            int64_t a = lo[i], b = hi[i];
            const T* qi = q + i * d_model + h * dh;
            // scores
            for (int64_t j = a; j < b; ++j) {
                const T* kj = k + j * d_model + h * dh;
                T acc = T(0);
                for (int64_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
                sc[static_cast<size_t>(j - a)] = acc * T(scale);
            }
            // softmax (max-subtracted), sequential
            int64_t len = b - a;
            T mx = sc[0];
            for (int64_t j = 1; j < len; ++j)
                if (sc[static_cast<size_t>(j)] > mx) mx = sc[static_cast<size_t>(j)];
            T sum = T(0);
            for (int64_t j = 0; j < len; ++j) {
                sc[static_cast<size_t>(j)] = std::exp(sc[static_cast<size_t>(j)] - mx);
                sum += sc[static_cast<size_t>(j)];
            }
            T inv = T(1) / sum;
            for (int64_t j = 0; j < len; ++j) sc[static_cast<size_t>(j)] *= inv;
            if (probs) {
                double* prow = probs + probs_off[static_cast<int64_t>(h) * nq + i];
                for (int64_t j = 0; j < len; ++j) prow[j] = static_cast<double>(sc[static_cast<size_t>(j)]);
            }
            // weighted sum of values
            T* oi = out + i * d_model + h * dh;
            for (int64_t d = 0; d < dh; ++d) oi[d] = T(0);
            for (int64_t j = a; j < b; ++j) {
                T p = sc[static_cast<size_t>(j - a)];
                const T* vj = v + j * d_model + h * dh;
                for (int64_t d = 0; d < dh; ++d) oi[d] += p * vj[d];
            }
        }
    }
    unsigned long long total = 0;
    for (int64_t i = 0; i < nq; ++i) total += static_cast<unsigned long long>(hi[i] - lo[i]);
    count_macs(2ull * total * static_cast<unsigned long long>(d_model));
}

}  // namespace serial

template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
#ifdef EVLM_HAVE_OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            const T* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    count_macs(static_cast<unsigned long long>(m) * k * n);
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
    std::vector<T> bt(static_cast<size_t>(k * n));
#ifdef EVLM_HAVE_OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t j = 0; j < n; ++j)
        for (int64_t kk = 0; kk < k; ++kk) bt[static_cast<size_t>(kk * n + j)] = b[j * k + kk];
#ifdef EVLM_HAVE_OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            const T* brow = bt.data() + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    count_macs(static_cast<unsigned long long>(m) * k * n);
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate = false) {
#ifdef EVLM_HAVE_OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < k; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
        for (int64_t mm = 0; mm < m; ++mm) {
            T av = a[mm * k + i];
            const T* brow = b + mm * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    count_macs(static_cast<unsigned long long>(m) * k * n);
}

template <typename T>
void attn_ranges(const T* q, const T* k, const T* v, T* out, int64_t nq, int64_t nk,
                 int heads, int64_t d_model, double scale, const int64_t* lo, const int64_t* hi,
                 double* probs, const int64_t* probs_off) {
    int64_t dh = d_model / heads;
    int nthreads = threading::threads();
    std::vector<std::vector<T>> scratch(static_cast<size_t>(nthreads), std::vector<T>(static_cast<size_t>(nk)));
#ifdef EVLM_HAVE_OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < nq; ++i) {
            T* sc = scratch[static_cast<size_t>(thread_id())].data();
            int64_t a = lo[i], b = hi[i];
            const T* qi = q + i * d_model + h * dh;
            for (int64_t j = a; j < b; ++j) {
                const T* kj = k + j * d_model + h * dh;
                T acc = T(0);
                for (int64_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
                sc[j - a] = acc * T(scale);
            }
            int64_t len = b - a;
            T mx = sc[0];
            for (int64_t j = 1; j < len; ++j)
                if (sc[j] > mx) mx = sc[j];
            T sum = T(0);
            for (int64_t j = 0; j < len; ++j) {
                sc[j] = std::exp(sc[j] - mx);
                sum += sc[j];
            }
            T inv = T(1) / sum;
            for (int64_t j = 0; j < len; ++j) sc[j] *= inv;
            if (probs) {
                double* prow = probs + probs_off[static_cast<int64_t>(h) * nq + i];
                for (int64_t j = 0; j < len; ++j) prow[j] = static_cast<double>(sc[j]);
            }
            T* oi = out + i * d_model + h * dh;
            for (int64_t d = 0; d < dh; ++d) oi[d] = T(0);
            for (int64_t j = a; j < b; ++j) {
                T p = sc[j - a];
                const T* vj = v + j * d_model + h * dh;
                for (int64_t d = 0; d < dh; ++d) oi[d] += p * vj[d];
            }
        }
    }
    unsigned long long total = 0;
    for (int64_t i = 0; i < nq; ++i) total += static_cast<unsigned long long>(hi[i] - lo[i]);
    count_macs(2ull * total * static_cast<unsigned long long>(d_model));
}

}  // namespace evlm::kern
