#pragma once

#include <functional>
#include <vector>

#include "evlm/tensor.hpp"

// Differentiable operations. Each op validates shapes, computes the forward
// result via the kernels, and — when a tape is live and an input participates
// in differentiation — records a node whose closure accumulates input
// gradients strictly sequentially.

namespace evlm::ops {

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                        // [m,n] -> [n,m]
Tensor add(const Tensor& a, const Tensor& b);             // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor scale(const Tensor& a, double s);
Tensor scale_by(const Tensor& a, const Tensor& s);        // s is a [1] tensor
Tensor exp(const Tensor& a);
Tensor add_rowwise(const Tensor& a, const Tensor& bias);  // [n,d] + [d]
Tensor concat_rows(const std::vector<Tensor>& parts);     // all [n_i,d]
Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& rows);
// Copy of `base` with base[rows[i]] replaced by values[i]; rows must be unique.
Tensor scatter_rows(const Tensor& base, const std::vector<int64_t>& rows, const Tensor& values);
Tensor group_mean(const Tensor& a, const std::vector<std::vector<int64_t>>& groups);
Tensor rmsnorm(const Tensor& a, const Tensor& gain, double eps = 1e-6);
Tensor gelu(const Tensor& a);  // exact erf form

// Rotary position encoding applied per head to pair (2p, 2p+1); positions are
// supplied explicitly so merged sequences can keep their original indices.
Tensor rope(const Tensor& a, const std::vector<int64_t>& positions, int heads, double base = 10000.0);

// Multi-head attention. causal: query i sees keys [0, i] of the same buffer.
// ranged: query i sees keys [lo[i], hi[i]) of a separate key/value buffer.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
Tensor ranged_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const std::vector<int64_t>& lo, const std::vector<int64_t>& hi, int heads);

// Mean cross-entropy of rows of `logits` against integer targets.
Tensor softmax_ce(const Tensor& logits, const std::vector<int>& targets);
Tensor l2_normalize_rows(const Tensor& a);  // numeric error on a zero-norm row
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum_all(const Tensor& a);

struct GradCheckReport {
    double max_abs_diff = 0.0;
    double max_rel_err = 0.0;  // |analytic - numeric| / max(1, |analytic|)
    int64_t worst_index = -1;
    int64_t n_checked = 0;
};

// Central-difference check of d f(x) / dx against the tape gradient. f must
// return a scalar; x must be f64. x's values are restored on return.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-6);

}  // namespace evlm::ops
