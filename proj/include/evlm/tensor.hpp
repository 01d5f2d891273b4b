#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "evlm/common.hpp"

// Reverse-mode automatic differentiation on dense row-major tensors.
//
// Precision is a runtime property: every tensor is either f32 or f64, chosen
// from a settable default at creation. Verification (gradient checks, oracle
// comparisons) runs in f64; training runs in f32 for throughput.
//
// A Tape scope records every differentiable op executed while it is the
// current tape. backward() sweeps the recorded nodes once in reverse order,
// calling each node's stored closure, which accumulates into input gradients
// strictly sequentially — no atomics, no parallel reductions — so gradients
// are bit-reproducible run to run.

namespace evlm {

enum class Prec { f32, f64 };

Prec default_prec();
void set_default_prec(Prec p);

struct PrecGuard {
    explicit PrecGuard(Prec p) : saved_(default_prec()) { set_default_prec(p); }
    ~PrecGuard() { set_default_prec(saved_); }

private:
    Prec saved_;
};

class Storage {
public:
    Storage() : prec_(Prec::f64) {}
    Storage(Prec p, int64_t n);

    int64_t size() const { return prec_ == Prec::f32 ? static_cast<int64_t>(f_.size()) : static_cast<int64_t>(d_.size()); }
    Prec prec() const { return prec_; }

    double get(int64_t i) const { return prec_ == Prec::f32 ? static_cast<double>(f_[static_cast<size_t>(i)]) : d_[static_cast<size_t>(i)]; }
    void set(int64_t i, double v) {
        if (prec_ == Prec::f32)
            f_[static_cast<size_t>(i)] = static_cast<float>(v);
        else
            d_[static_cast<size_t>(i)] = v;
    }
    void add(int64_t i, double v) {
        if (prec_ == Prec::f32)
            f_[static_cast<size_t>(i)] += static_cast<float>(v);
        else
            d_[static_cast<size_t>(i)] += v;
    }

    float* f32() { return f_.data(); }
    const float* f32() const { return f_.data(); }
    double* f64() { return d_.data(); }
    const double* f64() const { return d_.data(); }

    // Calls fn with the raw pointer of the active precision.
    template <typename Fn>
    void visit(Fn&& fn) {
        if (prec_ == Prec::f32)
            fn(f_.data());
        else
            fn(d_.data());
    }
    template <typename Fn>
    void visit(Fn&& fn) const {
        if (prec_ == Prec::f32)
            fn(f_.data());
        else
            fn(d_.data());
    }

    void fill(double v);

private:
    Prec prec_;
    std::vector<float> f_;
    std::vector<double> d_;
};

struct TensorImpl {
    std::vector<int64_t> shape;
    Storage data;
    std::unique_ptr<Storage> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    bool attached = false;  // produced by a recorded op on the live tape
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<int64_t> shape, double v);
    static Tensor from(std::vector<int64_t> shape, const std::vector<double>& vals);
    static Tensor scalar(double v) { return full({1}, v); }
    static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stdev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int64_t>& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int64_t dim(int i) const;
    int64_t numel() const;
    Prec prec() const;

    bool requires_grad() const;
    void set_requires_grad(bool b);
    bool attached() const;

    double at(int64_t flat) const;
    void set(int64_t flat, double v);
    double at2(int64_t r, int64_t c) const;  // rank-2 convenience

    Storage& store();
    const Storage& store() const;

    bool has_grad() const;
    Storage& grad_store();  // allocates zeroed storage on first call
    double grad_at(int64_t flat) const;
    void zero_grad();

    Tensor detached_clone() const;  // copies values; drops grad/graph state
    std::vector<double> to_vec() const;

    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    friend Tensor wrap_impl(std::shared_ptr<TensorImpl>);
};

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl);

class Tape {
public:
    struct Node {
        const char* op;
        std::shared_ptr<TensorImpl> out;
        std::vector<std::shared_ptr<TensorImpl>> ins;
        std::function<void()> bwd;
    };

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    int record(const char* op, std::vector<Tensor> ins, Tensor& out, std::function<void()> bwd);

    // Seeds d(root)=1 and sweeps nodes newest-to-oldest, invoking each node's
    // backward closure once if its output received a gradient.
    void backward(const Tensor& root);

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }

private:
    std::vector<Node> nodes_;
    Tape* prev_;
};

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();

private:
    Tape* saved_;
};

// True when a tape is live and recording.
bool recording();
// A tensor participates in differentiation if it asks for grad or was
// produced by a recorded op.
bool wants_grad(const Tensor& t);

}  // namespace evlm
