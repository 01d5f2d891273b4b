#include "evlm/tensor.hpp"

#include <algorithm>

namespace evlm {

namespace {
Prec g_default_prec = Prec::f64;
thread_local Tape* g_tape = nullptr;

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        check(d >= 0, ErrKind::dimension, msg("negative extent ", d));
        n *= d;
    }
    return n;
}
}  // namespace

Prec default_prec() { return g_default_prec; }
void set_default_prec(Prec p) { g_default_prec = p; }

Storage::Storage(Prec p, int64_t n) : prec_(p) {
    if (p == Prec::f32)
        f_.assign(static_cast<size_t>(n), 0.0f);
    else
        d_.assign(static_cast<size_t>(n), 0.0);
}

void Storage::fill(double v) {
    if (prec_ == Prec::f32)
        std::fill(f_.begin(), f_.end(), static_cast<float>(v));
    else
        std::fill(d_.begin(), d_.end(), v);
}

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    int64_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data = Storage(g_default_prec, n);
    impl->requires_grad = requires_grad;
    return wrap_impl(std::move(impl));
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    Tensor t = zeros(std::move(shape));
    t.store().fill(v);
    return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, const std::vector<double>& vals) {
    Tensor t = zeros(std::move(shape));
    check(t.numel() == static_cast<int64_t>(vals.size()), ErrKind::dimension,
          msg("from: ", vals.size(), " values for ", t.numel(), " elements"));
    for (int64_t i = 0; i < t.numel(); ++i) t.store().set(i, vals[static_cast<size_t>(i)]);
    return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stdev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (int64_t i = 0; i < t.numel(); ++i) t.store().set(i, rng.normal() * stdev);
    return t;
}

const std::vector<int64_t>& Tensor::shape() const {
    check(defined(), ErrKind::contract, "shape() on undefined tensor");
    return impl_->shape;
}

int64_t Tensor::dim(int i) const {
    const auto& s = shape();
    check(i >= 0 && i < static_cast<int>(s.size()), ErrKind::index, msg("dim ", i, " of rank ", s.size()));
    return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

Prec Tensor::prec() const {
    check(defined(), ErrKind::contract, "prec() on undefined tensor");
    return impl_->data.prec();
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool b) {
    check(defined(), ErrKind::contract, "set_requires_grad on undefined tensor");
    impl_->requires_grad = b;
}
bool Tensor::attached() const { return impl_ && impl_->attached; }

// Hot-path accessors build their failure message lazily: an eager msg() here
// costs an ostringstream per element access and dominates optimizer loops.
double Tensor::at(int64_t flat) const {
    if (!(defined() && flat >= 0 && flat < numel())) raise(ErrKind::index, msg("at(", flat, ") numel ", numel()));
    return impl_->data.get(flat);
}

void Tensor::set(int64_t flat, double v) {
    if (!(defined() && flat >= 0 && flat < numel())) raise(ErrKind::index, msg("set(", flat, ") numel ", numel()));
    impl_->data.set(flat, v);
}

double Tensor::at2(int64_t r, int64_t c) const {
    check(rank() == 2, ErrKind::dimension, "at2 on non-matrix");
    if (!(r >= 0 && r < dim(0) && c >= 0 && c < dim(1))) raise(ErrKind::index, msg("at2(", r, ",", c, ")"));
    return impl_->data.get(r * dim(1) + c);
}

Storage& Tensor::store() {
    check(defined(), ErrKind::contract, "store() on undefined tensor");
    return impl_->data;
}
const Storage& Tensor::store() const {
    check(defined(), ErrKind::contract, "store() on undefined tensor");
    return impl_->data;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

Storage& Tensor::grad_store() {
    check(defined(), ErrKind::contract, "grad_store() on undefined tensor");
    if (!impl_->grad) impl_->grad = std::make_unique<Storage>(impl_->data.prec(), numel());
    return *impl_->grad;
}

double Tensor::grad_at(int64_t flat) const {
    check(has_grad(), ErrKind::contract, "grad_at without gradient");
    if (!(flat >= 0 && flat < numel())) raise(ErrKind::index, msg("grad_at(", flat, ")"));
    return impl_->grad->get(flat);
}

void Tensor::zero_grad() {
    if (impl_ && impl_->grad) impl_->grad->fill(0.0);
}

Tensor Tensor::detached_clone() const {
    check(defined(), ErrKind::contract, "detached_clone on undefined tensor");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return wrap_impl(std::move(impl));
}

std::vector<double> Tensor::to_vec() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = impl_->data.get(i);
    return out;
}

Tape::Tape() : prev_(g_tape) { g_tape = this; }

Tape::~Tape() { g_tape = prev_; }

Tape* Tape::current() { return g_tape; }

int Tape::record(const char* op, std::vector<Tensor> ins, Tensor& out, std::function<void()> bwd) {
    Node node;
    node.op = op;
    node.out = out.impl_ptr();
    node.ins.reserve(ins.size());
    for (const Tensor& t : ins) node.ins.push_back(t.impl_ptr());
    node.bwd = std::move(bwd);
    out.impl()->attached = true;
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& root) {
    check(root.defined() && root.numel() == 1, ErrKind::contract, "backward root must be a scalar");
    check(root.attached() || root.requires_grad(), ErrKind::contract, "backward root is not on the tape");
    Tensor r = root;
    r.grad_store().fill(1.0);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.out->grad) n.bwd();
    }
}

NoGradGuard::NoGradGuard() : saved_(g_tape) { g_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_tape = saved_; }

bool recording() { return g_tape != nullptr; }

bool wants_grad(const Tensor& t) { return t.defined() && (t.requires_grad() || t.attached()); }

}  // namespace evlm
