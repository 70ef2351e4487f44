#include "mg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mg {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw std::invalid_argument("tensor: zero extent in shape");
        n *= e;
    }
    return n;
}

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

bool tracked(const Tensor& t) {
    return t.impl()->requires_grad || t.impl()->on_tape;
}

void ensure_grad(const std::shared_ptr<TensorImpl>& i) {
    if (i->grad.size() != i->data.size()) i->grad.assign(i->data.size(), 0.0);
}

// Marks `out` as a tape product of `ins` and records `fn` if a tape is live
// and at least one input is connected to it. Returns true if recorded.
bool record_op(const std::vector<Tensor>& ins, Tensor& out,
               std::function<void()> fn) {
    Tape* tape = Tape::current();
    if (!tape) return false;
    bool any = false;
    for (const Tensor& t : ins) any = any || tracked(t);
    if (!any) return false;
    for (const Tensor& t : ins)
        if (tracked(t)) { ensure_grad(t.impl()); t.impl()->on_tape = true; }
    out.impl()->on_tape = true;
    ensure_grad(out.impl());
    tape->record(std::move(fn));
    return true;
}

void check_2d(const Tensor& t, const char* who) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(who) + ": expected rank-2 tensor, got " +
                                    shape_str(t.shape()));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(who) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

// ---- Tensor --------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, real fill)
    : impl_(std::make_shared<TensorImpl>()) {
    std::size_t n = shape_numel(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(n, fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<real> data)
    : impl_(std::make_shared<TensorImpl>()) {
    std::size_t n = shape_numel(shape);
    if (n != data.size())
        throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
}

Tensor Tensor::scalar(real v) { return Tensor({1}, {v}); }
Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::randn(std::vector<std::size_t> shape, std::mt19937_64& rng, real stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<real> dist(0.0, stddev);
    for (real& v : t.impl_->data) v = dist(rng);
    return t;
}

Tensor Tensor::uniform(std::vector<std::size_t> shape, std::mt19937_64& rng, real lo, real hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<real> dist(lo, hi);
    for (real& v : t.impl_->data) v = dist(rng);
    return t;
}

std::size_t Tensor::rows() const { check_2d(*this, "rows"); return impl_->shape[0]; }
std::size_t Tensor::cols() const { check_2d(*this, "cols"); return impl_->shape[1]; }

real& Tensor::at(std::size_t r, std::size_t c) {
    return impl_->data[r * impl_->shape[1] + c];
}
real Tensor::at(std::size_t r, std::size_t c) const {
    return impl_->data[r * impl_->shape[1] + c];
}

real Tensor::value() const {
    if (size() != 1) throw std::invalid_argument("value(): tensor is not scalar");
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    if (rg) ensure_grad(impl_);
    return *this;
}

std::vector<real>& Tensor::grad() { ensure_grad(impl_); return impl_->grad; }
const std::vector<real>& Tensor::grad() const {
    if (impl_->grad.empty())
        throw std::runtime_error("grad(): no gradient present");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
}

// ---- Tape ----------------------------------------------------------------

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() {
    prev_ = g_current_tape;
    g_current_tape = this;
}

Tape::~Tape() {
    if (g_current_tape == this) g_current_tape = prev_;
}

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> fn) {
    if (consumed_)
        throw std::runtime_error("tape: recording after backward; build a fresh tape");
    nodes_.push_back(std::move(fn));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_)
        throw std::runtime_error("tape: backward called twice; the tape is consumed");
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(loss.shape()));
    if (!loss.impl()->on_tape)
        throw std::invalid_argument("backward: loss is not a product of this tape");
    consumed_ = true;
    ensure_grad(loss.impl());
    loss.impl()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
}

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul"); check_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions differ, " +
                                    shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    const real* A = a.data();
    const real* B = b.data();
    real* C = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        const real* Ai = A + i * k;
        real* Ci = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            real av = Ai[p];
            const real* Bp = B + p * n;
            for (std::size_t j = 0; j < n; ++j) Ci[j] += av * Bp[j];
        }
    }
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    record_op({a, b}, out, [ia, ib, io, m, k, n] {
        const real* G = io->grad.data();
        if (!ia->grad.empty()) {
            // dA = G * B^T
            real* dA = ia->grad.data();
            const real* B = ib->data.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    real acc = 0.0;
                    const real* Gi = G + i * n;
                    const real* Bp = B + p * n;
                    for (std::size_t j = 0; j < n; ++j) acc += Gi[j] * Bp[j];
                    dA[i * k + p] += acc;
                }
        }
        if (!ib->grad.empty()) {
            // dB = A^T * G
            real* dB = ib->grad.data();
            const real* A = ia->data.data();
            for (std::size_t i = 0; i < m; ++i) {
                const real* Ai = A + i * k;
                const real* Gi = G + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    real av = Ai[p];
                    real* dBp = dB + p * n;
                    for (std::size_t j = 0; j < n; ++j) dBp[j] += av * Gi[j];
                }
            }
        }
    });
    return out;
}

Tensor transpose(const Tensor& x) {
    check_2d(x, "transpose");
    std::size_t m = x.rows(), n = x.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
    auto ix = x.impl(), io = out.impl();
    record_op({x}, out, [ix, io, m, n] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                ix->grad[i * n + j] += io->grad[j * m + i];
    });
    return out;
}

namespace {

template <typename FwdFn, typename BwdFn>
Tensor binary_ew(const Tensor& a, const Tensor& b, const char* who,
                 FwdFn fwd, BwdFn bwd) {
    check_same_shape(a, b, who);
    Tensor out(a.shape());
    std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = fwd(a.at(i), b.at(i));
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    record_op({a, b}, out, [ia, ib, io, n, bwd] {
        for (std::size_t i = 0; i < n; ++i) {
            real g = io->grad[i];
            auto [da, db] = bwd(ia->data[i], ib->data[i]);
            if (!ia->grad.empty()) ia->grad[i] += g * da;
            if (!ib->grad.empty()) ib->grad[i] += g * db;
        }
    });
    return out;
}

template <typename FwdFn, typename BwdFn>
Tensor unary_ew(const Tensor& x, FwdFn fwd, BwdFn bwd) {
    Tensor out(x.shape());
    std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = fwd(x.at(i));
    auto ix = x.impl(), io = out.impl();
    record_op({x}, out, [ix, io, n, bwd] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < n; ++i)
            ix->grad[i] += io->grad[i] * bwd(ix->data[i]);
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_ew(a, b, "add",
                     [](real x, real y) { return x + y; },
                     [](real, real) { return std::pair<real, real>{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_ew(a, b, "sub",
                     [](real x, real y) { return x - y; },
                     [](real, real) { return std::pair<real, real>{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_ew(a, b, "mul",
                     [](real x, real y) { return x * y; },
                     [](real x, real y) { return std::pair<real, real>{y, x}; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
    return binary_ew(a, b, "divide",
                     [](real x, real y) { return x / y; },
                     [](real x, real y) {
                         return std::pair<real, real>{1.0 / y, -x / (y * y)};
                     });
}

Tensor scale(const Tensor& x, real c) {
    return unary_ew(x, [c](real v) { return v * c; }, [c](real) { return c; });
}

Tensor shift(const Tensor& x, real c) {
    return unary_ew(x, [c](real v) { return v + c; }, [](real) { return 1.0; });
}

namespace {
constexpr real kGeluC = 0.7978845608028654;  // sqrt(2/pi)

real gelu_fwd(real x) {
    real u = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

real gelu_bwd(real x) {
    real u = kGeluC * (x + 0.044715 * x * x * x);
    real t = std::tanh(u);
    real du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

real sigmoid_fwd(real x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

real softplus_fwd(real x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}
}  // namespace

Tensor gelu(const Tensor& x) { return unary_ew(x, gelu_fwd, gelu_bwd); }

Tensor relu(const Tensor& x) {
    return unary_ew(x, [](real v) { return v > 0 ? v : 0.0; },
                    [](real v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_ew(x, sigmoid_fwd, [](real v) {
        real s = sigmoid_fwd(v);
        return s * (1.0 - s);
    });
}

Tensor softplus(const Tensor& x) {
    return unary_ew(x, softplus_fwd, sigmoid_fwd);
}

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= x.rank())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for " + shape_str(x.shape()));
    if (x.rank() == 1) {
        Tensor x2 = reshape(x, {1, x.size()});
        return reshape(softmax(x2, 1), {x.size()});
    }
    check_2d(x, "softmax");
    if (axis == 0) return transpose(softmax(transpose(x), 1));

    std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        real mx = x.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        real sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            real e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    auto ix = x.impl(), io = out.impl();
    record_op({x}, out, [ix, io, m, n] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < m; ++i) {
            const real* y = io->data.data() + i * n;
            const real* gy = io->grad.data() + i * n;
            real dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
            real* gx = ix->grad.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
        }
    });
    return out;
}

Tensor sum_all(const Tensor& x) {
    real s = std::accumulate(x.vec().begin(), x.vec().end(), 0.0);
    Tensor out = Tensor::scalar(s);
    auto ix = x.impl(), io = out.impl();
    std::size_t n = x.size();
    record_op({x}, out, [ix, io, n] {
        if (ix->grad.empty()) return;
        real g = io->grad[0];
        for (std::size_t i = 0; i < n; ++i) ix->grad[i] += g;
    });
    return out;
}

Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0 / static_cast<real>(x.size()));
}

Tensor mean_rows(const Tensor& x) {
    check_2d(x, "mean_rows");
    std::size_t m = x.rows(), n = x.cols();
    Tensor out({1, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(0, j) += x.at(i, j);
    for (std::size_t j = 0; j < n; ++j) out.at(0, j) /= static_cast<real>(m);
    auto ix = x.impl(), io = out.impl();
    record_op({x}, out, [ix, io, m, n] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                ix->grad[i * n + j] += io->grad[j] / static_cast<real>(m);
    });
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    check_2d(x, "slice_rows");
    if (r0 >= r1 || r1 > x.rows())
        throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) +
                                    "," + std::to_string(r1) + ") for " +
                                    shape_str(x.shape()));
    std::size_t n = x.cols(), m = r1 - r0;
    Tensor out({m, n});
    std::copy(x.data() + r0 * n, x.data() + r1 * n, out.data());
    auto ix = x.impl(), io = out.impl();
    record_op({x}, out, [ix, io, r0, m, n] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < m * n; ++i) ix->grad[r0 * n + i] += io->grad[i];
    });
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    check_2d(x, "slice_cols");
    if (c0 >= c1 || c1 > x.cols())
        throw std::invalid_argument("slice_cols: bad range for " + shape_str(x.shape()));
    std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at(i, j) = x.at(i, c0 + j);
    auto ix = x.impl(), io = out.impl();
    record_op({x}, out, [ix, io, m, n, w, c0] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
                ix->grad[i * n + c0 + j] += io->grad[i * w + j];
    });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    std::size_t n = parts[0].cols(), m = 0;
    for (const Tensor& p : parts) {
        check_2d(p, "concat_rows");
        if (p.cols() != n)
            throw std::invalid_argument("concat_rows: column mismatch");
        m += p.rows();
    }
    Tensor out({m, n});
    std::size_t r = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + r * n);
        r += p.rows();
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    auto io = out.impl();
    record_op(parts, out, [impls, io, n] {
        std::size_t r = 0;
        for (auto& ip : impls) {
            std::size_t cnt = ip->data.size();
            if (!ip->grad.empty())
                for (std::size_t i = 0; i < cnt; ++i)
                    ip->grad[i] += io->grad[r * n + i];
            r += cnt / n;
        }
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    std::size_t m = parts[0].rows(), n = 0;
    for (const Tensor& p : parts) {
        check_2d(p, "concat_cols");
        if (p.rows() != m)
            throw std::invalid_argument("concat_cols: row mismatch");
        n += p.cols();
    }
    Tensor out({m, n});
    std::size_t c = 0;
    for (const Tensor& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j)
                out.at(i, c + j) = p.at(i, j);
        c += p.cols();
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) { impls.push_back(p.impl()); widths.push_back(p.cols()); }
    auto io = out.impl();
    record_op(parts, out, [impls, widths, io, m, n] {
        std::size_t c = 0;
        for (std::size_t pi = 0; pi < impls.size(); ++pi) {
            std::size_t w = widths[pi];
            if (!impls[pi]->grad.empty())
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        impls[pi]->grad[i * w + j] += io->grad[i * n + c + j];
            c += w;
        }
    });
    return out;
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != x.size())
        throw std::invalid_argument("reshape: element count mismatch, " +
                                    shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), x.vec());
    auto ix = x.impl(), io = out.impl();
    std::size_t n = x.size();
    record_op({x}, out, [ix, io, n] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < n; ++i) ix->grad[i] += io->grad[i];
    });
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    check_2d(x, "gather_rows");
    if (idx.empty()) throw std::invalid_argument("gather_rows: empty index list");
    std::size_t n = x.cols();
    Tensor out({idx.size(), n});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= x.rows())
            throw std::invalid_argument("gather_rows: index out of range");
        std::copy(x.data() + idx[i] * n, x.data() + (idx[i] + 1) * n,
                  out.data() + i * n);
    }
    auto ix = x.impl(), io = out.impl();
    record_op({x}, out, [ix, io, idx, n] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                ix->grad[idx[i] * n + j] += io->grad[i * n + j];
    });
    return out;
}

Tensor scatter_rows(const std::vector<std::size_t>& idx, const Tensor& src,
                    std::size_t num_rows) {
    check_2d(src, "scatter_rows");
    if (idx.size() != src.rows())
        throw std::invalid_argument("scatter_rows: index count != source rows");
    std::size_t n = src.cols();
    Tensor out({num_rows, n});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= num_rows)
            throw std::invalid_argument("scatter_rows: index out of range");
        for (std::size_t j = 0; j < n; ++j)
            out.at(idx[i], j) += src.at(i, j);
    }
    auto is = src.impl(), io = out.impl();
    record_op({src}, out, [is, io, idx, n] {
        if (is->grad.empty()) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                is->grad[i * n + j] += io->grad[idx[i] * n + j];
    });
    return out;
}

Tensor row_scale(const Tensor& x, const Tensor& s) {
    check_2d(x, "row_scale");
    if (s.size() != x.rows())
        throw std::invalid_argument("row_scale: scale length != row count");
    std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) * s.at(i);
    auto ix = x.impl(), is = s.impl(), io = out.impl();
    record_op({x, s}, out, [ix, is, io, m, n] {
        for (std::size_t i = 0; i < m; ++i) {
            real sv = is->data[i], acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                real g = io->grad[i * n + j];
                if (!ix->grad.empty()) ix->grad[i * n + j] += g * sv;
                acc += g * ix->data[i * n + j];
            }
            if (!is->grad.empty()) is->grad[i] += acc;
        }
    });
    return out;
}

Tensor gather_entries(const Tensor& x,
                      const std::vector<std::pair<std::size_t, std::size_t>>& rc) {
    check_2d(x, "gather_entries");
    if (rc.empty()) throw std::invalid_argument("gather_entries: empty list");
    Tensor out({rc.size()});
    for (std::size_t i = 0; i < rc.size(); ++i) {
        if (rc[i].first >= x.rows() || rc[i].second >= x.cols())
            throw std::invalid_argument("gather_entries: index out of range");
        out.at(i) = x.at(rc[i].first, rc[i].second);
    }
    auto ix = x.impl(), io = out.impl();
    std::size_t n = x.cols();
    record_op({x}, out, [ix, io, rc, n] {
        if (ix->grad.empty()) return;
        for (std::size_t i = 0; i < rc.size(); ++i)
            ix->grad[rc[i].first * n + rc[i].second] += io->grad[i];
    });
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_2d(x, "linear"); check_2d(w, "linear");
    std::size_t in = w.cols(), out_dim = w.rows();
    if (x.cols() != in)
        throw std::invalid_argument("linear: input width " + std::to_string(x.cols()) +
                                    " != weight in-dim " + std::to_string(in));
    if (b.defined() && b.size() != out_dim)
        throw std::invalid_argument("linear: bias length != out-dim");
    std::size_t m = x.rows();
    Tensor out({m, out_dim});
    for (std::size_t i = 0; i < m; ++i) {
        const real* xi = x.data() + i * in;
        real* oi = out.data() + i * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const real* wo = w.data() + o * in;
            real acc = b.defined() ? b.at(o) : 0.0;
            for (std::size_t j = 0; j < in; ++j) acc += xi[j] * wo[j];
            oi[o] = acc;
        }
    }
    auto ix = x.impl(), iw = w.impl(), io = out.impl();
    auto ib = b.defined() ? b.impl() : nullptr;
    std::vector<Tensor> ins = {x, w};
    if (b.defined()) ins.push_back(b);
    record_op(ins, out, [ix, iw, ib, io, m, in, out_dim] {
        const real* G = io->grad.data();
        if (!ix->grad.empty()) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    real g = G[i * out_dim + o];
                    const real* wo = iw->data.data() + o * in;
                    real* gx = ix->grad.data() + i * in;
                    for (std::size_t j = 0; j < in; ++j) gx[j] += g * wo[j];
                }
        }
        if (!iw->grad.empty()) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    real g = G[i * out_dim + o];
                    const real* xi = ix->data.data() + i * in;
                    real* gw = iw->grad.data() + o * in;
                    for (std::size_t j = 0; j < in; ++j) gw[j] += g * xi[j];
                }
        }
        if (ib && !ib->grad.empty()) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t o = 0; o < out_dim; ++o)
                    ib->grad[o] += G[i * out_dim + o];
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    check_2d(x, "layer_norm");
    std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n)
        throw std::invalid_argument("layer_norm: gain/bias length != feature dim");
    constexpr real eps = 1e-5;
    Tensor out({m, n});
    std::vector<real> inv_sigma(m), mu(m);
    for (std::size_t i = 0; i < m; ++i) {
        real mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += x.at(i, j);
        mean /= static_cast<real>(n);
        real var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            real d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<real>(n);
        mu[i] = mean;
        inv_sigma[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j)
            out.at(i, j) = (x.at(i, j) - mean) * inv_sigma[i] * gain.at(j) + bias.at(j);
    }
    auto ix = x.impl(), ig = gain.impl(), ib = bias.impl(), io = out.impl();
    record_op({x, gain, bias}, out, [ix, ig, ib, io, mu, inv_sigma, m, n] {
        for (std::size_t i = 0; i < m; ++i) {
            real is = inv_sigma[i];
            // xhat and the two row means needed by the input gradient
            real mean_gdy = 0.0, mean_gdyx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                real xh = (ix->data[i * n + j] - mu[i]) * is;
                real gdy = ig->data[j] * io->grad[i * n + j];
                mean_gdy += gdy;
                mean_gdyx += gdy * xh;
            }
            mean_gdy /= static_cast<real>(n);
            mean_gdyx /= static_cast<real>(n);
            for (std::size_t j = 0; j < n; ++j) {
                real xh = (ix->data[i * n + j] - mu[i]) * is;
                real gy = io->grad[i * n + j];
                if (!ix->grad.empty())
                    ix->grad[i * n + j] +=
                        (ig->data[j] * gy - mean_gdy - xh * mean_gdyx) * is;
                if (!ig->grad.empty()) ig->grad[j] += gy * xh;
                if (!ib->grad.empty()) ib->grad[j] += gy;
            }
        }
    });
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    check_2d(table, "embedding");
    if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
    std::size_t n = table.cols();
    Tensor out({ids.size(), n});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows())
            throw std::invalid_argument("embedding: id " + std::to_string(ids[i]) +
                                        " out of vocabulary");
        std::copy(table.data() + ids[i] * n, table.data() + (ids[i] + 1) * n,
                  out.data() + i * n);
    }
    auto it = table.impl(), io = out.impl();
    record_op({table}, out, [it, io, ids, n] {
        if (it->grad.empty()) return;
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                it->grad[ids[i] * n + j] += io->grad[i * n + j];
    });
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& include) {
    check_2d(logits, "cross_entropy");
    std::size_t m = logits.rows(), v = logits.cols();
    if (targets.size() != m || include.size() != m)
        throw std::invalid_argument("cross_entropy: targets/include length != rows");
    std::size_t count = 0;
    real total = 0.0;
    std::vector<real> lse(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (!include[i]) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
            throw std::invalid_argument("cross_entropy: target out of vocab range");
        real mx = logits.at(i, 0);
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
        real s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(logits.at(i, j) - mx);
        lse[i] = mx + std::log(s);
        total += lse[i] - logits.at(i, targets[i]);
        ++count;
    }
    if (count == 0)
        throw std::invalid_argument("cross_entropy: every position is masked out");
    Tensor out = Tensor::scalar(total / static_cast<real>(count));
    auto il = logits.impl(), io = out.impl();
    record_op({logits}, out, [il, io, targets, include, lse, m, v, count] {
        if (il->grad.empty()) return;
        real g = io->grad[0] / static_cast<real>(count);
        for (std::size_t i = 0; i < m; ++i) {
            if (!include[i]) continue;
            for (std::size_t j = 0; j < v; ++j) {
                real p = std::exp(il->data[i * v + j] - lse[i]);
                real delta = (static_cast<std::size_t>(targets[i]) == j) ? 1.0 : 0.0;
                il->grad[i * v + j] += g * (p - delta);
            }
        }
    });
    return out;
}

Tensor upsample_bilinear(const Tensor& x, std::size_t h, std::size_t w) {
    check_2d(x, "upsample_bilinear");
    std::size_t gh = x.rows(), gw = x.cols();
    Tensor out({h, w});
    // (index, weight) pairs per output coordinate, half-pixel centers
    auto coords = [](std::size_t out_n, std::size_t in_n, std::size_t o) {
        real pos = (static_cast<real>(o) + 0.5) * static_cast<real>(in_n) /
                       static_cast<real>(out_n) - 0.5;
        pos = std::clamp(pos, 0.0, static_cast<real>(in_n - 1));
        std::size_t i0 = static_cast<std::size_t>(pos);
        std::size_t i1 = std::min(i0 + 1, in_n - 1);
        real f = pos - static_cast<real>(i0);
        return std::tuple<std::size_t, std::size_t, real>{i0, i1, f};
    };
    for (std::size_t r = 0; r < h; ++r) {
        auto [r0, r1, fr] = coords(h, gh, r);
        for (std::size_t c = 0; c < w; ++c) {
            auto [c0, c1, fc] = coords(w, gw, c);
            out.at(r, c) = (1 - fr) * (1 - fc) * x.at(r0, c0) +
                           (1 - fr) * fc * x.at(r0, c1) +
                           fr * (1 - fc) * x.at(r1, c0) +
                           fr * fc * x.at(r1, c1);
        }
    }
    auto ix = x.impl(), io = out.impl();
    record_op({x}, out, [ix, io, h, w, gh, gw, coords] {
        if (ix->grad.empty()) return;
        for (std::size_t r = 0; r < h; ++r) {
            auto [r0, r1, fr] = coords(h, gh, r);
            for (std::size_t c = 0; c < w; ++c) {
                auto [c0, c1, fc] = coords(w, gw, c);
                real g = io->grad[r * w + c];
                ix->grad[r0 * gw + c0] += g * (1 - fr) * (1 - fc);
                ix->grad[r0 * gw + c1] += g * (1 - fr) * fc;
                ix->grad[r1 * gw + c0] += g * fr * (1 - fc);
                ix->grad[r1 * gw + c1] += g * fr * fc;
            }
        }
    });
    return out;
}

// ---- serialization -------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("tensor container: truncated file");
    return v;
}

}  // namespace

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("MGT1", 4);
    write_pod<std::uint32_t>(os, 1);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d)
            write_pod<std::uint64_t>(os, t.extent(d));
        write_pod<std::uint32_t>(os, 1);  // dtype: f64
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(real)));
    }
    if (!os) throw std::runtime_error("write failure on " + path);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MGT1", 4) != 0)
        throw std::runtime_error(path + ": not an MGT1 tensor container");
    std::uint32_t version = read_pod<std::uint32_t>(is);
    if (version != 1)
        throw std::runtime_error(path + ": unsupported container version");
    std::uint32_t count = read_pod<std::uint32_t>(is);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw std::runtime_error(path + ": truncated tensor name");
        std::uint32_t rank = read_pod<std::uint32_t>(is);
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
            numel *= shape[d];
        }
        std::uint32_t dtype = read_pod<std::uint32_t>(is);
        std::vector<real> data(numel);
        if (dtype == 1) {
            is.read(reinterpret_cast<char*>(data.data()),
                    static_cast<std::streamsize>(numel * sizeof(double)));
        } else if (dtype == 0) {
            std::vector<float> tmp(numel);
            is.read(reinterpret_cast<char*>(tmp.data()),
                    static_cast<std::streamsize>(numel * sizeof(float)));
            std::copy(tmp.begin(), tmp.end(), data.begin());
        } else {
            throw std::runtime_error(path + ": unknown dtype tag");
        }
        if (!is) throw std::runtime_error(path + ": truncated tensor data");
        out.emplace_back(name, Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

std::uint64_t fnv1a_bytes(const void* p, std::size_t n, std::uint64_t seed) {
    const auto* b = static_cast<const unsigned char*>(p);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::uint64_t h = 1469598103934665603ull;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a_bytes(buf, static_cast<std::size_t>(is.gcount()), h);
    }
    return h;
}

}  // namespace mg
