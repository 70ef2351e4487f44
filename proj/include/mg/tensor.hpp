#pragma once

// Dense tensor with reverse-mode autodiff. Double precision throughout;
// gradient tolerances in the tests assume f64.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace mg {

using real = double;

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<real> data;
    std::vector<real> grad;   // same size as data once allocated
    bool requires_grad = false;
    bool on_tape = false;     // produced by (or fed into) an op on the live tape
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, real fill = 0.0);
    Tensor(std::vector<std::size_t> shape, std::vector<real> data);

    static Tensor scalar(real v);
    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor randn(std::vector<std::size_t> shape, std::mt19937_64& rng,
                        real stddev = 1.0);
    static Tensor uniform(std::vector<std::size_t> shape, std::mt19937_64& rng,
                          real lo = 0.0, real hi = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t extent(std::size_t d) const { return impl_->shape[d]; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t rows() const;   // 2-D only
    std::size_t cols() const;   // 2-D only

    real* data() { return impl_->data.data(); }
    const real* data() const { return impl_->data.data(); }
    std::vector<real>& vec() { return impl_->data; }
    const std::vector<real>& vec() const { return impl_->data; }

    real& at(std::size_t i) { return impl_->data[i]; }
    real at(std::size_t i) const { return impl_->data[i]; }
    real& at(std::size_t r, std::size_t c);
    real at(std::size_t r, std::size_t c) const;
    real value() const;   // scalar tensors only

    Tensor& set_requires_grad(bool rg);
    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<real>& grad();
    const std::vector<real>& grad() const;
    void zero_grad();

    // Deep copy of values; grad/tape state is not copied.
    Tensor clone() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. One tape per forward pass; activating a Tape makes
// every op executed during its lifetime record a backward closure.
// backward() consumes the tape: a second call throws.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // loss must be a scalar produced while this tape was active.
    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    static Tape* current();
    void record(std::function<void()> fn);

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

// ---- differentiable ops --------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, real c);
Tensor shift(const Tensor& x, real c);

Tensor gelu(const Tensor& x);      // tanh approximation
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);  // log(1+e^x), stabilized

// axis must index into the shape; 1-D and 2-D tensors supported.
Tensor softmax(const Tensor& x, int axis);

Tensor sum_all(const Tensor& x);    // -> scalar
Tensor mean_all(const Tensor& x);   // -> scalar
Tensor mean_rows(const Tensor& x);  // [m x C] -> [1 x C]

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx);
// out[num_rows x C]; rows of src added at idx (duplicates accumulate).
Tensor scatter_rows(const std::vector<std::size_t>& idx, const Tensor& src,
                    std::size_t num_rows);
// x[n x C] scaled per-row by s ([n] or [n x 1]).
Tensor row_scale(const Tensor& x, const Tensor& s);
// picks x[r_i, c_i] into a length-n vector.
Tensor gather_entries(const Tensor& x,
                      const std::vector<std::pair<std::size_t, std::size_t>>& rc);

// y = x W^T + b, x:[n x in], w:[out x in], b:[out] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// per-row normalization over the trailing dim, eps = 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// mean NLL over positions where include[i] != 0; targets are class ids.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& include);

// [gh x gw] -> [H x W], bilinear, half-pixel centers.
Tensor upsample_bilinear(const Tensor& x, std::size_t h, std::size_t w);

// ---- serialization (MGT1 named-tensor container) -------------------------

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path);

std::uint64_t fnv1a_file(const std::string& path);
std::uint64_t fnv1a_bytes(const void* p, std::size_t n, std::uint64_t seed = 1469598103934665603ull);

}  // namespace mg
