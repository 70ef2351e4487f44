#include "mg/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mg {

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias) {
    w = Tensor::randn({out, in}, rng, kInitStd);
    if (bias) b = Tensor::zeros({out});
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    param(out, prefix + ".weight", w);
    if (b.defined()) param(out, prefix + ".bias", b);
}

LayerNorm::LayerNorm(std::size_t dim) {
    gain = Tensor({dim}, 1.0);
    bias = Tensor::zeros({dim});
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    param(out, prefix + ".gain", gain);
    param(out, prefix + ".bias", bias);
}

Embedding::Embedding(std::size_t vocab, std::size_t dim, std::mt19937_64& rng) {
    table = Tensor::randn({vocab, dim}, rng, kInitStd);
}

void Embedding::collect(const std::string& prefix, ParamList& out) const {
    param(out, prefix + ".table", table);
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim_, std::size_t heads_,
                                       std::mt19937_64& rng)
    : heads(heads_), dim(dim_) {
    if (dim % heads != 0)
        throw std::invalid_argument("attention: model width not divisible by head count");
    wq = Linear(dim, dim, rng);
    wk = Linear(dim, dim, rng);
    wv = Linear(dim, dim, rng);
    wo = Linear(dim, dim, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& x, bool causal) const {
    std::size_t L = x.rows();
    std::size_t dh = dim / heads;
    Tensor q = wq.forward(x), k = wk.forward(x), v = wv.forward(x);

    Tensor mask;
    if (causal && L > 1) {
        mask = Tensor::zeros({L, L});
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = i + 1; j < L; ++j) mask.at(i, j) = -1e30;
    }

    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)),
                              1.0 / std::sqrt(static_cast<real>(dh)));
        if (mask.defined()) scores = add(scores, mask);
        Tensor att = softmax(scores, 1);
        head_outs.push_back(matmul(att, vh));
    }
    Tensor merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return wo.forward(merged);
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
}

PlainFFN::PlainFFN(std::size_t dim, std::mt19937_64& rng) {
    fc1 = Linear(dim, 4 * dim, rng);
    fc2 = Linear(4 * dim, dim, rng);
}

void PlainFFN::collect(const std::string& prefix, ParamList& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

TransformerBlock::TransformerBlock(std::size_t dim, std::size_t heads,
                                   std::mt19937_64& rng)
    : ln1(dim), ln2(dim), attn(dim, heads, rng),
      ffn(std::make_shared<PlainFFN>(dim, rng)) {}

Tensor TransformerBlock::forward(const Tensor& x, bool causal) const {
    Tensor h = add(x, attn.forward(ln1.forward(x), causal));
    return add(h, ffn->forward(ln2.forward(h)));
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    attn.collect(prefix + ".attn", out);
    ffn->collect(prefix + ".ffn", out);
}

}  // namespace mg
