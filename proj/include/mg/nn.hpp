#pragma once

// Reusable layers for the tiny transformer backbone.

#include <memory>
#include <string>
#include <vector>

#include "mg/tensor.hpp"

namespace mg {

// Ordered name -> tensor list; shares storage with the owning layers, so
// the optimizer and checkpoints see live parameters.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline void param(ParamList& out, const std::string& name, const Tensor& t) {
    out.emplace_back(name, t);
}

constexpr real kInitStd = 0.02;

struct Linear {
    Tensor w;  // [out x in]
    Tensor b;  // [out], undefined when bias-less

    Linear() = default;
    Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, bool bias = true);

    Tensor forward(const Tensor& x) const { return linear(x, w, b); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim);

    Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Embedding {
    Tensor table;  // [vocab x dim]

    Embedding() = default;
    Embedding(std::size_t vocab, std::size_t dim, std::mt19937_64& rng);

    Tensor forward(const std::vector<int>& ids) const { return embedding(table, ids); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct MultiHeadAttention {
    std::size_t heads = 0;
    std::size_t dim = 0;
    Linear wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t heads, std::mt19937_64& rng);

    Tensor forward(const Tensor& x, bool causal) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// FFN slot interface: plain FFN in stages I-III, MoE layer in stage IV.
struct FeedForward {
    virtual ~FeedForward() = default;
    virtual Tensor forward(const Tensor& x) = 0;
    virtual void collect(const std::string& prefix, ParamList& out) const = 0;
};

// up-projection -> GELU -> down-projection, dim -> 4*dim -> dim.
struct PlainFFN : FeedForward {
    Linear fc1, fc2;

    PlainFFN() = default;
    PlainFFN(std::size_t dim, std::mt19937_64& rng);

    Tensor forward(const Tensor& x) override {
        return fc2.forward(gelu(fc1.forward(x)));
    }
    void collect(const std::string& prefix, ParamList& out) const override;
};

struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    std::shared_ptr<FeedForward> ffn;

    TransformerBlock() = default;
    TransformerBlock(std::size_t dim, std::size_t heads, std::mt19937_64& rng);

    Tensor forward(const Tensor& x, bool causal) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace mg
