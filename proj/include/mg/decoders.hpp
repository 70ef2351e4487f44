#pragma once

// Output heads: text logits, SEG-token extraction, T-projection into the
// pixel feature space, and the cross-attention mask decoder.

#include "mg/encoders.hpp"
#include "mg/nn.hpp"

namespace mg {

struct TextHead {
    Linear proj;  // C_llm -> vocab

    TextHead() = default;
    TextHead(std::size_t c_llm, std::size_t vocab, std::mt19937_64& rng)
        : proj(c_llm, vocab, rng) {}

    Tensor forward(const Tensor& hidden) const { return proj.forward(hidden); }
    void collect(const std::string& prefix, ParamList& out) const {
        proj.collect(prefix, out);
    }
};

// row_ids must align with hidden rows (-1/-2 for non-text rows); exactly one
// row may carry seg_id.
Tensor extract_seg_embedding(const Tensor& hidden, const std::vector<int>& row_ids,
                             int seg_id);

struct MaskPrediction {
    Tensor logits;  // [H x W]
    Mask binary() const;  // logit > 0
};

// One cross-attention block: h_ground attends over V_p, then per-token
// affinity scores against projected pixel features give patch logits,
// bilinearly upsampled to the pixel grid.
struct MaskDecoder {
    std::size_t c_p = 0;
    LayerNorm ln_q, ln_h;
    Linear wq, wk, wv, wo;
    Projector mlp;        // refinement on the query
    Linear feat;          // pixel-feature projection for the affinity scores
    Tensor bias;          // scalar logit offset

    MaskDecoder() = default;
    MaskDecoder(std::size_t c_p, std::mt19937_64& rng);

    // h_ground: [1 x C_p], v_p: [N_v x C_p] laid out over a gh x gw patch grid
    Tensor patch_logits(const Tensor& h_ground, const Tensor& v_p) const;  // [N_v x 1]
    MaskPrediction forward(const Tensor& h_ground, const Tensor& v_p,
                           std::size_t grid_h, std::size_t grid_w,
                           std::size_t img_h, std::size_t img_w) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace mg
