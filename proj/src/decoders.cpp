#include "mg/decoders.hpp"

#include <cmath>
#include <stdexcept>

namespace mg {

Tensor extract_seg_embedding(const Tensor& hidden, const std::vector<int>& row_ids,
                             int seg_id) {
    if (row_ids.size() != hidden.rows())
        throw std::invalid_argument("extract_seg_embedding: id list does not align with hidden rows");
    std::vector<std::size_t> hits;
    for (std::size_t i = 0; i < row_ids.size(); ++i)
        if (row_ids[i] == seg_id) hits.push_back(i);
    if (hits.size() != 1)
        throw std::invalid_argument("extract_seg_embedding: expected exactly one SEG token, found " +
                                    std::to_string(hits.size()));
    return slice_rows(hidden, hits[0], hits[0] + 1);
}

Mask MaskPrediction::binary() const {
    Mask m(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.size(); ++i)
        m.data[i] = logits.at(i) > 0.0 ? 1 : 0;
    return m;
}

MaskDecoder::MaskDecoder(std::size_t c_p_, std::mt19937_64& rng)
    : c_p(c_p_),
      ln_q(c_p_),
      ln_h(c_p_),
      wq(c_p_, c_p_, rng),
      wk(c_p_, c_p_, rng),
      wv(c_p_, c_p_, rng),
      wo(c_p_, c_p_, rng),
      mlp(c_p_, 2 * c_p_, c_p_, rng),
      feat(c_p_, c_p_, rng) {
    bias = Tensor::zeros({1, 1});
}

Tensor MaskDecoder::patch_logits(const Tensor& h_ground, const Tensor& v_p) const {
    if (h_ground.rows() != 1 || h_ground.cols() != c_p || v_p.cols() != c_p)
        throw std::invalid_argument("mask decoder: feature width mismatch");
    real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(c_p));

    Tensor q = wq.forward(ln_q.forward(h_ground));
    Tensor k = wk.forward(v_p);
    Tensor v = wv.forward(v_p);
    Tensor att = softmax(scale(matmul(q, transpose(k)), inv_sqrt), 1);
    Tensor h1 = add(h_ground, wo.forward(matmul(att, v)));
    Tensor h2 = add(h1, mlp.forward(ln_h.forward(h1)));

    // affinity of the refined query against every projected pixel token
    Tensor scores = scale(matmul(feat.forward(v_p), transpose(h2)), inv_sqrt);
    Tensor ones({v_p.rows(), 1}, 1.0);
    return add(scores, matmul(ones, bias));
}

MaskPrediction MaskDecoder::forward(const Tensor& h_ground, const Tensor& v_p,
                                    std::size_t grid_h, std::size_t grid_w,
                                    std::size_t img_h, std::size_t img_w) const {
    if (grid_h * grid_w != v_p.rows())
        throw std::invalid_argument("mask decoder: patch grid does not match pixel token count");
    Tensor patch = reshape(patch_logits(h_ground, v_p), {grid_h, grid_w});
    MaskPrediction pred;
    pred.logits = upsample_bilinear(patch, img_h, img_w);
    return pred;
}

void MaskDecoder::collect(const std::string& prefix, ParamList& out) const {
    ln_q.collect(prefix + ".ln_q", out);
    ln_h.collect(prefix + ".ln_h", out);
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
    mlp.collect(prefix + ".mlp", out);
    feat.collect(prefix + ".feat", out);
    param(out, prefix + ".bias", bias);
}

}  // namespace mg
