#include "mg/model.hpp"

#include <map>
#include <stdexcept>

namespace mg {

MultimodalModel MultimodalModel::build(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    MultimodalModel m;
    m.cfg = cfg;
    m.vision_tower = VisionTower(cfg.patch, cfg.c_v, rng);
    m.vision_proj = Projector(cfg.c_v, cfg.c_llm, cfg.c_llm, rng);
    m.prompt_enc = PromptEncoder(cfg.c_v, cfg.c_llm, rng);
    m.text_embed = Embedding(cfg.vocab, cfg.c_llm, rng);
    m.pos_embed = Tensor::randn({cfg.max_seq, cfg.c_llm}, rng, kInitStd);
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
        TransformerBlock block(cfg.c_llm, cfg.heads, rng);
        if (cfg.moe)
            block.ffn = std::make_shared<MoELayer>(cfg.c_llm, cfg.router, cfg.lora_r,
                                                   cfg.lora_alpha, rng);
        m.blocks.push_back(std::move(block));
    }
    m.ln_f = LayerNorm(cfg.c_llm);
    m.lm_head = TextHead(cfg.c_llm, cfg.vocab, rng);
    m.pixel_enc = PixelEncoder(cfg.pixel_patch, cfg.n_pixel_tokens(), cfg.c_p,
                               cfg.heads, rng);
    m.t_proj = Projector(cfg.c_llm, cfg.c_llm, cfg.c_p, rng);
    m.mask_dec = MaskDecoder(cfg.c_p, rng);
    return m;
}

ParamList MultimodalModel::params() const {
    ParamList out;
    vision_tower.collect("vision_tower", out);
    vision_proj.collect("vision_proj", out);
    prompt_enc.collect("prompt_enc", out);
    text_embed.collect("text_embed", out);
    param(out, "pos_embed", pos_embed);
    for (std::size_t b = 0; b < blocks.size(); ++b)
        blocks[b].collect("blocks." + std::to_string(b), out);
    ln_f.collect("ln_f", out);
    lm_head.collect("lm_head", out);
    pixel_enc.collect("pixel_enc", out);
    t_proj.collect("t_proj", out);
    mask_dec.collect("mask_dec", out);
    return out;
}

MultimodalModel::ForwardResult MultimodalModel::forward_text(
    const Image& img, const std::vector<int>& text_ids,
    const std::optional<RegionPrompt>& region, std::uint64_t sample_seed) const {
    Tensor v = vision_tower.forward(img);
    Tensor v_hat = vision_proj.forward(v);

    Tensor v_vp;
    if (region) {
        Mask canonical = region->canonical_mask(img.h, img.w, cfg.patch);
        Tensor sampled = sample_region(v, canonical, cfg.patch, cfg.m_samples,
                                       sample_seed);
        v_vp = prompt_enc.forward(sampled);
    }
    TextEmbedResult text = embed_text_with_prompts(
        text_embed, text_ids, Vocab::kRegionOpen, Vocab::kRegionClose, v_vp);

    AssembledInput in = assemble_input(v_hat, text.t_hat);
    std::size_t L = in.x.rows();
    if (L > cfg.max_seq)
        throw std::invalid_argument("forward: sequence length " + std::to_string(L) +
                                    " exceeds position table");
    Tensor h = add(in.x, slice_rows(pos_embed, 0, L));
    for (const TransformerBlock& block : blocks) {
        if (auto* moe = dynamic_cast<MoELayer*>(block.ffn.get()))
            moe->token_origin = in.origin;
        h = block.forward(h, /*causal=*/true);
    }
    ForwardResult fr;
    fr.hidden = ln_f.forward(h);
    fr.logits = lm_head.forward(fr.hidden);
    fr.origin = in.origin;
    fr.text_start = v_hat.rows();
    fr.row_ids.assign(v_hat.rows(), -2);
    fr.row_ids.insert(fr.row_ids.end(), text.expanded_ids.begin(),
                      text.expanded_ids.end());
    return fr;
}

Tensor MultimodalModel::pixel_features(const Image& img) const {
    return pixel_enc.forward(img);
}

MaskPrediction MultimodalModel::decode_mask(const ForwardResult& fr,
                                            const Image& img) const {
    Tensor h_hat = extract_seg_embedding(fr.hidden, fr.row_ids, Vocab::kSeg);
    Tensor h_ground = t_proj.forward(h_hat);
    Tensor v_p = pixel_features(img);
    return mask_dec.forward(h_ground, v_p, cfg.pixel_grid(), cfg.pixel_grid(), img.h,
                            img.w);
}

std::vector<MoELayer*> MultimodalModel::moe_layers() {
    std::vector<MoELayer*> out;
    for (TransformerBlock& b : blocks)
        if (auto* moe = dynamic_cast<MoELayer*>(b.ffn.get())) out.push_back(moe);
    return out;
}

void MultimodalModel::set_record_plans(bool on) {
    for (MoELayer* moe : moe_layers()) moe->record_plans = on;
}

void MultimodalModel::clear_recorded_plans() {
    for (MoELayer* moe : moe_layers()) moe->plans.clear();
}

std::vector<int> MultimodalModel::generate(const Image& img,
                                           const std::vector<int>& prompt_ids,
                                           const std::optional<RegionPrompt>& region,
                                           std::uint64_t sample_seed,
                                           std::size_t max_new) const {
    std::vector<int> ids = prompt_ids;
    std::vector<int> out;
    for (std::size_t step = 0; step < max_new; ++step) {
        ForwardResult fr = forward_text(img, ids, region, sample_seed);
        std::size_t last = fr.logits.rows() - 1;
        int best = 0;
        real best_v = fr.logits.at(last, 0);
        for (std::size_t j = 1; j < fr.logits.cols(); ++j)
            if (fr.logits.at(last, j) > best_v) {
                best_v = fr.logits.at(last, j);
                best = static_cast<int>(j);
            }
        out.push_back(best);
        if (best == Vocab::kEos) break;
        ids.push_back(best);
    }
    return out;
}

void load_params(MultimodalModel& model, const ParamList& source) {
    std::map<std::string, Tensor> by_name;
    for (const auto& [name, t] : source) by_name.emplace(name, t);
    for (auto& [name, t] : model.params()) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error("load_params: missing tensor '" + name + "'");
        if (it->second.shape() != t.shape())
            throw std::runtime_error("load_params: shape mismatch for '" + name + "'");
        t.vec() = it->second.vec();
    }
}

}  // namespace mg
