#pragma once

// The full multimodal model: vision tower + projector, prompt encoder,
// token/position embeddings, transformer backbone with a swappable FFN
// slot (plain or MoE), text head, pixel encoder, T-projector, mask decoder.

#include <optional>

#include "mg/data.hpp"
#include "mg/decoders.hpp"
#include "mg/encoders.hpp"
#include "mg/moe.hpp"

namespace mg {

struct ModelConfig {
    std::size_t c_llm = 64;
    std::size_t heads = 2;
    std::size_t num_blocks = 2;
    std::size_t vocab = 512;
    std::size_t c_v = 48;
    std::size_t c_p = 32;
    std::size_t patch = 4;
    std::size_t pixel_patch = 2;  // finer grid for the grounding path
    std::size_t img = 28;
    std::size_t m_samples = 16;
    std::size_t max_seq = 128;
    std::size_t lora_r = 8;
    real lora_alpha = 16.0;
    RouterConfig router;   // CF = 1.5, top-1 defaults
    bool moe = false;

    std::size_t grid() const { return img / patch; }
    std::size_t pixel_grid() const { return img / pixel_patch; }
    std::size_t n_vision_tokens() const { return grid() * grid(); }
    std::size_t n_pixel_tokens() const { return pixel_grid() * pixel_grid(); }
};

struct MultimodalModel {
    ModelConfig cfg;
    VisionTower vision_tower;
    Projector vision_proj;
    PromptEncoder prompt_enc;
    Embedding text_embed;
    Tensor pos_embed;  // [max_seq x c_llm]
    std::vector<TransformerBlock> blocks;
    LayerNorm ln_f;
    TextHead lm_head;
    PixelEncoder pixel_enc;
    Projector t_proj;
    MaskDecoder mask_dec;

    static MultimodalModel build(const ModelConfig& cfg, std::uint64_t seed);

    ParamList params() const;

    struct ForwardResult {
        Tensor hidden;            // [L x c_llm], after the final layer norm
        Tensor logits;            // [L x vocab]
        std::vector<int> row_ids; // -2 image rows, -1 visual-prompt row, else token id
        std::vector<std::uint8_t> origin;
        std::size_t text_start = 0;
    };

    ForwardResult forward_text(const Image& img, const std::vector<int>& text_ids,
                               const std::optional<RegionPrompt>& region,
                               std::uint64_t sample_seed) const;

    Tensor pixel_features(const Image& img) const;
    MaskPrediction decode_mask(const ForwardResult& fr, const Image& img) const;

    std::vector<MoELayer*> moe_layers();
    void set_record_plans(bool on);
    void clear_recorded_plans();

    // greedy decode of answer tokens after the prompt, up to max_new tokens
    std::vector<int> generate(const Image& img, const std::vector<int>& prompt_ids,
                              const std::optional<RegionPrompt>& region,
                              std::uint64_t sample_seed, std::size_t max_new = 10) const;
};

// Copies values from a named-tensor list into matching model parameters.
// Throws if a name is missing or a shape differs.
void load_params(MultimodalModel& model, const ParamList& source);

}  // namespace mg
