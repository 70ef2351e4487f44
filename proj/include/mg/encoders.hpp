#pragma once

// Image, region and text encoders producing the unified token sequence:
// patch tokens V -> projected V_hat, pixel features V_p, one visual-prompt
// token per region, text embeddings with the prompt spliced in.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mg/nn.hpp"

namespace mg {

struct Image {
    std::size_t h = 0, w = 0;
    std::vector<real> pix;  // h*w*3, HWC, values in [0,1]

    Image() = default;
    Image(std::size_t h_, std::size_t w_) : h(h_), w(w_), pix(h_ * w_ * 3, 0.0) {}
    real& at(std::size_t y, std::size_t x, std::size_t c) {
        return pix[(y * w + x) * 3 + c];
    }
    real at(std::size_t y, std::size_t x, std::size_t c) const {
        return pix[(y * w + x) * 3 + c];
    }
};

struct Mask {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> data;  // h*w, 0/1

    Mask() = default;
    Mask(std::size_t h_, std::size_t w_) : h(h_), w(w_), data(h_ * w_, 0) {}
    std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * w + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * w + x]; }
    std::size_t area() const;
};

// MGI1 / MGM1 / MGL1 file formats
void save_image(const std::string& path, const Image& img);
Image load_image(const std::string& path);
void save_mask(const std::string& path, const Mask& mask);
Mask load_mask(const std::string& path);
void save_logits(const std::string& path, const Tensor& grid);

enum class RegionKind { Point, Box, FreeForm };

struct RegionPrompt {
    RegionKind kind = RegionKind::FreeForm;
    std::size_t px = 0, py = 0;              // point
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // box, inclusive
    Mask mask;                               // free-form

    static RegionPrompt point(std::size_t x, std::size_t y);
    static RegionPrompt box(std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1);
    static RegionPrompt free_form(Mask m);

    // All three kinds reduce to a binary mask before sampling; a point maps
    // to its containing patch cell.
    Mask canonical_mask(std::size_t h, std::size_t w, std::size_t patch) const;
};

// Tokens whose patch center the mask covers.
std::vector<std::size_t> region_token_set(const Mask& mask, std::size_t patch);

// [N_v x P*P*3] constant patch matrix, row-major over the patch grid.
Tensor patchify(const Image& img, std::size_t patch);

struct VisionTower {
    std::size_t patch_size = 4;
    Linear embed;  // [C_v x P*P*3]

    VisionTower() = default;
    VisionTower(std::size_t patch, std::size_t c_v, std::mt19937_64& rng);

    Tensor forward(const Image& img) const;  // V: [N_v x C_v]
    void collect(const std::string& prefix, ParamList& out) const;
};

// two-layer MLP (linear-GELU-linear) used by every projector in the model
struct Projector {
    Linear fc1, fc2;

    Projector() = default;
    Projector(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);

    Tensor forward(const Tensor& x) const {
        return fc2.forward(gelu(fc1.forward(x)));
    }
    void collect(const std::string& prefix, ParamList& out) const;
};

// ViT-style pixel encoder: patchify + position + one transformer block.
struct PixelEncoder {
    std::size_t patch_size = 4;
    Linear embed;      // [C_p x P*P*3]
    Tensor pos;        // [N_v x C_p]
    TransformerBlock block;
    LayerNorm ln_out;

    PixelEncoder() = default;
    PixelEncoder(std::size_t patch, std::size_t n_tokens, std::size_t c_p,
                 std::size_t heads, std::mt19937_64& rng);

    Tensor forward(const Image& img) const;  // V_p: [N_v x C_p]
    void collect(const std::string& prefix, ParamList& out) const;
};

// m rows drawn uniformly with replacement from the in-region token set.
Tensor sample_region(const Tensor& v, const Mask& canonical, std::size_t patch,
                     std::size_t m, std::uint64_t seed);

struct PromptEncoder {
    Projector proj;  // C_v -> C_llm

    PromptEncoder() = default;
    PromptEncoder(std::size_t c_v, std::size_t c_llm, std::mt19937_64& rng);

    // mean-pool the samples, then project: exactly one prompt token
    Tensor forward(const Tensor& sampled) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct TextEmbedResult {
    Tensor t_hat;                   // [N_t (+1) x C_llm]
    std::vector<int> expanded_ids;  // -1 marks the visual-prompt row
};

// Embeds token ids and splices the visual prompt between the region
// open/close embeddings. Pair/prompt presence must match.
TextEmbedResult embed_text_with_prompts(const Embedding& table,
                                        const std::vector<int>& ids,
                                        int region_open_id, int region_close_id,
                                        const Tensor& v_vp);

struct AssembledInput {
    Tensor x;                          // [L x C_llm]
    std::vector<std::uint8_t> origin;  // 0 = image token, 1 = text token
};

// image tokens first, then text tokens
AssembledInput assemble_input(const Tensor& v_hat, const Tensor& t_hat);

}  // namespace mg
