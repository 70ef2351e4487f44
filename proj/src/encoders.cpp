#include "mg/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mg {

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error(path + ": truncated file");
    return v;
}

void check_magic(std::istream& is, const char* magic, const std::string& path) {
    char buf[4];
    is.read(buf, 4);
    if (!is || std::memcmp(buf, magic, 4) != 0)
        throw std::runtime_error(path + ": bad magic, expected " + magic);
}

void check_divisible(std::size_t h, std::size_t w, std::size_t patch) {
    if (h == 0 || w == 0 || h % patch != 0 || w % patch != 0)
        throw std::invalid_argument("image extents " + std::to_string(h) + "x" +
                                    std::to_string(w) + " not divisible by patch size " +
                                    std::to_string(patch));
}

}  // namespace

std::size_t Mask::area() const {
    return static_cast<std::size_t>(
        std::count(data.begin(), data.end(), std::uint8_t{1}));
}

void save_image(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("MGI1", 4);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(img.h));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(img.w));
    for (real v : img.pix) write_pod<float>(os, static_cast<float>(v));
    if (!os) throw std::runtime_error("write failure on " + path);
}

Image load_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    check_magic(is, "MGI1", path);
    std::size_t h = read_pod<std::uint32_t>(is, path);
    std::size_t w = read_pod<std::uint32_t>(is, path);
    Image img(h, w);
    for (real& v : img.pix) v = read_pod<float>(is, path);
    return img;
}

void save_mask(const std::string& path, const Mask& mask) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("MGM1", 4);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(mask.h));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(mask.w));
    std::uint8_t byte = 0;
    int nbits = 0;
    for (std::uint8_t b : mask.data) {
        byte = static_cast<std::uint8_t>(byte | ((b & 1) << nbits));
        if (++nbits == 8) { write_pod(os, byte); byte = 0; nbits = 0; }
    }
    if (nbits) write_pod(os, byte);
    if (!os) throw std::runtime_error("write failure on " + path);
}

Mask load_mask(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    check_magic(is, "MGM1", path);
    std::size_t h = read_pod<std::uint32_t>(is, path);
    std::size_t w = read_pod<std::uint32_t>(is, path);
    Mask mask(h, w);
    std::uint8_t byte = 0;
    int nbits = 0;
    for (std::uint8_t& b : mask.data) {
        if (nbits == 0) { byte = read_pod<std::uint8_t>(is, path); nbits = 8; }
        b = byte & 1;
        byte >>= 1;
        --nbits;
    }
    return mask;
}

void save_logits(const std::string& path, const Tensor& grid) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("MGL1", 4);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(grid.rows()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(grid.cols()));
    for (std::size_t i = 0; i < grid.size(); ++i)
        write_pod<float>(os, static_cast<float>(grid.at(i)));
    if (!os) throw std::runtime_error("write failure on " + path);
}

RegionPrompt RegionPrompt::point(std::size_t x, std::size_t y) {
    RegionPrompt r;
    r.kind = RegionKind::Point;
    r.px = x; r.py = y;
    return r;
}

RegionPrompt RegionPrompt::box(std::size_t x0, std::size_t y0, std::size_t x1,
                               std::size_t y1) {
    RegionPrompt r;
    r.kind = RegionKind::Box;
    r.x0 = x0; r.y0 = y0; r.x1 = x1; r.y1 = y1;
    return r;
}

RegionPrompt RegionPrompt::free_form(Mask m) {
    RegionPrompt r;
    r.kind = RegionKind::FreeForm;
    r.mask = std::move(m);
    return r;
}

Mask RegionPrompt::canonical_mask(std::size_t h, std::size_t w, std::size_t patch) const {
    Mask out(h, w);
    switch (kind) {
        case RegionKind::Point: {
            if (px >= w || py >= h)
                throw std::invalid_argument("region prompt: point outside image");
            // the whole patch cell containing the point
            std::size_t cy = (py / patch) * patch, cx = (px / patch) * patch;
            for (std::size_t y = cy; y < cy + patch; ++y)
                for (std::size_t x = cx; x < cx + patch; ++x) out.at(y, x) = 1;
            break;
        }
        case RegionKind::Box: {
            std::size_t bx1 = std::min(x1, w - 1), by1 = std::min(y1, h - 1);
            if (x0 > bx1 || y0 > by1)
                throw std::invalid_argument("region prompt: degenerate box");
            for (std::size_t y = y0; y <= by1; ++y)
                for (std::size_t x = x0; x <= bx1; ++x) out.at(y, x) = 1;
            break;
        }
        case RegionKind::FreeForm: {
            if (mask.h != h || mask.w != w)
                throw std::invalid_argument("region prompt: mask shape mismatch");
            out = mask;
            break;
        }
    }
    if (out.area() == 0)
        throw std::invalid_argument("region prompt: empty mask");
    return out;
}

std::vector<std::size_t> region_token_set(const Mask& mask, std::size_t patch) {
    check_divisible(mask.h, mask.w, patch);
    std::size_t gw = mask.w / patch, gh = mask.h / patch;
    std::vector<std::size_t> tokens;
    for (std::size_t i = 0; i < gh; ++i)
        for (std::size_t j = 0; j < gw; ++j) {
            std::size_t cy = i * patch + patch / 2, cx = j * patch + patch / 2;
            if (mask.at(cy, cx)) tokens.push_back(i * gw + j);
        }
    return tokens;
}

Tensor patchify(const Image& img, std::size_t patch) {
    check_divisible(img.h, img.w, patch);
    std::size_t gh = img.h / patch, gw = img.w / patch;
    std::size_t row_len = patch * patch * 3;
    Tensor out({gh * gw, row_len});
    for (std::size_t i = 0; i < gh; ++i)
        for (std::size_t j = 0; j < gw; ++j) {
            real* row = out.data() + (i * gw + j) * row_len;
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < patch; ++dy)
                for (std::size_t dx = 0; dx < patch; ++dx)
                    for (std::size_t c = 0; c < 3; ++c)
                        row[k++] = img.at(i * patch + dy, j * patch + dx, c);
        }
    return out;
}

VisionTower::VisionTower(std::size_t patch, std::size_t c_v, std::mt19937_64& rng)
    : patch_size(patch), embed(patch * patch * 3, c_v, rng) {}

Tensor VisionTower::forward(const Image& img) const {
    return embed.forward(patchify(img, patch_size));
}

void VisionTower::collect(const std::string& prefix, ParamList& out) const {
    embed.collect(prefix + ".patch", out);
}

Projector::Projector(std::size_t in, std::size_t hidden, std::size_t out,
                     std::mt19937_64& rng)
    : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

void Projector::collect(const std::string& prefix, ParamList& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

PixelEncoder::PixelEncoder(std::size_t patch, std::size_t n_tokens, std::size_t c_p,
                           std::size_t heads, std::mt19937_64& rng)
    : patch_size(patch),
      embed(patch * patch * 3, c_p, rng),
      block(c_p, heads, rng),
      ln_out(c_p) {
    pos = Tensor::randn({n_tokens, c_p}, rng, kInitStd);
}

Tensor PixelEncoder::forward(const Image& img) const {
    Tensor tokens = embed.forward(patchify(img, patch_size));
    if (tokens.rows() != pos.rows())
        throw std::invalid_argument("pixel encoder: image grid does not match position table");
    Tensor h = add(tokens, pos);
    return ln_out.forward(block.forward(h, /*causal=*/false));
}

void PixelEncoder::collect(const std::string& prefix, ParamList& out) const {
    embed.collect(prefix + ".patch", out);
    param(out, prefix + ".pos", pos);
    block.collect(prefix + ".block", out);
    ln_out.collect(prefix + ".ln_out", out);
}

Tensor sample_region(const Tensor& v, const Mask& canonical, std::size_t patch,
                     std::size_t m, std::uint64_t seed) {
    if (m < 1) throw std::invalid_argument("sample_region: m must be >= 1");
    std::vector<std::size_t> tokens = region_token_set(canonical, patch);
    if (tokens.empty())
        throw std::invalid_argument("region prompt covers no vision token");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, tokens.size() - 1);
    std::vector<std::size_t> choice(m);
    for (std::size_t i = 0; i < m; ++i) choice[i] = tokens[pick(rng)];
    return gather_rows(v, choice);
}

PromptEncoder::PromptEncoder(std::size_t c_v, std::size_t c_llm, std::mt19937_64& rng)
    : proj(c_v, c_llm, c_llm, rng) {}

Tensor PromptEncoder::forward(const Tensor& sampled) const {
    return proj.forward(mean_rows(sampled));
}

void PromptEncoder::collect(const std::string& prefix, ParamList& out) const {
    proj.collect(prefix + ".proj", out);
}

TextEmbedResult embed_text_with_prompts(const Embedding& table,
                                        const std::vector<int>& ids,
                                        int region_open_id, int region_close_id,
                                        const Tensor& v_vp) {
    std::vector<std::size_t> opens, closes;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == region_open_id) opens.push_back(i);
        if (ids[i] == region_close_id) closes.push_back(i);
    }
    if (opens.size() != closes.size())
        throw std::invalid_argument("text prompt: unmatched region tokens");
    if (opens.size() > 1)
        throw std::invalid_argument("text prompt: more than one region pair");
    bool has_pair = opens.size() == 1;
    if (has_pair && (closes[0] != opens[0] + 1))
        throw std::invalid_argument("text prompt: region pair must be adjacent");
    if (has_pair != v_vp.defined())
        throw std::invalid_argument(has_pair
                                        ? "text prompt: region pair without visual prompt"
                                        : "text prompt: visual prompt without region pair");

    TextEmbedResult res;
    Tensor rows = table.forward(ids);
    if (!has_pair) {
        res.t_hat = rows;
        res.expanded_ids = ids;
        return res;
    }
    std::size_t cut = opens[0] + 1;  // insert between <region> and </region>
    std::vector<Tensor> parts;
    parts.push_back(slice_rows(rows, 0, cut));
    parts.push_back(v_vp);
    if (cut < ids.size()) parts.push_back(slice_rows(rows, cut, ids.size()));
    res.t_hat = concat_rows(parts);
    res.expanded_ids = ids;
    res.expanded_ids.insert(res.expanded_ids.begin() + static_cast<long>(cut), -1);
    return res;
}

AssembledInput assemble_input(const Tensor& v_hat, const Tensor& t_hat) {
    if (v_hat.cols() != t_hat.cols())
        throw std::invalid_argument("assemble_input: width mismatch between image and text tokens");
    AssembledInput out;
    out.x = concat_rows({v_hat, t_hat});
    out.origin.assign(v_hat.rows(), 0);
    out.origin.resize(v_hat.rows() + t_hat.rows(), 1);
    return out;
}

}  // namespace mg
