#include "mg/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mg {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

const std::vector<std::string> kClassNames = {
    "disk", "square", "triangle", "ring", "cross", "bar", "blob", "dot"};

const real kClassColors[kNumClasses][3] = {
    {0.90, 0.15, 0.15},  // disk
    {0.15, 0.85, 0.20},  // square
    {0.20, 0.35, 0.95},  // triangle
    {0.95, 0.85, 0.20},  // ring
    {0.90, 0.25, 0.90},  // cross
    {0.20, 0.90, 0.90},  // bar
    {0.95, 0.55, 0.15},  // blob
    {0.95, 0.95, 0.95},  // dot
};

}  // namespace

const std::string& class_name(int cls) {
    if (cls < 0 || cls >= kNumClasses)
        throw std::invalid_argument("class_name: bad class id");
    return kClassNames[static_cast<std::size_t>(cls)];
}

std::vector<int> train_palette() { return {0, 1, 2, 3, 4, 5}; }
std::vector<int> heldout_palette() { return {6, 7}; }

// ---- vocabulary ----------------------------------------------------------

Vocab::Vocab() {
    words_ = {"<pad>", "<bos>", "<eos>", "<sep>", "<region>", "</region>", "<SEG>"};
    for (const std::string& c : kClassNames) words_.push_back(c);
    for (int d = 0; d <= 9; ++d) words_.push_back(std::to_string(d));
    for (const char* w :
         {"please", "segment", "the", "in", "this", "image", "highlight", "region",
          "show", "me", "where", "is", "located", "mark", "pixels", "belonging",
          "to", "outline", "find", "and", "area", "identify", "what", "how",
          "many", "shapes", "are", "there", "largest", "shape", "list",
          "categories", "it", "a", "an", "of", "answer", "here", "you", "see",
          "describe", "contains", "picture"})
        words_.push_back(w);
    while (words_.size() < 512)
        words_.push_back("<unused" + std::to_string(words_.size()) + ">");
    for (std::size_t i = 0; i < words_.size(); ++i)
        index_.emplace_back(words_[i], static_cast<int>(i));
    std::sort(index_.begin(), index_.end());
}

const Vocab& Vocab::instance() {
    static Vocab v;
    return v;
}

int Vocab::id(const std::string& word) const {
    auto it = std::lower_bound(index_.begin(), index_.end(),
                               std::make_pair(word, 0));
    if (it == index_.end() || it->first != word)
        throw std::invalid_argument("vocab: unknown word '" + word + "'");
    return it->second;
}

const std::string& Vocab::word(int id_) const {
    if (id_ < 0 || static_cast<std::size_t>(id_) >= words_.size())
        throw std::invalid_argument("vocab: id out of range");
    return words_[static_cast<std::size_t>(id_)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
    std::istringstream is(text);
    std::vector<int> out;
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

// ---- scene generation ----------------------------------------------------

namespace {

using Rng = std::mt19937_64;

std::size_t rnd_range(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

real rnd_real(Rng& rng, real lo, real hi) {
    return std::uniform_real_distribution<real>(lo, hi)(rng);
}

void fill_disk(Mask& m, real cx, real cy, real r) {
    for (std::size_t y = 0; y < m.h; ++y)
        for (std::size_t x = 0; x < m.w; ++x) {
            real dx = static_cast<real>(x) - cx, dy = static_cast<real>(y) - cy;
            if (dx * dx + dy * dy <= r * r) m.at(y, x) = 1;
        }
}

// Two size tiers with a gap between them: base shapes land near one common
// area and large shapes near 2.3x that.  Count questions then correlate with
// total foreground area and largest questions always have a clear margin,
// instead of both depending on overlapping size draws.
Mask render_shape(int cls, Rng& rng, bool large) {
    const std::size_t S = kImageSize;
    Mask m(S, S);
    switch (cls) {
        case 0: {  // disk
            real r = large ? rnd_real(rng, 6.0, 6.2) : rnd_real(rng, 4.1, 4.3);
            real cx = rnd_real(rng, r + 1, S - r - 2), cy = rnd_real(rng, r + 1, S - r - 2);
            fill_disk(m, cx, cy, r);
            break;
        }
        case 1: {  // square
            std::size_t half = large ? 5 : 3;
            std::size_t cx = rnd_range(rng, half, S - half - 1);
            std::size_t cy = rnd_range(rng, half, S - half - 1);
            for (std::size_t y = cy - half; y <= cy + half; ++y)
                for (std::size_t x = cx - half; x <= cx + half; ++x) m.at(y, x) = 1;
            break;
        }
        case 2: {  // triangle, apex up
            std::size_t halfw = large ? 8 : 6;
            std::size_t height = 2 * halfw - 1;
            std::size_t cx = rnd_range(rng, halfw, S - halfw - 1);
            std::size_t top = rnd_range(rng, 1, S - height - 1);
            for (std::size_t dy = 0; dy < height; ++dy) {
                std::size_t spread = (dy * halfw) / height;
                for (std::size_t x = cx - spread; x <= cx + spread; ++x)
                    m.at(top + dy, x) = 1;
            }
            break;
        }
        case 3: {  // ring
            real ro = large ? rnd_real(rng, 6.9, 7.1) : rnd_real(rng, 4.9, 5.1);
            real ri = ro - (large ? 3.5 : 2.2);
            real cx = rnd_real(rng, ro + 1, S - ro - 2), cy = rnd_real(rng, ro + 1, S - ro - 2);
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x) {
                    real dx = static_cast<real>(x) - cx, dy = static_cast<real>(y) - cy;
                    real d2 = dx * dx + dy * dy;
                    if (d2 <= ro * ro && d2 >= ri * ri) m.at(y, x) = 1;
                }
            break;
        }
        case 4: {  // cross
            std::size_t arm = large ? 12 : 7;
            std::size_t cx = rnd_range(rng, arm + 1, S - arm - 2);
            std::size_t cy = rnd_range(rng, arm + 1, S - arm - 2);
            for (std::size_t d = 0; d <= 2 * arm; ++d) {
                m.at(cy, cx - arm + d) = 1;
                m.at(cy + 1, cx - arm + d) = 1;
                m.at(cy - arm + d, cx) = 1;
                m.at(cy - arm + d, cx + 1) = 1;
            }
            break;
        }
        case 5: {  // bar
            bool horizontal = rnd_range(rng, 0, 1) == 0;
            std::size_t len = large ? rnd_range(rng, 22, 23) : rnd_range(rng, 13, 14);
            std::size_t thick = large ? 5 : 4;
            if (horizontal) {
                std::size_t x0 = rnd_range(rng, 1, S - len - 1);
                std::size_t y0 = rnd_range(rng, 1, S - thick - 1);
                for (std::size_t y = y0; y < y0 + thick; ++y)
                    for (std::size_t x = x0; x < x0 + len; ++x) m.at(y, x) = 1;
            } else {
                std::size_t y0 = rnd_range(rng, 1, S - len - 1);
                std::size_t x0 = rnd_range(rng, 1, S - thick - 1);
                for (std::size_t y = y0; y < y0 + len; ++y)
                    for (std::size_t x = x0; x < x0 + thick; ++x) m.at(y, x) = 1;
            }
            break;
        }
        case 6: {  // blob: union of overlapping disks
            real cx = rnd_real(rng, 7.0, S - 8.0), cy = rnd_real(rng, 7.0, S - 8.0);
            std::size_t lobes = large ? 3 : 2;
            for (std::size_t i = 0; i < lobes; ++i) {
                real r = large ? rnd_real(rng, 4.4, 4.7) : rnd_real(rng, 3.2, 3.4);
                real ox = rnd_real(rng, -2.5, 2.5), oy = rnd_real(rng, -2.5, 2.5);
                real lx = std::clamp(cx + ox, r + 1, static_cast<real>(S) - r - 2);
                real ly = std::clamp(cy + oy, r + 1, static_cast<real>(S) - r - 2);
                fill_disk(m, lx, ly, r);
            }
            break;
        }
        case 7: {  // dot
            real r = large ? rnd_real(rng, 5.8, 6.0) : rnd_real(rng, 4.0, 4.2);
            real cx = rnd_real(rng, r + 1, S - r - 2), cy = rnd_real(rng, r + 1, S - r - 2);
            fill_disk(m, cx, cy, r);
            break;
        }
        default:
            throw std::invalid_argument("render_shape: bad class");
    }
    return m;
}

bool disjoint(const Mask& a, const Mask& b) {
    for (std::size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] && b.data[i]) return false;
    return true;
}

Instance finalize_instance(int cls, Mask mask) {
    Instance inst;
    inst.cls = cls;
    inst.x0 = mask.w; inst.y0 = mask.h; inst.x1 = 0; inst.y1 = 0;
    real sx = 0, sy = 0, n = 0;
    for (std::size_t y = 0; y < mask.h; ++y)
        for (std::size_t x = 0; x < mask.w; ++x)
            if (mask.at(y, x)) {
                inst.x0 = std::min(inst.x0, x); inst.x1 = std::max(inst.x1, x);
                inst.y0 = std::min(inst.y0, y); inst.y1 = std::max(inst.y1, y);
                sx += static_cast<real>(x); sy += static_cast<real>(y); n += 1;
            }
    // representative point: mask pixel nearest the centroid (rings have a hole)
    real gx = sx / n, gy = sy / n;
    real best = 1e30;
    for (std::size_t y = 0; y < mask.h; ++y)
        for (std::size_t x = 0; x < mask.w; ++x)
            if (mask.at(y, x)) {
                real d = (static_cast<real>(x) - gx) * (static_cast<real>(x) - gx) +
                         (static_cast<real>(y) - gy) * (static_cast<real>(y) - gy);
                if (d < best) { best = d; inst.cx = x; inst.cy = y; }
            }
    inst.mask = std::move(mask);
    return inst;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const std::vector<int>& palette,
                     std::size_t max_instances, std::size_t min_instances) {
    if (palette.empty()) throw std::invalid_argument("generate_scene: empty palette");
    Rng rng(splitmix(seed));
    Scene scene;
    scene.image = Image(kImageSize, kImageSize);
    for (real& v : scene.image.pix) v = 0.10 + rnd_real(rng, 0.0, 0.04);

    Mask occupied(kImageSize, kImageSize);
    std::size_t lo = std::max<std::size_t>(1, min_instances);
    std::size_t hi = std::max(lo, max_instances);
    std::size_t want = std::min(rnd_range(rng, lo, hi), palette.size());
    // classes are drawn without replacement: every instance has a distinct
    // class, so prompts that name a class always refer to a unique object
    std::vector<int> deck = palette;
    for (std::size_t i = deck.size() - 1; i > 0; --i)
        std::swap(deck[i], deck[rnd_range(rng, 0, i)]);
    for (std::size_t k = 0; k < want; ++k) {
        int cls = deck[k];
        // exactly one large instance per scene, placed first while the
        // canvas is empty so it cannot be squeezed out by earlier shapes
        for (int attempt = 0; attempt < 120; ++attempt) {
            Mask m = render_shape(cls, rng, k == 0);
            if (m.area() < 9 || !disjoint(m, occupied)) continue;
            for (std::size_t i = 0; i < m.data.size(); ++i)
                if (m.data[i]) occupied.data[i] = 1;
            const real* col = kClassColors[cls];
            real jitter = rnd_real(rng, -0.04, 0.04);
            for (std::size_t y = 0; y < kImageSize; ++y)
                for (std::size_t x = 0; x < kImageSize; ++x)
                    if (m.at(y, x))
                        for (std::size_t c = 0; c < 3; ++c)
                            scene.image.at(y, x, c) =
                                std::clamp(col[c] + jitter, 0.0, 1.0);
            scene.instances.push_back(finalize_instance(cls, std::move(m)));
            break;
        }
    }
    if (scene.instances.empty()) {
        // pathological seed: fall back to one central disk-family shape
        Mask m(kImageSize, kImageSize);
        fill_disk(m, 14, 14, 4.0);
        int cls = palette[0];
        const real* col = kClassColors[cls];
        for (std::size_t y = 0; y < kImageSize; ++y)
            for (std::size_t x = 0; x < kImageSize; ++x)
                if (m.at(y, x))
                    for (std::size_t c = 0; c < 3; ++c)
                        scene.image.at(y, x, c) = col[c];
        scene.instances.push_back(finalize_instance(cls, std::move(m)));
    }
    return scene;
}

// ---- task generators -----------------------------------------------------

const std::vector<std::string>& grounding_templates() {
    static const std::vector<std::string> t = {
        "please segment the {class} in this image",
        "segment the {class}",
        "please highlight the {class} region",
        "show me where the {class} is located",
        "mark the pixels belonging to the {class}",
        "outline the {class} in this image",
        "find and segment the {class}",
        "please mark the {class} area",
        "segment the {class} in this image please",
        "identify the {class} region",
    };
    return t;
}

namespace {

std::string instantiate(const std::string& tpl, const std::string& cls) {
    std::string out = tpl;
    std::size_t pos = out.find("{class}");
    if (pos == std::string::npos)
        throw std::invalid_argument("grounding template lacks {class} slot");
    out.replace(pos, 7, cls);
    return out;
}

std::vector<int> prompt_tokens(const std::string& question) {
    const Vocab& v = Vocab::instance();
    std::vector<int> ids = {Vocab::kBos};
    for (int id : v.encode(question)) ids.push_back(id);
    ids.push_back(Vocab::kSep);
    return ids;
}

std::vector<int> answer_tokens(const std::string& answer) {
    const Vocab& v = Vocab::instance();
    std::vector<int> ids = v.encode(answer);
    ids.push_back(Vocab::kEos);
    return ids;
}

std::string list_answer(const Scene& scene) {
    std::set<int> classes;
    for (const Instance& inst : scene.instances) classes.insert(inst.cls);
    std::string out;
    for (int c : classes) {
        if (!out.empty()) out += ' ';
        out += class_name(c);
    }
    return out;
}

int largest_class(const Scene& scene) {
    std::size_t best_area = 0;
    int best = scene.instances[0].cls;
    for (const Instance& inst : scene.instances)
        if (inst.mask.area() > best_area) {
            best_area = inst.mask.area();
            best = inst.cls;
        }
    return best;
}

}  // namespace

Sample generate_vqa_pair(const Scene& scene, std::uint64_t seed) {
    Rng rng(splitmix(seed ^ 0x56514131ull));
    Sample s;
    s.task = TaskKind::Vqa;
    s.scene = scene;
    s.vqa_kind = static_cast<int>(rnd_range(rng, 0, 2));
    std::string question, answer;
    switch (s.vqa_kind) {
        case 0:
            question = "how many shapes are there";
            answer = std::to_string(scene.instances.size());
            break;
        case 1:
            question = "what is the largest shape";
            s.target_class = largest_class(scene);
            answer = class_name(s.target_class);
            break;
        default:
            question = "list the categories in this image";
            answer = list_answer(scene);
            break;
    }
    s.prompt_ids = prompt_tokens(question);
    s.answer_ids = answer_tokens(answer);
    return s;
}

Sample generate_region_qa(const Scene& scene, std::uint64_t seed) {
    if (scene.instances.empty())
        throw std::invalid_argument("generate_region_qa: empty scene");
    Rng rng(splitmix(seed ^ 0x52514100ull));
    Sample s;
    s.task = TaskKind::RegionQa;
    s.scene = scene;
    const Instance& inst =
        scene.instances[rnd_range(rng, 0, scene.instances.size() - 1)];
    s.target_class = inst.cls;
    switch (rnd_range(rng, 0, 2)) {
        case 0:
            s.region = RegionPrompt::point(inst.cx, inst.cy);
            break;
        case 1: {
            auto jit = [&](std::size_t v, int lo, int hi) {
                long j = static_cast<long>(v) +
                         static_cast<long>(rnd_range(rng, 0, static_cast<std::size_t>(hi - lo))) + lo;
                return static_cast<std::size_t>(
                    std::clamp<long>(j, 0, static_cast<long>(kImageSize) - 1));
            };
            std::size_t bx0 = jit(inst.x0, -2, 0), by0 = jit(inst.y0, -2, 0);
            std::size_t bx1 = jit(inst.x1, 0, 2), by1 = jit(inst.y1, 0, 2);
            s.region = RegionPrompt::box(bx0, by0, bx1, by1);
            break;
        }
        default:
            s.region = RegionPrompt::free_form(inst.mask);
            break;
    }
    // tiny jittered boxes or sparse free-form masks can slip between patch
    // centers; fall back to a point so the prompt always hits a vision token
    Mask canon = s.region->canonical_mask(kImageSize, kImageSize, 4);
    if (region_token_set(canon, 4).empty())
        s.region = RegionPrompt::point(inst.cx, inst.cy);
    // a jittered box around one instance can overlap a neighbour more; the
    // answer names whichever instance the region covers best, so the label is
    // a pure function of the region and never ambiguous
    Mask region = s.region->canonical_mask(kImageSize, kImageSize, 1);
    std::size_t best_overlap = 0;
    int best_cls = inst.cls;
    for (const Instance& cand : scene.instances) {
        std::size_t ov = 0;
        for (std::size_t i = 0; i < region.data.size(); ++i)
            if (region.data[i] && cand.mask.data[i]) ++ov;
        if (ov > best_overlap) { best_overlap = ov; best_cls = cand.cls; }
    }
    s.target_class = best_cls;
    s.prompt_ids = prompt_tokens("what is in <region> </region>");
    s.answer_ids = answer_tokens(class_name(best_cls));
    return s;
}

Sample generate_grounding_pair(const Scene& scene, std::uint64_t seed) {
    if (scene.instances.empty())
        throw std::invalid_argument("generate_grounding_pair: empty scene");
    Rng rng(splitmix(seed ^ 0x47524e44ull));
    Sample s;
    s.task = TaskKind::Grounding;
    s.scene = scene;
    const Instance& inst =
        scene.instances[rnd_range(rng, 0, scene.instances.size() - 1)];
    s.target_class = inst.cls;
    const auto& templates = grounding_templates();
    const std::string& tpl = templates[rnd_range(rng, 0, templates.size() - 1)];
    s.prompt_ids = prompt_tokens(instantiate(tpl, class_name(inst.cls)));
    // naming the class in the answer makes the cross-entropy teach the model
    // to carry the prompted class through to the answer region, which the
    // mask query at <SEG> can then pick up from the neighbouring token
    s.answer_ids = answer_tokens("the " + class_name(inst.cls) + " is <SEG>");
    // classes may repeat in a scene; the prompt names a class, so the target
    // is the union of every instance of it, otherwise the task is ambiguous
    Mask gt(kImageSize, kImageSize);
    for (const Instance& other : scene.instances)
        if (other.cls == inst.cls)
            for (std::size_t i = 0; i < gt.data.size(); ++i)
                if (other.mask.data[i]) gt.data[i] = 1;
    s.gt_mask = gt;
    return s;
}

Sample make_sample(TaskKind task, std::uint64_t seed, const std::vector<int>& palette,
                   std::size_t max_instances, std::size_t min_instances) {
    Scene scene = generate_scene(splitmix(seed * 2654435761ull + 17), palette, max_instances,
                                 min_instances);
    switch (task) {
        case TaskKind::Vqa: return generate_vqa_pair(scene, seed);
        case TaskKind::RegionQa: return generate_region_qa(scene, seed);
        case TaskKind::Grounding: return generate_grounding_pair(scene, seed);
    }
    throw std::invalid_argument("make_sample: bad task");
}

std::vector<int> oracle_answer(const Sample& sample) {
    const Scene& scene = sample.scene;
    switch (sample.task) {
        case TaskKind::Vqa:
            switch (sample.vqa_kind) {
                case 0: return answer_tokens(std::to_string(scene.instances.size()));
                case 1: return answer_tokens(class_name(largest_class(scene)));
                default: return answer_tokens(list_answer(scene));
            }
        case TaskKind::RegionQa: {
            // instance with the largest overlap against the canonical region mask
            Mask region = sample.region->canonical_mask(kImageSize, kImageSize, 1);
            std::size_t best_overlap = 0;
            int best_cls = -1;
            for (const Instance& inst : scene.instances) {
                std::size_t ov = 0;
                for (std::size_t i = 0; i < region.data.size(); ++i)
                    if (region.data[i] && inst.mask.data[i]) ++ov;
                if (ov > best_overlap) { best_overlap = ov; best_cls = inst.cls; }
            }
            if (best_cls < 0) throw std::runtime_error("oracle: region hits no instance");
            return answer_tokens(class_name(best_cls));
        }
        case TaskKind::Grounding: {
            // the gt mask must be exactly the union of instances of the class
            Mask want(kImageSize, kImageSize);
            bool any = false;
            for (const Instance& inst : scene.instances)
                if (inst.cls == sample.target_class) {
                    any = true;
                    for (std::size_t i = 0; i < want.data.size(); ++i)
                        if (inst.mask.data[i]) want.data[i] = 1;
                }
            if (!any || want.data != sample.gt_mask->data)
                throw std::runtime_error("oracle: grounding mask does not match prompted class");
            return answer_tokens("the " + class_name(sample.target_class) + " is <SEG>");
        }
    }
    throw std::invalid_argument("oracle_answer: bad task");
}

SplitRange train_split() { return {0, 1000000}; }
SplitRange test_split() { return {1000000, 1100000}; }
SplitRange zeroshot_split() { return {2000000, 2100000}; }

}  // namespace mg
