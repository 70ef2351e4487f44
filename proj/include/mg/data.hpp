#pragma once

// Deterministic synthetic scenes and the three task types built from them:
// complex VQA, region QA, and pixel grounding.

#include <optional>
#include <string>
#include <vector>

#include "mg/encoders.hpp"

namespace mg {

// Closed-world word-level vocabulary, fixed at 512 slots.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSep = 3;
    static constexpr int kRegionOpen = 4;
    static constexpr int kRegionClose = 5;
    static constexpr int kSeg = 6;

    static const Vocab& instance();

    std::size_t size() const { return 512; }
    int id(const std::string& word) const;
    const std::string& word(int id) const;
    std::vector<int> encode(const std::string& text) const;  // whitespace split
    std::string decode(const std::vector<int>& ids) const;

private:
    Vocab();
    std::vector<std::string> words_;
    std::vector<std::pair<std::string, int>> index_;
};

constexpr int kNumClasses = 8;
// disk square triangle ring cross bar blob dot
const std::string& class_name(int cls);

std::vector<int> train_palette();    // 6 classes seen during training
std::vector<int> heldout_palette();  // 2 zero-shot classes

struct Instance {
    int cls = 0;
    Mask mask;
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // bounding box, inclusive
    std::size_t cx = 0, cy = 0;                  // centroid pixel
};

struct Scene {
    Image image;
    std::vector<Instance> instances;
};

constexpr std::size_t kImageSize = 28;

// 1-3 non-overlapping colored shapes on a noise background, fully seeded.
Scene generate_scene(std::uint64_t seed, const std::vector<int>& palette,
                     std::size_t max_instances = 3, std::size_t min_instances = 1);

enum class TaskKind { Vqa, RegionQa, Grounding };

struct Sample {
    TaskKind task = TaskKind::Vqa;
    Scene scene;
    std::vector<int> prompt_ids;  // <bos> ... <sep>
    std::vector<int> answer_ids;  // ... <eos>
    std::optional<RegionPrompt> region;
    std::optional<Mask> gt_mask;
    int target_class = -1;
    int vqa_kind = -1;  // 0 = count, 1 = largest, 2 = list
};

Sample generate_vqa_pair(const Scene& scene, std::uint64_t seed);
Sample generate_region_qa(const Scene& scene, std::uint64_t seed);
Sample generate_grounding_pair(const Scene& scene, std::uint64_t seed);

// scene + task sample from one seed
Sample make_sample(TaskKind task, std::uint64_t seed, const std::vector<int>& palette,
                   std::size_t max_instances = 3, std::size_t min_instances = 1);

// Re-derives the expected answer from scene metadata; the generator must agree.
std::vector<int> oracle_answer(const Sample& sample);

// Seed ranges for the train / test / zero-shot splits (disjoint by construction).
struct SplitRange {
    std::uint64_t begin;
    std::uint64_t end;
};
SplitRange train_split();
SplitRange test_split();
SplitRange zeroshot_split();

const std::vector<std::string>& grounding_templates();

}  // namespace mg
