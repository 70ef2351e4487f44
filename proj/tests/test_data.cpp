#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>

#include "mg/data.hpp"

using namespace mg;

TEST_CASE("vocab: specials, round trip, closed world") {
    const Vocab& v = Vocab::instance();
    CHECK(v.size() == 512);
    CHECK(v.word(Vocab::kPad) == "<pad>");
    CHECK(v.word(Vocab::kBos) == "<bos>");
    CHECK(v.word(Vocab::kEos) == "<eos>");
    CHECK(v.word(Vocab::kSep) == "<sep>");
    CHECK(v.word(Vocab::kRegionOpen) == "<region>");
    CHECK(v.word(Vocab::kRegionClose) == "</region>");
    CHECK(v.word(Vocab::kSeg) == "<SEG>");

    for (int cls = 0; cls < kNumClasses; ++cls) {
        int id = v.id(class_name(cls));
        CHECK(v.word(id) == class_name(cls));
    }
    std::vector<int> ids = v.encode("what is the largest shape");
    CHECK(v.decode(ids) == "what is the largest shape");
    CHECK_THROWS(v.id("quetzalcoatl"));
}

TEST_CASE("scene generation: determinism, area floor, disjointness") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Scene a = generate_scene(seed, train_palette());
        Scene b = generate_scene(seed, train_palette());
        CHECK(a.image.pix == b.image.pix);
        REQUIRE(a.instances.size() == b.instances.size());
        REQUIRE(a.instances.size() >= 1);
        CHECK(a.instances.size() <= 3);

        Mask seen(kImageSize, kImageSize);
        for (std::size_t i = 0; i < a.instances.size(); ++i) {
            const Instance& inst = a.instances[i];
            CHECK(inst.mask.area() >= 9);
            CHECK(inst.mask.data == b.instances[i].mask.data);
            for (std::size_t p = 0; p < inst.mask.data.size(); ++p) {
                if (!inst.mask.data[p]) continue;
                CHECK(seen.data[p] == 0);  // pairwise disjoint
                seen.data[p] = 1;
            }
            // the centroid pixel lies on the shape and inside its box
            CHECK(inst.mask.at(inst.cy, inst.cx) == 1);
            CHECK(inst.cx >= inst.x0);
            CHECK(inst.cx <= inst.x1);
            CHECK(inst.cy >= inst.y0);
            CHECK(inst.cy <= inst.y1);
            // palette respected
            std::vector<int> pal = train_palette();
            CHECK(std::count(pal.begin(), pal.end(), inst.cls) == 1);
        }
    }
}

TEST_CASE("max_instances forces single-object scenes") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Scene s = generate_scene(seed, heldout_palette(), 1);
        CHECK(s.instances.size() == 1);
        std::vector<int> pal = heldout_palette();
        CHECK(std::count(pal.begin(), pal.end(), s.instances[0].cls) == 1);
    }
}

TEST_CASE("vqa pairs verify against the metadata oracle") {
    const Vocab& v = Vocab::instance();
    int counts_seen[3] = {0, 0, 0};
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        Sample s = make_sample(TaskKind::Vqa, seed, train_palette());
        REQUIRE(s.vqa_kind >= 0);
        REQUIRE(s.vqa_kind <= 2);
        ++counts_seen[s.vqa_kind];
        CHECK(s.prompt_ids.front() == Vocab::kBos);
        CHECK(s.prompt_ids.back() == Vocab::kSep);
        CHECK(s.answer_ids.back() == Vocab::kEos);
        CHECK(oracle_answer(s) == s.answer_ids);

        if (s.vqa_kind == 0) {
            // count answer is the digit word for the instance count
            std::string digit = std::to_string(s.scene.instances.size());
            CHECK(s.answer_ids[0] == v.id(digit));
        } else if (s.vqa_kind == 1) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < s.scene.instances.size(); ++i)
                if (s.scene.instances[i].mask.area() >
                    s.scene.instances[best].mask.area())
                    best = i;
            CHECK(s.answer_ids[0] == v.id(class_name(s.scene.instances[best].cls)));
        }
    }
    CHECK(counts_seen[0] > 0);
    CHECK(counts_seen[1] > 0);
    CHECK(counts_seen[2] > 0);
}

TEST_CASE("region qa: all three prompt kinds over seeds 0..99, oracle agreement") {
    int kinds[3] = {0, 0, 0};
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Sample s = make_sample(TaskKind::RegionQa, seed, train_palette());
        REQUIRE(s.region.has_value());
        ++kinds[static_cast<int>(s.region->kind)];
        // prompt has exactly one region pair
        CHECK(std::count(s.prompt_ids.begin(), s.prompt_ids.end(),
                         Vocab::kRegionOpen) == 1);
        CHECK(std::count(s.prompt_ids.begin(), s.prompt_ids.end(),
                         Vocab::kRegionClose) == 1);
        // box jitter stays in bounds
        if (s.region->kind == RegionKind::Box) {
            CHECK(s.region->x1 < kImageSize);
            CHECK(s.region->y1 < kImageSize);
            CHECK(s.region->x0 <= s.region->x1);
            CHECK(s.region->y0 <= s.region->y1);
        }
        // the region always covers at least one vision token
        Mask canon = s.region->canonical_mask(kImageSize, kImageSize, 4);
        CHECK(!region_token_set(canon, 4).empty());
        CHECK(oracle_answer(s) == s.answer_ids);
    }
    CHECK(kinds[0] > 0);
    CHECK(kinds[1] > 0);
    CHECK(kinds[2] > 0);
}

TEST_CASE("grounding pairs: template instantiation and the SEG invariant") {
    const Vocab& v = Vocab::instance();
    CHECK(grounding_templates().size() == 10);
    std::set<std::string> used;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Sample s = make_sample(TaskKind::Grounding, seed, train_palette());
        REQUIRE(s.gt_mask.has_value());
        CHECK(std::count(s.answer_ids.begin(), s.answer_ids.end(), Vocab::kSeg) == 1);
        // the prompt names the target class
        int cls_id = v.id(class_name(s.target_class));
        CHECK(std::count(s.prompt_ids.begin(), s.prompt_ids.end(), cls_id) >= 1);
        // gt mask is the union of every instance of the prompted class
        std::vector<std::uint8_t> want(s.gt_mask->data.size(), 0);
        for (const Instance& inst : s.scene.instances)
            if (inst.cls == s.target_class)
                for (std::size_t i = 0; i < want.size(); ++i)
                    if (inst.mask.data[i]) want[i] = 1;
        CHECK(want == s.gt_mask->data);
        CHECK(oracle_answer(s) == s.answer_ids);
        used.insert(v.decode(s.prompt_ids));

        // determinism of the full sample
        Sample again = make_sample(TaskKind::Grounding, seed, train_palette());
        CHECK(again.prompt_ids == s.prompt_ids);
        CHECK(again.answer_ids == s.answer_ids);
        CHECK(again.gt_mask->data == s.gt_mask->data);
    }
    CHECK(used.size() >= 10);  // every template shows up across 200 seeds
}

TEST_CASE("oracle self-consistency sweep across tasks") {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Sample s = make_sample(static_cast<TaskKind>(seed % 3), seed, train_palette());
        CHECK(oracle_answer(s) == s.answer_ids);
    }
}

TEST_CASE("splits are disjoint and the zero-shot palette is held out") {
    SplitRange tr = train_split(), te = test_split(), zs = zeroshot_split();
    CHECK(tr.end <= te.begin);
    CHECK(te.end <= zs.begin);

    std::vector<int> tp = train_palette();
    std::set<int> train_classes(tp.begin(), tp.end());
    for (int cls : heldout_palette()) CHECK(train_classes.count(cls) == 0);
    CHECK(train_palette().size() + heldout_palette().size() == kNumClasses);
}
