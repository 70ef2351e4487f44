#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <random>

#include "mg/training.hpp"

using namespace mg;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.c_llm = 16;
    cfg.heads = 2;
    cfg.num_blocks = 2;
    cfg.c_v = 12;
    cfg.c_p = 8;
    cfg.m_samples = 4;
    return cfg;
}

std::map<std::string, std::vector<real>> snapshot(const MultimodalModel& model) {
    std::map<std::string, std::vector<real>> out;
    for (const auto& [name, t] : model.params()) out[name] = t.vec();
    return out;
}

}  // namespace

TEST_CASE("freeze masks match the per-stage contract") {
    // stage I: only the alignment modules
    CHECK(is_trainable("vision_proj.fc1.weight", Stage::I, false));
    CHECK(is_trainable("text_embed.weight", Stage::I, false));
    CHECK(is_trainable("pos_embed", Stage::I, false));
    CHECK(is_trainable("lm_head.weight", Stage::I, false));
    CHECK(!is_trainable("blocks.0.attn.wq.weight", Stage::I, false));
    CHECK(!is_trainable("vision_tower.embed.weight", Stage::I, false));
    CHECK(!is_trainable("ln_f.gain", Stage::I, false));

    // stage II: everything except the vision tower
    CHECK(!is_trainable("vision_tower.embed.weight", Stage::II, false));
    CHECK(is_trainable("blocks.0.attn.wq.weight", Stage::II, false));
    CHECK(is_trainable("blocks.1.ffn.fc1.weight", Stage::II, false));
    CHECK(is_trainable("lm_head.weight", Stage::II, false));

    // stage III: FFN slot + grounding path only
    CHECK(is_trainable("blocks.0.ffn.fc1.weight", Stage::III, false));
    CHECK(is_trainable("pixel_enc.embed.weight", Stage::III, false));
    CHECK(is_trainable("mask_dec.wq.weight", Stage::III, false));
    CHECK(is_trainable("t_proj.fc1.weight", Stage::III, false));
    CHECK(!is_trainable("blocks.0.attn.wq.weight", Stage::III, false));
    CHECK(!is_trainable("text_embed.weight", Stage::III, false));

    // stage IV: everything except the expert bases
    CHECK(is_trainable("blocks.0.ffn.router.weight", Stage::IV, true));
    CHECK(is_trainable("blocks.0.ffn.expert0.fc1.lora_a", Stage::IV, true));
    CHECK(is_trainable("blocks.0.ffn.expert1.fc2.lora_b", Stage::IV, true));
    CHECK(is_trainable("blocks.0.attn.wq.weight", Stage::IV, true));
    CHECK(!is_trainable("blocks.0.ffn.expert0.fc1.base.weight", Stage::IV, true));
    CHECK(!is_trainable("blocks.0.ffn.expert1.fc2.base.bias", Stage::IV, true));
}

TEST_CASE("stage IV requires a mixture model") {
    MultimodalModel model = MultimodalModel::build(tiny_config(), 1);
    CHECK_THROWS(apply_freeze_mask(model, Stage::IV));
}

TEST_CASE("adam first step matches the hand-computed recurrence") {
    Tensor p({1, 1});
    p.at(0) = 2.0;
    p.set_requires_grad(true);
    p.zero_grad();
    p.grad()[0] = 0.5;
    AdamW opt;
    // layer-norm-style name: exempt from weight decay
    opt.step({{"ln_f.gain", p}}, 1e-3);

    real m = 0.1 * 0.5;
    real v = 0.001 * 0.25;
    real mhat = m / (1 - 0.9);
    real vhat = v / (1 - 0.999);
    real want = 2.0 - 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(p.at(0) == doctest::Approx(want).epsilon(1e-12));

    // decayed parameter shrinks further
    Tensor q({1, 1});
    q.at(0) = 2.0;
    q.set_requires_grad(true);
    q.zero_grad();
    q.grad()[0] = 0.5;
    AdamW opt2;
    opt2.step({{"blocks.0.attn.wq.weight", q}}, 1e-3);
    CHECK(q.at(0) == doctest::Approx(want - 1e-3 * 0.01 * 2.0).epsilon(1e-10));
}

TEST_CASE("zero gradients leave undecayed params unchanged") {
    Tensor p({2, 2});
    p.vec() = {1, 2, 3, 4};
    p.set_requires_grad(true);
    p.zero_grad();
    AdamW opt;
    opt.step({{"ln_f.gain", p}}, 1e-2);
    CHECK(p.vec() == std::vector<real>{1, 2, 3, 4});
}

TEST_CASE("nan gradients abort naming the parameter") {
    Tensor p({1, 1});
    p.set_requires_grad(true);
    p.zero_grad();
    p.grad()[0] = std::nan("");
    AdamW opt;
    try {
        opt.step({{"blocks.0.attn.wq.weight", p}}, 1e-3);
        FAIL("expected a throw");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("blocks.0.attn.wq.weight") != std::string::npos);
    }
}

TEST_CASE("decay exemptions") {
    CHECK(decay_exempt("ln_f.gain"));
    CHECK(decay_exempt("blocks.0.ln1.bias"));
    CHECK(decay_exempt("text_embed.weight"));
    CHECK(decay_exempt("pos_embed"));
    CHECK(decay_exempt("blocks.0.attn.wq.bias"));
    CHECK(!decay_exempt("blocks.0.attn.wq.weight"));
    CHECK(!decay_exempt("lm_head.weight"));
}

TEST_CASE("frozen tensors are bit-identical after real training steps") {
    for (Stage stage : {Stage::I, Stage::II, Stage::III}) {
        MultimodalModel model = MultimodalModel::build(tiny_config(), 3);
        auto before = snapshot(model);
        StageConfig cfg;
        cfg.stage = stage;
        cfg.steps = 10;
        cfg.batch = 2;
        cfg.seed = 5;
        if (stage == Stage::III) cfg.mix = {0.0, 0.0, 1.0};
        run_stage(model, cfg);
        bool any_changed = false;
        for (const auto& [name, t] : model.params()) {
            bool trainable = is_trainable(name, stage, false);
            if (!trainable) {
                CHECK(t.vec() == before[name]);  // bit-exact freeze
            } else if (t.vec() != before[name]) {
                any_changed = true;
            }
        }
        CHECK(any_changed);
    }
}

TEST_CASE("checkpoint round trip preserves forward outputs bit-exactly") {
    ModelConfig cfg = tiny_config();
    MultimodalModel model = MultimodalModel::build(cfg, 5);
    Sample s = make_sample(TaskKind::Vqa, 17, train_palette());
    std::vector<int> ids = s.prompt_ids;
    ids.insert(ids.end(), s.answer_ids.begin(), s.answer_ids.end());
    Tensor want = model.forward_text(s.scene.image, ids, std::nullopt, 17).logits;

    std::string path = "test_train_ckpt.mgt";
    save_checkpoint(model, Stage::II, 123, path);

    LoadedCheckpoint ckpt = load_checkpoint(path);
    CHECK(ckpt.manifest.stage == Stage::II);
    CHECK(ckpt.manifest.steps == 123);
    CHECK(!ckpt.manifest.moe);

    MultimodalModel fresh = MultimodalModel::build(cfg, 99);
    restore_checkpoint(fresh, ckpt);
    Tensor got = fresh.forward_text(s.scene.image, ids, std::nullopt, 17).logits;
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.at(i) == want.at(i));

    std::remove(path.c_str());
    std::remove((path + ".manifest.json").c_str());
}

TEST_CASE("corrupted checkpoints are rejected, not silently loaded") {
    MultimodalModel model = MultimodalModel::build(tiny_config(), 5);
    std::string path = "test_train_corrupt.mgt";
    save_checkpoint(model, Stage::I, 1, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        char byte;
        f.seekg(200);
        f.read(&byte, 1);
        byte ^= 0x40;
        f.seekp(200);
        f.write(&byte, 1);
    }
    CHECK_THROWS(load_checkpoint(path));
    std::remove(path.c_str());
    std::remove((path + ".manifest.json").c_str());
}

TEST_CASE("moe assembly: provenance, router shape, expert identity") {
    ModelConfig cfg = tiny_config();
    MultimodalModel m2 = MultimodalModel::build(cfg, 7);
    MultimodalModel m3 = MultimodalModel::build(cfg, 7);
    // make stage-III weights distinct
    for (auto& [name, t] : m3.params())
        for (real& v : t.vec()) v += 0.01;

    save_checkpoint(m2, Stage::II, 10, "tt_s2.mgt");
    save_checkpoint(m3, Stage::III, 10, "tt_s3.mgt");
    LoadedCheckpoint c2 = load_checkpoint("tt_s2.mgt");
    LoadedCheckpoint c3 = load_checkpoint("tt_s3.mgt");

    // provenance: refuses wrong stage tags
    CHECK_THROWS(build_moe_from_experts(c3, c2, cfg, 1));
    CHECK_THROWS(build_moe_from_experts(c2, c2, cfg, 1));

    ModelConfig moe_cfg = cfg;
    moe_cfg.moe = true;
    MultimodalModel moe = build_moe_from_experts(c2, c3, moe_cfg, 1);

    // router parameter count: layers x [2 x c_llm], zero-initialized
    std::size_t router_elems = 0;
    for (const auto& [name, t] : moe.params())
        if (name.find("router") != std::string::npos) {
            router_elems += t.size();
            for (real v : t.vec()) CHECK(v == 0.0);
        }
    CHECK(router_elems == cfg.num_blocks * 2 * cfg.c_llm);

    // expert bases carry their source FFN weights
    std::mt19937_64 rng(2);
    Tensor x = Tensor::randn({3, cfg.c_llm}, rng);
    for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
        auto* layer = dynamic_cast<MoELayer*>(moe.blocks[b].ffn.get());
        REQUIRE(layer != nullptr);
        auto* vl = dynamic_cast<PlainFFN*>(m2.blocks[b].ffn.get());
        auto* gr = dynamic_cast<PlainFFN*>(m3.blocks[b].ffn.get());
        Tensor want_vl = vl->forward(x);
        Tensor want_gr = gr->forward(x);
        Tensor got_vl = layer->experts[0].forward(x);
        Tensor got_gr = layer->experts[1].forward(x);
        for (std::size_t i = 0; i < want_vl.size(); ++i) {
            CHECK(got_vl.at(i) == want_vl.at(i));
            CHECK(got_gr.at(i) == want_gr.at(i));
        }
    }

    // non-FFN weights come from the stage-III checkpoint
    ParamList moe_params = moe.params();
    for (const auto& [name, t] : moe_params)
        if (name.rfind("blocks.0.attn", 0) == 0) {
            for (const auto& [n3, t3] : m3.params())
                if (n3 == name)
                    for (std::size_t i = 0; i < t.size(); ++i)
                        CHECK(t.at(i) == t3.at(i));
            break;
        }

    std::remove("tt_s2.mgt");
    std::remove("tt_s2.mgt.manifest.json");
    std::remove("tt_s3.mgt");
    std::remove("tt_s3.mgt.manifest.json");
}

TEST_CASE("constructed equivalence: forced expert 0 reproduces the source model") {
    // when both checkpoints share stage-II weights, the assembled model with
    // gates pinned to expert 0 must match the plain stage-II model exactly
    ModelConfig cfg = tiny_config();
    MultimodalModel m2 = MultimodalModel::build(cfg, 11);
    save_checkpoint(m2, Stage::II, 1, "tt_eq2.mgt");
    save_checkpoint(m2, Stage::III, 1, "tt_eq3.mgt");
    LoadedCheckpoint c2 = load_checkpoint("tt_eq2.mgt");
    LoadedCheckpoint c3 = load_checkpoint("tt_eq3.mgt");
    ModelConfig moe_cfg = cfg;
    moe_cfg.moe = true;
    moe_cfg.router.top_k = 1;
    moe_cfg.router.capacity_factor = 2.0;
    MultimodalModel moe = build_moe_from_experts(c2, c3, moe_cfg, 1);
    // pin the gate hard toward expert 0
    for (MoELayer* layer : moe.moe_layers())
        for (std::size_t j = 0; j < cfg.c_llm; ++j) layer->router_w.at(0, j) = 0.0;
    // zero router gives a 0.5/0.5 tie -> expert 0 by the tie rule, and the
    // un-renormalized combine scales the expert output by its 0.5 gate
    std::mt19937_64 rng(3);
    Tensor x = Tensor::randn({4, cfg.c_llm}, rng);
    auto* layer = dynamic_cast<MoELayer*>(moe.blocks[0].ffn.get());
    Tensor base = layer->experts[0].forward(x);
    Tensor out = layer->forward(x);
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(out.at(i) == doctest::Approx(0.5 * base.at(i)).epsilon(1e-12));
    std::remove("tt_eq2.mgt");
    std::remove("tt_eq2.mgt.manifest.json");
    std::remove("tt_eq3.mgt");
    std::remove("tt_eq3.mgt.manifest.json");
}

TEST_CASE("stage I cross entropy falls by half on the alignment task") {
    MultimodalModel model = MultimodalModel::build(tiny_config(), 21);
    StageConfig cfg;
    cfg.stage = Stage::I;
    cfg.steps = 200;
    cfg.batch = 2;
    cfg.lr = 2e-3;
    cfg.seed = 9;
    StageResult res = run_stage(model, cfg);
    CHECK(res.last_loss <= 0.5 * res.first_loss);
}

TEST_CASE("training is deterministic given seed and config") {
    auto run_once = [] {
        MultimodalModel model = MultimodalModel::build(tiny_config(), 4);
        StageConfig cfg;
        cfg.stage = Stage::I;
        cfg.steps = 15;
        cfg.batch = 2;
        cfg.seed = 8;
        run_stage(model, cfg);
        return snapshot(model);
    };
    auto a = run_once();
    auto b = run_once();
    CHECK(a == b);
}

TEST_CASE("metrics log carries one structured record per step") {
    MultimodalModel model = MultimodalModel::build(tiny_config(), 6);
    StageConfig cfg;
    cfg.stage = Stage::I;
    cfg.steps = 7;
    cfg.batch = 1;
    cfg.seed = 2;
    std::ostringstream log;
    run_stage(model, cfg, &log);
    std::istringstream in(log.str());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        CHECK(line.find("step=") != std::string::npos);
        CHECK(line.find("stage=") != std::string::npos);
        CHECK(line.find("loss=") != std::string::npos);
        ++lines;
    }
    CHECK(lines == 7);
}
