#include "mg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mg {

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::I: return "I";
        case Stage::II: return "II";
        case Stage::III: return "III";
        case Stage::IV: return "IV";
    }
    return "?";
}

Stage stage_from_name(const std::string& name) {
    if (name == "I") return Stage::I;
    if (name == "II") return Stage::II;
    if (name == "III") return Stage::III;
    if (name == "IV") return Stage::IV;
    throw std::invalid_argument("unknown stage name '" + name + "'");
}

namespace {
bool starts_with(const std::string& s, const std::string& prefix) {
    return s.rfind(prefix, 0) == 0;
}
}  // namespace

bool is_trainable(const std::string& name, Stage stage, bool moe_model) {
    switch (stage) {
        case Stage::I:
            // alignment needs both ends of the text pathway: with a frozen
            // random output head the cross-entropy cannot move at all
            return starts_with(name, "vision_proj.") || starts_with(name, "text_embed.") ||
                   starts_with(name, "lm_head.") || name == "pos_embed";
        case Stage::II:
            return !starts_with(name, "vision_tower.");
        case Stage::III:
            return name.find(".ffn.") != std::string::npos ||
                   starts_with(name, "pixel_enc.") || starts_with(name, "mask_dec.") ||
                   starts_with(name, "t_proj.");
        case Stage::IV:
            // expert bases stay frozen; everything else adapts
            return !(moe_model && name.find(".base.") != std::string::npos);
    }
    return false;
}

std::vector<std::string> apply_freeze_mask(MultimodalModel& model, Stage stage) {
    bool moe_model = !model.moe_layers().empty();
    if (stage == Stage::IV && !moe_model)
        throw std::invalid_argument("stage IV requires a MoE model");
    std::vector<std::string> trainable;
    for (auto& [name, t] : model.params()) {
        if (is_trainable(name, stage, moe_model)) {
            t.set_requires_grad(true);
            t.zero_grad();
            trainable.push_back(name);
        } else {
            t.set_requires_grad(false);
            t.impl()->on_tape = false;
            t.impl()->grad.clear();
        }
    }
    return trainable;
}

bool decay_exempt(const std::string& name) {
    return name.find("ln") != std::string::npos ||
           name.find(".gain") != std::string::npos ||
           name.find(".bias") != std::string::npos ||
           name.find("embed") != std::string::npos || name == "pos_embed" ||
           name.find(".pos") != std::string::npos;
}

void AdamW::step(const ParamList& trainable, real lr) {
    ++t;
    real bc1 = 1.0 - std::pow(beta1, static_cast<real>(t));
    real bc2 = 1.0 - std::pow(beta2, static_cast<real>(t));
    for (const auto& [name, p] : trainable) {
        const std::vector<real>& g = p.impl()->grad;
        if (g.size() != p.size())
            throw std::runtime_error("optimizer: missing gradient for " + name);
        for (real gv : g)
            if (!std::isfinite(gv))
                throw std::runtime_error("optimizer: non-finite gradient in parameter '" +
                                         name + "'");
        Slot& slot = state[name];
        if (slot.m.empty()) {
            slot.m.assign(p.size(), 0.0);
            slot.v.assign(p.size(), 0.0);
        }
        real wd = decay_exempt(name) ? 0.0 : weight_decay;
        real* d = const_cast<Tensor&>(p).data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
            real mhat = slot.m[i] / bc1;
            real vhat = slot.v[i] / bc2;
            d[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * d[i]);
        }
    }
}

SampleLoss sample_loss(const MultimodalModel& model, const Sample& sample,
                       const LossWeights& weights, std::uint64_t sample_seed) {
    std::vector<int> text_ids = sample.prompt_ids;
    text_ids.insert(text_ids.end(), sample.answer_ids.begin(), sample.answer_ids.end());

    auto fr = model.forward_text(sample.scene.image, text_ids, sample.region,
                                 sample_seed);
    std::size_t L = fr.logits.rows();
    std::size_t answer_len = sample.answer_ids.size();

    // next-token prediction, scored on the answer tokens only
    std::vector<int> targets(L, 0);
    std::vector<std::uint8_t> include(L, 0);
    for (std::size_t p = 0; p + 1 < L; ++p) {
        int next_id = fr.row_ids[p + 1];
        if (next_id >= 0 && p + 1 >= L - answer_len) {
            targets[p] = next_id;
            include[p] = 1;
        }
    }
    SampleLoss out;
    out.ce = cross_entropy(fr.logits, targets, include);
    if (sample.task == TaskKind::Grounding) {
        MaskPrediction pred = model.decode_mask(fr, sample.scene.image);
        Tensor gt({sample.gt_mask->h, sample.gt_mask->w});
        for (std::size_t i = 0; i < gt.size(); ++i)
            gt.at(i) = sample.gt_mask->data[i];
        out.bce = bce_loss(pred.logits, gt);
        out.dice = dice_loss(pred.logits, gt);
    }
    out.total = combined_loss(out.ce, out.bce, out.dice, weights);
    return out;
}

namespace {

TaskKind pick_task(const DatasetMix& mix, std::mt19937_64& rng) {
    real total = mix.vqa + mix.region + mix.grounding;
    if (total <= 0) throw std::invalid_argument("dataset mix sums to zero");
    real u = std::uniform_real_distribution<real>(0.0, total)(rng);
    if (u < mix.vqa) return TaskKind::Vqa;
    if (u < mix.vqa + mix.region) return TaskKind::RegionQa;
    return TaskKind::Grounding;
}

}  // namespace

StageResult run_stage(MultimodalModel& model, const StageConfig& cfg,
                      std::ostream* metrics_log) {
    if (cfg.steps < 1) throw std::invalid_argument("run_stage: steps must be >= 1");
    ParamList all = model.params();
    std::vector<std::string> trainable_names = apply_freeze_mask(model, cfg.stage);
    ParamList trainable;
    for (auto& [name, t] : all)
        if (std::find(trainable_names.begin(), trainable_names.end(), name) !=
            trainable_names.end())
            trainable.emplace_back(name, t);

    AdamW opt;
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ull + 13);
    SplitRange split = train_split();
    StageResult result;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (auto& [name, t] : trainable) t.zero_grad();
        StepRecord rec;
        rec.step = step;
        rec.stage = cfg.stage;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            TaskKind task = pick_task(cfg.mix, rng);
            std::uint64_t sample_seed =
                split.begin + rng() % (split.end - split.begin);
            Sample sample = make_sample(task, sample_seed, train_palette());
            if (task == TaskKind::Vqa) {
                real u = std::uniform_real_distribution<real>(0.0, 1.0)(rng);
                // list questions are scored with token precision/recall and
                // converge quickly, so the non-count share leans on largest
                int want_kind =
                    u < cfg.count_frac
                        ? 0
                        : (u < cfg.count_frac + (1.0 - cfg.count_frac) * 0.75 ? 1 : 2);
                while (sample.vqa_kind != want_kind) {
                    sample_seed =
                        split.begin + (sample_seed - split.begin + 7919) %
                                          (split.end - split.begin);
                    sample = make_sample(task, sample_seed, train_palette());
                }
            }
            Tape tape;
            SampleLoss loss = sample_loss(model, sample, cfg.weights, sample_seed);
            Tensor scaled = scale(loss.total, 1.0 / static_cast<real>(cfg.batch));
            tape.backward(scaled);
            rec.loss += loss.total.value() / static_cast<real>(cfg.batch);
            rec.ce += loss.ce.value() / static_cast<real>(cfg.batch);
            if (loss.bce.defined())
                rec.bce += loss.bce.value() / static_cast<real>(cfg.batch);
            if (loss.dice.defined())
                rec.dice += loss.dice.value() / static_cast<real>(cfg.batch);
        }
        real lr = cfg.lr;
        if (cfg.warmup > 0 && step < cfg.warmup)
            lr *= static_cast<real>(step + 1) / static_cast<real>(cfg.warmup);
        opt.step(trainable, lr);

        for (MoELayer* moe : model.moe_layers()) {
            if (moe->last_plan.num_tokens > 0) {
                rec.expert_kept[0] += moe->last_plan.kept[0].size();
                rec.expert_kept[1] += moe->last_plan.kept[1].size();
            }
        }
        if (step == 0) result.first_loss = rec.loss;
        result.last_loss = rec.loss;
        if (metrics_log) {
            *metrics_log << "step=" << step << " stage=" << stage_name(cfg.stage)
                         << " loss=" << rec.loss << " ce=" << rec.ce
                         << " bce=" << rec.bce << " dice=" << rec.dice
                         << " e0_kept=" << rec.expert_kept[0]
                         << " e1_kept=" << rec.expert_kept[1] << "\n";
        }
        result.records.push_back(rec);
    }
    return result;
}

// ---- checkpoints ---------------------------------------------------------

std::uint64_t config_hash(const ModelConfig& cfg) {
    std::ostringstream os;
    os << cfg.c_llm << '|' << cfg.heads << '|' << cfg.num_blocks << '|' << cfg.vocab
       << '|' << cfg.c_v << '|' << cfg.c_p << '|' << cfg.patch << '|' << cfg.pixel_patch
       << '|' << cfg.img
       << '|' << cfg.m_samples << '|' << cfg.max_seq << '|' << cfg.lora_r << '|'
       << cfg.lora_alpha << '|' << cfg.router.top_k << '|'
       << cfg.router.capacity_factor << '|' << cfg.moe;
    std::string s = os.str();
    return fnv1a_bytes(s.data(), s.size());
}

void save_checkpoint(const MultimodalModel& model, Stage stage, std::size_t steps,
                     const std::string& path) {
    save_tensors(path, model.params());
    nlohmann::json manifest;
    manifest["stage"] = stage_name(stage);
    manifest["steps"] = steps;
    manifest["config_hash"] = config_hash(model.cfg);
    manifest["file_hash"] = fnv1a_file(path);
    manifest["moe"] = model.cfg.moe;
    std::ofstream os(path + ".manifest.json");
    if (!os) throw std::runtime_error("cannot write manifest for " + path);
    os << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    LoadedCheckpoint out;
    std::ifstream is(path + ".manifest.json");
    if (!is) throw std::runtime_error("missing manifest for checkpoint " + path);
    nlohmann::json manifest = nlohmann::json::parse(is);
    out.manifest.stage = stage_from_name(manifest.at("stage").get<std::string>());
    out.manifest.steps = manifest.at("steps").get<std::size_t>();
    out.manifest.config_hash = manifest.at("config_hash").get<std::uint64_t>();
    out.manifest.file_hash = manifest.at("file_hash").get<std::uint64_t>();
    out.manifest.moe = manifest.at("moe").get<bool>();
    std::uint64_t actual = fnv1a_file(path);
    if (actual != out.manifest.file_hash)
        throw std::runtime_error("checkpoint " + path +
                                 ": file hash mismatch (corrupted or modified)");
    out.tensors = load_tensors(path);
    return out;
}

void restore_checkpoint(MultimodalModel& model, const LoadedCheckpoint& ckpt) {
    if (ckpt.manifest.moe != model.cfg.moe)
        throw std::runtime_error("checkpoint topology (moe flag) does not match model config");
    if (ckpt.manifest.config_hash != config_hash(model.cfg))
        throw std::runtime_error("checkpoint config hash does not match model config");
    load_params(model, ckpt.tensors);
}

MultimodalModel build_moe_from_experts(const LoadedCheckpoint& ckpt_vl,
                                       const LoadedCheckpoint& ckpt_ground,
                                       const ModelConfig& moe_cfg,
                                       std::uint64_t seed) {
    if (ckpt_vl.manifest.stage != Stage::II)
        throw std::runtime_error("stage IV assembly: first checkpoint must come from stage II");
    if (ckpt_ground.manifest.stage != Stage::III)
        throw std::runtime_error("stage IV assembly: second checkpoint must come from stage III");
    if (ckpt_vl.manifest.moe || ckpt_ground.manifest.moe)
        throw std::runtime_error("stage IV assembly: source checkpoints must be plain-FFN models");
    if (ckpt_vl.manifest.config_hash != ckpt_ground.manifest.config_hash)
        throw std::runtime_error("stage IV assembly: source topologies differ");

    ModelConfig cfg = moe_cfg;
    cfg.moe = true;
    MultimodalModel model = MultimodalModel::build(cfg, seed);

    auto find = [](const ParamList& list, const std::string& name) -> const Tensor& {
        for (const auto& [n, t] : list)
            if (n == name) return t;
        throw std::runtime_error("stage IV assembly: source tensor '" + name +
                                 "' not found");
    };

    for (auto& [name, t] : model.params()) {
        std::size_t slot = name.find(".ffn.");
        if (slot == std::string::npos) {
            // non-FFN weights come from the stage-III checkpoint
            const Tensor& src = find(ckpt_ground.tensors, name);
            if (src.shape() != t.shape())
                throw std::runtime_error("stage IV assembly: shape mismatch for " + name);
            t.vec() = src.vec();
            continue;
        }
        std::string head = name.substr(0, slot + 5);  // "blocks.N.ffn."
        std::string tail = name.substr(slot + 5);
        if (tail == "router.weight") continue;  // stays zero
        if (starts_with(tail, "expert0.") || starts_with(tail, "expert1.")) {
            bool is_vl = starts_with(tail, "expert0.");
            std::string sub = tail.substr(8);  // e.g. "fc1.base.weight", "fc1.lora_a"
            std::size_t base_pos = sub.find(".base.");
            if (base_pos == std::string::npos) continue;  // LoRA factors keep init
            std::string src_name =
                head + sub.substr(0, base_pos) + sub.substr(base_pos + 5);
            const ParamList& src_list = is_vl ? ckpt_vl.tensors : ckpt_ground.tensors;
            const Tensor& src = find(src_list, src_name);
            if (src.shape() != t.shape())
                throw std::runtime_error("stage IV assembly: shape mismatch for " + name);
            t.vec() = src.vec();
        }
    }
    return model;
}

}  // namespace mg
