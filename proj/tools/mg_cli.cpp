// Command-line driver: synthetic data dumps, four-stage training,
// evaluation, and routing reports.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mg/config.hpp"
#include "mg/metrics.hpp"
#include "mg/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

mg::ExperimentConfig read_config(const std::string& path, std::uint64_t seed_override,
                                 bool seed_set) {
    mg::ExperimentConfig cfg;
    if (!path.empty()) cfg = mg::load_config(path);
    if (seed_set) cfg.seed = seed_override;
    return cfg;
}

// Stage seeds are offset by the run seed so one --seed switch re-seeds
// everything while the relative stage structure stays fixed.
std::uint64_t stage_seed(const mg::ExperimentConfig& cfg, int idx) {
    return cfg.stages[idx].seed + cfg.seed * 100003ull;
}

int cmd_gen_data(const std::string& out, std::uint64_t seed, std::size_t count) {
    fs::create_directories(out);
    json manifest = json::array();
    for (std::size_t i = 0; i < count; ++i) {
        mg::TaskKind task = static_cast<mg::TaskKind>(i % 3);
        mg::Sample s = mg::make_sample(task, seed + i, mg::train_palette());
        std::string stem = "sample_" + std::to_string(seed + i);
        mg::save_image(out + "/" + stem + ".mgi", s.scene.image);
        json rec;
        rec["seed"] = seed + i;
        rec["task"] = task == mg::TaskKind::Vqa        ? "vqa"
                      : task == mg::TaskKind::RegionQa ? "region"
                                                       : "grounding";
        rec["image"] = stem + ".mgi";
        rec["prompt"] = mg::Vocab::instance().decode(s.prompt_ids);
        rec["answer"] = mg::Vocab::instance().decode(s.answer_ids);
        if (s.gt_mask) {
            mg::save_mask(out + "/" + stem + ".mgm", *s.gt_mask);
            rec["mask"] = stem + ".mgm";
            rec["target_class"] = mg::class_name(s.target_class);
        }
        manifest.push_back(rec);
    }
    std::ofstream mf(out + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    std::cout << "wrote " << count << " samples to " << out << "\n";
    return 0;
}

void write_report(const std::string& out_dir, const std::string& name,
                  const mg::EvalReport& rep) {
    std::ofstream txt(out_dir + "/" + name + ".txt");
    txt << mg::format_report(rep);
    json j;
    j["closed_accuracy"] = rep.closed_acc;
    j["n_closed"] = rep.n_closed;
    j["token_precision"] = rep.token_precision;
    j["token_recall"] = rep.token_recall;
    j["mdice_seen"] = rep.grounding.mean;
    j["mdice_zeroshot"] = rep.zeroshot_dice;
    for (const auto& [cls, d] : rep.grounding.per_class)
        j["dice_per_class"][mg::class_name(cls)] = d;
    std::ofstream js(out_dir + "/" + name + ".json");
    js << j.dump(2) << "\n";
}

int cmd_train(const std::string& config_path, std::uint64_t seed, bool seed_set,
              const std::string& out) {
    mg::ExperimentConfig cfg = read_config(config_path, seed, seed_set);
    fs::create_directories(out);
    std::ofstream log(out + "/metrics.log");

    mg::ModelConfig plain = cfg.model;
    plain.moe = false;
    mg::MultimodalModel model = mg::MultimodalModel::build(plain, cfg.seed);

    for (int i = 0; i < 3; ++i) {
        mg::StageConfig st = cfg.stages[i];
        st.seed = stage_seed(cfg, i);
        std::cout << "stage " << mg::stage_name(st.stage) << ": " << st.steps
                  << " steps\n";
        mg::StageResult res = mg::run_stage(model, st, &log);
        std::cout << "  loss " << res.first_loss << " -> " << res.last_loss << "\n";
        mg::save_checkpoint(model, st.stage, st.steps,
                            out + "/stage" + std::to_string(i + 1) + ".mgt");
        if (i == 1) {
            // stage III resumes from the stage-II weights, so nothing to do:
            // the same model object carries them forward. The stage-II
            // checkpoint is what seeds expert E_vl during assembly.
        }
    }

    mg::LoadedCheckpoint vl = mg::load_checkpoint(out + "/stage2.mgt");
    mg::LoadedCheckpoint ground = mg::load_checkpoint(out + "/stage3.mgt");
    mg::ModelConfig moe_cfg = cfg.model;
    moe_cfg.moe = true;
    mg::MultimodalModel moe_model =
        mg::build_moe_from_experts(vl, ground, moe_cfg, cfg.seed);

    mg::StageConfig st4 = cfg.stages[3];
    st4.seed = stage_seed(cfg, 3);
    std::cout << "stage " << mg::stage_name(st4.stage) << ": " << st4.steps
              << " steps\n";
    mg::StageResult res = mg::run_stage(moe_model, st4, &log);
    std::cout << "  loss " << res.first_loss << " -> " << res.last_loss << "\n";
    mg::save_checkpoint(moe_model, mg::Stage::IV, st4.steps, out + "/stage4.mgt");

    mg::EvalOptions eopts;
    eopts.seed = cfg.seed;
    mg::EvalReport rep = mg::evaluate(moe_model, eopts);
    write_report(out, "report", rep);
    std::ofstream route(out + "/routing.txt");
    route << mg::format_routing(rep.routing);
    std::cout << mg::format_report(rep);
    std::cout << "final checkpoint hash "
              << mg::load_checkpoint(out + "/stage4.mgt").manifest.file_hash << "\n";
    return 0;
}

mg::MultimodalModel load_model(const std::string& ckpt_path,
                               const mg::ExperimentConfig& cfg,
                               mg::LoadedCheckpoint& ckpt_out) {
    ckpt_out = mg::load_checkpoint(ckpt_path);
    mg::ModelConfig mc = cfg.model;
    mc.moe = ckpt_out.manifest.moe;
    mg::MultimodalModel model = mg::MultimodalModel::build(mc, 0);
    mg::restore_checkpoint(model, ckpt_out);
    return model;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path,
             std::uint64_t seed, bool seed_set, const std::string& out, bool zeroshot) {
    mg::ExperimentConfig cfg = read_config(config_path, seed, seed_set);
    mg::LoadedCheckpoint ckpt;
    mg::MultimodalModel model = load_model(ckpt_path, cfg, ckpt);
    std::uint64_t hash_before = mg::fnv1a_file(ckpt_path);

    mg::EvalOptions opts;
    opts.seed = cfg.seed;
    opts.zeroshot = zeroshot;
    mg::EvalReport rep = mg::evaluate(model, opts);

    std::uint64_t hash_after = mg::fnv1a_file(ckpt_path);
    if (hash_before != hash_after) {
        std::cerr << "error: checkpoint file changed during evaluation\n";
        return 1;
    }
    fs::create_directories(out);
    write_report(out, "report", rep);
    std::cout << mg::format_report(rep);
    std::cout << "checkpoint hash unchanged: " << hash_after << "\n";
    return 0;
}

int cmd_route_report(const std::string& ckpt_path, const std::string& config_path,
                     std::uint64_t seed, bool seed_set, const std::string& out) {
    mg::ExperimentConfig cfg = read_config(config_path, seed, seed_set);
    mg::LoadedCheckpoint ckpt;
    mg::MultimodalModel model = load_model(ckpt_path, cfg, ckpt);
    if (!ckpt.manifest.moe) {
        std::cerr << "error: checkpoint has no expert routing to report\n";
        return 1;
    }
    model.set_record_plans(true);
    mg::SplitRange split = mg::test_split();
    for (std::size_t k = 0; k < 50; ++k) {
        mg::TaskKind task = static_cast<mg::TaskKind>(k % 3);
        mg::Sample s = mg::make_sample(task, split.begin + k, mg::train_palette());
        model.forward_text(s.scene.image, s.prompt_ids, s.region,
                           split.begin + k);
    }
    std::vector<std::vector<mg::DispatchPlan>> per_layer;
    for (mg::MoELayer* moe : model.moe_layers()) per_layer.push_back(moe->plans);
    std::string text = mg::format_routing(mg::routing_report(per_layer));
    std::cout << text;
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream f(out + "/routing.txt");
        f << text;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-granular mixture-of-experts multimodal toolkit"};
    app.require_subcommand(1);

    std::string config_path, out = "out", ckpt_path, split_name = "test";
    std::uint64_t seed = 7;
    std::size_t count = 32;

    auto add_common = [&](CLI::App* sub, bool with_ckpt) {
        sub->add_option("--config", config_path, "experiment config file");
        sub->add_option("--seed", seed, "run seed");
        sub->add_option("--out", out, "output directory");
        if (with_ckpt)
            sub->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    };

    CLI::App* gen = app.add_subcommand("gen-data", "dump synthetic samples to disk");
    add_common(gen, false);
    gen->add_option("--count", count, "number of samples");

    CLI::App* train = app.add_subcommand("train", "run the four-stage schedule");
    add_common(train, false);

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(ev, true);
    ev->add_option("--split", split_name, "test | test-only (skip zero-shot)");

    CLI::App* route = app.add_subcommand("route-report", "per-layer expert loads");
    add_common(route, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(out, seed, count);
        bool seed_set = false;
        for (CLI::App* sub : {train, ev, route})
            if (sub->parsed() && sub->count("--seed") > 0) seed_set = true;
        if (train->parsed()) return cmd_train(config_path, seed, seed_set, out);
        if (ev->parsed())
            return cmd_eval(ckpt_path, config_path, seed, seed_set, out,
                            split_name != "test-only");
        if (route->parsed())
            return cmd_route_report(ckpt_path, config_path, seed, seed_set, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
