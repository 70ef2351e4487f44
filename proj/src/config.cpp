#include "mg/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mg {

ExperimentConfig::ExperimentConfig() {
    stages[0] = {Stage::I, {1.0, 0.0, 0.0}, LossWeights{}, 1250, 4, 1e-3, 20, 11, 0.7};
    stages[1] = {Stage::II, {0.45, 0.55, 0.0}, LossWeights{}, 400, 4, 1e-3, 20, 12, 0.4};
    stages[2] = {Stage::III, {0.0, 0.0, 1.0}, LossWeights{}, 400, 4, 1e-3, 20, 13};
    stages[3] = {Stage::IV, {0.40, 0.20, 0.40}, LossWeights{}, 430, 4, 5e-4, 20, 14, 0.5};
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(std::size_t line, const std::string& msg) {
    throw std::runtime_error("config line " + std::to_string(line) + ": " + msg);
}

real to_real(const std::string& v, std::size_t line) {
    try {
        std::size_t pos = 0;
        real r = std::stod(v, &pos);
        if (pos != v.size()) fail(line, "trailing characters in number '" + v + "'");
        return r;
    } catch (const std::runtime_error&) {
        throw;
    } catch (...) {
        fail(line, "expected a number, got '" + v + "'");
    }
}

std::size_t to_size(const std::string& v, std::size_t line) {
    real r = to_real(v, line);
    if (r < 0 || r != static_cast<real>(static_cast<std::size_t>(r)))
        fail(line, "expected a non-negative integer, got '" + v + "'");
    return static_cast<std::size_t>(r);
}

bool to_bool(const std::string& v, std::size_t line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(line, "expected true/false, got '" + v + "'");
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string raw, section;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string s = trim(raw);
        if (s.empty() || s[0] == '#') continue;
        if (s.front() == '[') {
            if (s.back() != ']') fail(line, "unterminated section header");
            section = s.substr(1, s.size() - 2);
            if (section != "model" && section != "moe" && section != "data" &&
                section != "stageI" && section != "stageII" && section != "stageIII" &&
                section != "stageIV" && section != "run")
                fail(line, "unknown section [" + section + "]");
            continue;
        }
        std::size_t eq = s.find('=');
        if (eq == std::string::npos) fail(line, "expected 'key = value'");
        std::string key = trim(s.substr(0, eq));
        std::string val = trim(s.substr(eq + 1));
        if (key.empty() || val.empty()) fail(line, "empty key or value");
        if (section.empty()) fail(line, "key '" + key + "' outside any section");

        if (section == "model") {
            if (key == "c_llm") cfg.model.c_llm = to_size(val, line);
            else if (key == "heads") cfg.model.heads = to_size(val, line);
            else if (key == "num_blocks") cfg.model.num_blocks = to_size(val, line);
            else if (key == "vocab") cfg.model.vocab = to_size(val, line);
            else if (key == "c_v") cfg.model.c_v = to_size(val, line);
            else if (key == "c_p") cfg.model.c_p = to_size(val, line);
            else if (key == "patch") cfg.model.patch = to_size(val, line);
            else if (key == "pixel_patch") cfg.model.pixel_patch = to_size(val, line);
            else if (key == "img") cfg.model.img = to_size(val, line);
            else if (key == "m_samples") cfg.model.m_samples = to_size(val, line);
            else if (key == "max_seq") cfg.model.max_seq = to_size(val, line);
            else fail(line, "unknown key '" + key + "' in [model]");
        } else if (section == "moe") {
            if (key == "enabled") cfg.model.moe = to_bool(val, line);
            else if (key == "top_k") cfg.model.router.top_k = to_size(val, line);
            else if (key == "capacity_factor") cfg.model.router.capacity_factor = to_real(val, line);
            else if (key == "lora_r") cfg.model.lora_r = to_size(val, line);
            else if (key == "lora_alpha") cfg.model.lora_alpha = to_real(val, line);
            else fail(line, "unknown key '" + key + "' in [moe]");
        } else if (section == "data") {
            if (key == "n_train") cfg.data.n_train = to_size(val, line);
            else if (key == "max_instances") cfg.data.max_instances = to_size(val, line);
            else fail(line, "unknown key '" + key + "' in [data]");
        } else if (section == "run") {
            if (key == "seed") cfg.seed = to_size(val, line);
            else fail(line, "unknown key '" + key + "' in [run]");
        } else {
            std::size_t idx = section == "stageI" ? 0
                              : section == "stageII" ? 1
                              : section == "stageIII" ? 2 : 3;
            StageConfig& st = cfg.stages[idx];
            if (key == "steps") st.steps = to_size(val, line);
            else if (key == "batch") st.batch = to_size(val, line);
            else if (key == "lr") st.lr = to_real(val, line);
            else if (key == "warmup") st.warmup = to_size(val, line);
            else if (key == "seed") st.seed = to_size(val, line);
            else if (key == "mix_vqa") st.mix.vqa = to_real(val, line);
            else if (key == "mix_region") st.mix.region = to_real(val, line);
            else if (key == "mix_grounding") st.mix.grounding = to_real(val, line);
            else if (key == "count_frac") st.count_frac = to_real(val, line);
            else if (key == "w_reg") st.weights.reg = to_real(val, line);
            else if (key == "w_bce") st.weights.bce = to_real(val, line);
            else if (key == "w_dice") st.weights.dice = to_real(val, line);
            else fail(line, "unknown key '" + key + "' in [" + section + "]");
        }
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_config(os.str());
}

}  // namespace mg
