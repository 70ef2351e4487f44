#pragma once

// Experiment configuration: a line-oriented `key = value` file with
// [model], [moe], [data], [stageI]..[stageIV] sections.

#include <string>

#include "mg/model.hpp"
#include "mg/training.hpp"

namespace mg {

struct DataConfig {
    std::size_t n_train = 0;       // informational; samples are seed-addressed
    std::size_t max_instances = 3;
};

struct ExperimentConfig {
    ModelConfig model;
    DataConfig data;
    StageConfig stages[4];
    std::uint64_t seed = 7;

    ExperimentConfig();
};

// Throws std::runtime_error with a line number on unknown sections,
// unknown keys, or malformed lines.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

}  // namespace mg
