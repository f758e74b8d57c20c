#pragma once

// Run configuration: model + training settings, loaded from a JSON file with
// key/value overrides applied on top (flags > file > defaults).

#include "core/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>

namespace spheregen {

enum class LossMode { both, rec, gen };

std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 8;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    LossMode loss_mode = LossMode::both;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t checkpoint_every = 0; // 0 = only at the end
    bool verify_isolation = true;     // hash parameters around each half-step

    void validate() const;
};

struct RunConfig {
    ModelConfig model = ModelConfig::desk();
    TrainConfig train;

    // Selects a preset, keeping any training settings.
    void apply_preset(const std::string& preset);
    // Dotted or bare key, e.g. "lr", "train.batch_size", "model.kappa".
    void set(const std::string& key, const std::string& value);
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

} // namespace spheregen
