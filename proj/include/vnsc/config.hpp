#ifndef VNSC_CONFIG_HPP
#define VNSC_CONFIG_HPP

#include <filesystem>
#include <optional>
#include <string>

#include "vnsc/model.hpp"

namespace vnsc {

struct TrainConfig {
    double lr = 2e-4;
    double lr_decay = 0.999; // per epoch
    double beta1 = 0.8;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    Index epochs = 1;
    Index max_steps = 0;     // 0: epochs * steps per epoch
    Index batch_size = 4;
    Index crop_frames = 960; // MDCT frames per training example
    Index toy_utterances = 8;
    double toy_duration = 1.0;

    void validate() const;
};

struct Config {
    ModelConfig model;
    TrainConfig train;
};

/// key=value lines, '#' comments. Unknown or repeated keys are errors.
/// Scenario-dependent defaults (lambda_i, lambda_d) apply unless set explicitly.
Config parse_config(const std::string& text, std::optional<Scenario> scenario_override = std::nullopt);
Config load_config(const std::filesystem::path& path, std::optional<Scenario> scenario_override = std::nullopt);
/// Every key with its effective value; parse_config(echo_config(c)) == c.
std::string echo_config(const Config& cfg);

} // namespace vnsc

#endif // VNSC_CONFIG_HPP
