#pragma once

#include <cstdint>
#include <string>

#include "utrack/encoder.hpp"
#include "utrack/kalman.hpp"
#include "utrack/losses.hpp"

namespace utrack {

// Every knob of the system, defaulted to the desk-scale configuration.
// Loaded from line-oriented `key = value` files with dotted sections;
// unknown keys are errors.
struct RunConfig {
    EncoderConfig encoder;  // template/search sizes live here too

    // Decoder.
    std::size_t uld_head_width = 32;

    // Losses.
    LossWeights loss;

    // Memory network.
    std::size_t pmn_capacity = 6;
    std::size_t pmn_topk = 3;
    double pmn_threshold = 0.5;
    std::size_t pmn_hidden = 32;
    bool pmn_value_from_group = false;

    // Online tracking.
    double base_context = 2.0;
    double template_context = 2.0;
    KalmanConfig kalman;

    // Ablation switches: uld_enabled=false pins sigma to 1 (no uncertainty
    // signal); pmn_enabled=false pins the reliability score to 1.
    bool uld_enabled = true;
    bool pmn_enabled = true;

    // Training.
    std::string optimizer = "sgd";  // "sgd" (momentum) or "adam"
    double momentum = 0.9;
    std::size_t stage1_steps = 400;
    double stage1_lr = 5e-3;
    std::size_t stage1_batch = 8;
    double corrupt_px = 8.0;  // supervision noise on occluded frames
    std::size_t stage2_steps = 150;
    double stage2_lr = 5e-3;
    std::size_t stage2_batch = 8;
    std::uint64_t seed = 1;

    // Synthetic data.
    std::size_t synth_frame = 64;
    std::size_t synth_length = 60;
    double synth_target_min = 12.0;
    double synth_target_max = 20.0;
    std::size_t synth_train_sequences = 16;

    void validate() const;
};

// Applies one `key = value` assignment; unknown keys raise ConfigError.
void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

// Reads a config file ('#' comments, blank lines allowed) over the defaults.
RunConfig load_config(const std::string& path);

RunConfig parse_config_text(const std::string& text, RunConfig base = RunConfig{});

}  // namespace utrack
