#include "utrack/config.hpp"

#include <fstream>
#include <sstream>

#include "utrack/error.hpp"

namespace utrack {

void RunConfig::validate() const {
    encoder.validate();
    if (pmn_threshold < 0.0 || pmn_threshold > 1.0) {
        throw ConfigError("config: pmn.threshold must lie in [0, 1]");
    }
    if (pmn_capacity == 0 || pmn_topk == 0) {
        throw ConfigError("config: pmn.capacity and pmn.topk must be positive");
    }
    if (base_context <= 0.0 || template_context <= 0.0) {
        throw ConfigError("config: context factors must be positive");
    }
    if (optimizer != "sgd" && optimizer != "adam") {
        throw ConfigError("config: optimizer must be 'sgd' or 'adam'");
    }
    if (loss.alpha < 0.0 || loss.beta < 0.0 || loss.gamma < 0.0) {
        throw ConfigError("config: loss weights must be nonnegative");
    }
    if (synth_target_max >= static_cast<double>(synth_frame)) {
        throw ConfigError("config: target size must be smaller than the frame");
    }
}

namespace {

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: bad numeric value '" + v + "' for key '" + key + "'");
    }
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    const double d = parse_double(key, v);
    if (d < 0.0 || d != static_cast<double>(static_cast<std::size_t>(d))) {
        throw ConfigError("config: key '" + key + "' requires a nonnegative integer, got '" + v + "'");
    }
    return static_cast<std::size_t>(d);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' requires true/false, got '" + v + "'");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "encoder.patch") cfg.encoder.patch = parse_size(key, value);
    else if (key == "encoder.width") cfg.encoder.width = parse_size(key, value);
    else if (key == "encoder.layers") cfg.encoder.layers = parse_size(key, value);
    else if (key == "encoder.heads") cfg.encoder.heads = parse_size(key, value);
    else if (key == "encoder.ff_multiplier") cfg.encoder.ff_multiplier = parse_size(key, value);
    else if (key == "geometry.template") cfg.encoder.template_size = parse_size(key, value);
    else if (key == "geometry.search") cfg.encoder.search_size = parse_size(key, value);
    else if (key == "uld.head_width") cfg.uld_head_width = parse_size(key, value);
    else if (key == "loss.alpha") cfg.loss.alpha = parse_double(key, value);
    else if (key == "loss.beta") cfg.loss.beta = parse_double(key, value);
    else if (key == "loss.gamma") cfg.loss.gamma = parse_double(key, value);
    else if (key == "pmn.capacity") cfg.pmn_capacity = parse_size(key, value);
    else if (key == "pmn.topk") cfg.pmn_topk = parse_size(key, value);
    else if (key == "pmn.threshold") cfg.pmn_threshold = parse_double(key, value);
    else if (key == "pmn.hidden") cfg.pmn_hidden = parse_size(key, value);
    else if (key == "pmn.value_from_group") cfg.pmn_value_from_group = parse_bool(key, value);
    else if (key == "runtime.base_context") cfg.base_context = parse_double(key, value);
    else if (key == "runtime.template_context") cfg.template_context = parse_double(key, value);
    else if (key == "runtime.uld_enabled") cfg.uld_enabled = parse_bool(key, value);
    else if (key == "runtime.pmn_enabled") cfg.pmn_enabled = parse_bool(key, value);
    else if (key == "kalman.process_pos") cfg.kalman.process_pos = parse_double(key, value);
    else if (key == "kalman.process_vel") cfg.kalman.process_vel = parse_double(key, value);
    else if (key == "kalman.measurement") cfg.kalman.measurement = parse_double(key, value);
    else if (key == "kalman.init_pos") cfg.kalman.init_pos = parse_double(key, value);
    else if (key == "kalman.init_vel") cfg.kalman.init_vel = parse_double(key, value);
    else if (key == "train.optimizer") cfg.optimizer = value;
    else if (key == "train.momentum") cfg.momentum = parse_double(key, value);
    else if (key == "train.stage1_steps") cfg.stage1_steps = parse_size(key, value);
    else if (key == "train.stage1_lr") cfg.stage1_lr = parse_double(key, value);
    else if (key == "train.stage1_batch") cfg.stage1_batch = parse_size(key, value);
    else if (key == "train.corrupt_px") cfg.corrupt_px = parse_double(key, value);
    else if (key == "train.stage2_steps") cfg.stage2_steps = parse_size(key, value);
    else if (key == "train.stage2_lr") cfg.stage2_lr = parse_double(key, value);
    else if (key == "train.stage2_batch") cfg.stage2_batch = parse_size(key, value);
    else if (key == "train.seed") cfg.seed = static_cast<std::uint64_t>(parse_size(key, value));
    else if (key == "synth.frame") cfg.synth_frame = parse_size(key, value);
    else if (key == "synth.length") cfg.synth_length = parse_size(key, value);
    else if (key == "synth.target_min") cfg.synth_target_min = parse_double(key, value);
    else if (key == "synth.target_max") cfg.synth_target_max = parse_double(key, value);
    else if (key == "synth.train_sequences") cfg.synth_train_sequences = parse_size(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
        }
        set_config_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    base.validate();
    return base;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str());
}

}  // namespace utrack
