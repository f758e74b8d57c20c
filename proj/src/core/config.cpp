#include "core/config.hpp"

#include "core/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace spheregen {

using nlohmann::json;

namespace {

std::string strip_prefix(const std::string& key)
{
    for (const char* p : {"model.", "train."}) {
        const std::string pre(p);
        if (key.rfind(pre, 0) == 0) {
            return key.substr(pre.size());
        }
    }
    return key;
}

double parse_double(const std::string& key, const std::string& v)
{
    double out = 0.0;
    const auto* end = v.data() + v.size();
    const auto res = std::from_chars(v.data(), end, out);
    if (res.ec != std::errc{} || res.ptr != end) {
        throw UsageError("config key '" + key + "': expected a number, got '" + v + "'");
    }
    return out;
}

std::size_t parse_size(const std::string& key, const std::string& v)
{
    std::size_t out = 0;
    const auto* end = v.data() + v.size();
    const auto res = std::from_chars(v.data(), end, out);
    if (res.ec != std::errc{} || res.ptr != end) {
        throw UsageError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "1" || v == "true" || v == "on" || v == "yes") {
        return true;
    }
    if (v == "0" || v == "false" || v == "off" || v == "no") {
        return false;
    }
    throw UsageError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v)
{
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(parse_size(key, item));
    }
    if (out.empty()) {
        throw UsageError("config key '" + key + "': empty list");
    }
    return out;
}

Reduction reduction_from_string(const std::string& s)
{
    if (s == "mean") {
        return Reduction::mean;
    }
    if (s == "sum") {
        return Reduction::sum;
    }
    throw UsageError("unknown reduction '" + s + "' (expected mean or sum)");
}

std::string to_string(Reduction r) { return r == Reduction::mean ? "mean" : "sum"; }

template <typename T>
void read_opt(const json& j, const char* key, T& out)
{
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception& e) {
            throw UsageError(std::string("config key '") + key + "': " + e.what());
        }
    }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* section)
{
    for (const auto& [k, _] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
            throw UsageError(std::string("unknown ") + section + " config key '" + k + "'");
        }
    }
}

} // namespace

std::string to_string(LossMode m)
{
    switch (m) {
    case LossMode::both: return "both";
    case LossMode::rec: return "rec";
    case LossMode::gen: return "gen";
    }
    return "both";
}

LossMode loss_mode_from_string(const std::string& s)
{
    if (s == "both") {
        return LossMode::both;
    }
    if (s == "rec") {
        return LossMode::rec;
    }
    if (s == "gen") {
        return LossMode::gen;
    }
    throw UsageError("unknown loss mode '" + s + "' (expected both, rec or gen)");
}

void TrainConfig::validate() const
{
    auto check = [](bool c, const std::string& what) {
        if (!c) {
            throw UsageError("invalid train config: " + what);
        }
    };
    check(learning_rate > 0.0 && std::isfinite(learning_rate), "learning rate must be positive");
    check(batch_size >= 1, "batch_size must be >= 1");
    check(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)");
    check(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)");
    check(adam_eps > 0.0, "adam_eps must be positive");
}

void RunConfig::apply_preset(const std::string& preset)
{
    if (preset == "desk") {
        model = ModelConfig::desk();
    } else if (preset == "paper") {
        model = ModelConfig::paper();
    } else if (preset == "tiny") {
        model = ModelConfig::tiny();
    } else {
        throw UsageError("unknown preset '" + preset + "' (expected desk, paper or tiny)");
    }
}

void RunConfig::set(const std::string& raw_key, const std::string& v)
{
    const std::string key = strip_prefix(raw_key);
    ModelConfig& m = model;
    TrainConfig& t = train;
    if (key == "preset") {
        apply_preset(v);
    } else if (key == "height") {
        m.height = parse_size(key, v);
    } else if (key == "encoder_channels") {
        m.encoder_channels = parse_list(key, v);
    } else if (key == "discriminator_channels") {
        m.discriminator_channels = parse_list(key, v);
    } else if (key == "prior_layers") {
        m.prior_layers = parse_size(key, v);
    } else if (key == "attention") {
        m.attention = parse_bool(key, v);
    } else if (key == "alpha") {
        m.alpha = parse_double(key, v);
    } else if (key == "beta") {
        m.beta = parse_double(key, v);
    } else if (key == "gamma") {
        m.gamma = parse_double(key, v);
    } else if (key == "kappa") {
        m.kappa = parse_double(key, v);
    } else if (key == "mu_s") {
        m.mu_s = parse_double(key, v);
    } else if (key == "sigma_s") {
        m.sigma_s = parse_double(key, v);
    } else if (key == "reduction") {
        m.reduction = reduction_from_string(v);
    } else if (key == "square_rec_adversarial") {
        m.square_rec_adversarial = parse_bool(key, v);
    } else if (key == "circular_padding") {
        m.circular_padding = parse_bool(key, v);
    } else if (key == "symmetry_control") {
        m.symmetry_control = parse_bool(key, v);
    } else if (key == "weight_w") {
        m.weight_w = parse_bool(key, v);
    } else if (key == "lr" || key == "learning_rate") {
        t.learning_rate = parse_double(key, v);
    } else if (key == "batch_size" || key == "batch") {
        t.batch_size = parse_size(key, v);
    } else if (key == "steps") {
        t.steps = parse_size(key, v);
    } else if (key == "seed") {
        t.seed = parse_size(key, v);
    } else if (key == "loss_mode" || key == "loss") {
        t.loss_mode = loss_mode_from_string(v);
    } else if (key == "adam_beta1") {
        t.adam_beta1 = parse_double(key, v);
    } else if (key == "adam_beta2") {
        t.adam_beta2 = parse_double(key, v);
    } else if (key == "checkpoint_every") {
        t.checkpoint_every = parse_size(key, v);
    } else if (key == "verify_isolation") {
        t.verify_isolation = parse_bool(key, v);
    } else {
        throw UsageError("unknown config key '" + raw_key + "'");
    }
}

void RunConfig::validate() const
{
    model.validate();
    train.validate();
}

json to_json(const ModelConfig& c)
{
    return json{{"preset", c.preset},
                {"height", c.height},
                {"image_channels", c.image_channels},
                {"encoder_channels", c.encoder_channels},
                {"prior_layers", c.prior_layers},
                {"discriminator_channels", c.discriminator_channels},
                {"patch_grid", c.patch_grid},
                {"attention_block", c.attention_block},
                {"attention", c.attention},
                {"alpha", c.alpha},
                {"beta", c.beta},
                {"gamma", c.gamma},
                {"kappa", c.kappa},
                {"mu_s", c.mu_s},
                {"sigma_s", c.sigma_s},
                {"reduction", to_string(c.reduction)},
                {"square_rec_adversarial", c.square_rec_adversarial},
                {"circular_padding", c.circular_padding},
                {"symmetry_control", c.symmetry_control},
                {"weight_w", c.weight_w}};
}

ModelConfig model_config_from_json(const json& j)
{
    if (!j.is_object()) {
        throw UsageError("model config must be a JSON object");
    }
    reject_unknown(j,
                   {"preset", "height", "image_channels", "encoder_channels", "prior_layers",
                    "discriminator_channels", "patch_grid", "attention_block", "attention", "alpha", "beta", "gamma",
                    "kappa", "mu_s", "sigma_s", "reduction", "square_rec_adversarial", "circular_padding",
                    "symmetry_control", "weight_w"},
                   "model");
    ModelConfig c;
    if (j.contains("preset")) {
        RunConfig tmp;
        tmp.apply_preset(j.at("preset").get<std::string>());
        c = tmp.model;
    }
    read_opt(j, "height", c.height);
    read_opt(j, "image_channels", c.image_channels);
    read_opt(j, "encoder_channels", c.encoder_channels);
    read_opt(j, "prior_layers", c.prior_layers);
    read_opt(j, "discriminator_channels", c.discriminator_channels);
    read_opt(j, "patch_grid", c.patch_grid);
    read_opt(j, "attention_block", c.attention_block);
    read_opt(j, "attention", c.attention);
    read_opt(j, "alpha", c.alpha);
    read_opt(j, "beta", c.beta);
    read_opt(j, "gamma", c.gamma);
    read_opt(j, "kappa", c.kappa);
    read_opt(j, "mu_s", c.mu_s);
    read_opt(j, "sigma_s", c.sigma_s);
    if (j.contains("reduction")) {
        c.reduction = reduction_from_string(j.at("reduction").get<std::string>());
    }
    read_opt(j, "square_rec_adversarial", c.square_rec_adversarial);
    read_opt(j, "circular_padding", c.circular_padding);
    read_opt(j, "symmetry_control", c.symmetry_control);
    read_opt(j, "weight_w", c.weight_w);
    return c;
}

json to_json(const TrainConfig& c)
{
    return json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
                {"steps", c.steps},                 {"seed", c.seed},
                {"loss_mode", to_string(c.loss_mode)}, {"adam_beta1", c.adam_beta1},
                {"adam_beta2", c.adam_beta2},       {"adam_eps", c.adam_eps},
                {"checkpoint_every", c.checkpoint_every}, {"verify_isolation", c.verify_isolation}};
}

TrainConfig train_config_from_json(const json& j)
{
    if (!j.is_object()) {
        throw UsageError("train config must be a JSON object");
    }
    reject_unknown(j,
                   {"learning_rate", "batch_size", "steps", "seed", "loss_mode", "adam_beta1", "adam_beta2",
                    "adam_eps", "checkpoint_every", "verify_isolation"},
                   "train");
    TrainConfig c;
    read_opt(j, "learning_rate", c.learning_rate);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "steps", c.steps);
    read_opt(j, "seed", c.seed);
    if (j.contains("loss_mode")) {
        c.loss_mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
    }
    read_opt(j, "adam_beta1", c.adam_beta1);
    read_opt(j, "adam_beta2", c.adam_beta2);
    read_opt(j, "adam_eps", c.adam_eps);
    read_opt(j, "checkpoint_every", c.checkpoint_every);
    read_opt(j, "verify_isolation", c.verify_isolation);
    return c;
}

json to_json(const RunConfig& c) { return json{{"model", to_json(c.model)}, {"train", to_json(c.train)}}; }

RunConfig run_config_from_json(const json& j)
{
    if (!j.is_object()) {
        throw UsageError("config must be a JSON object");
    }
    reject_unknown(j, {"model", "train"}, "top-level");
    RunConfig c;
    if (j.contains("model")) {
        c.model = model_config_from_json(j.at("model"));
    }
    if (j.contains("train")) {
        c.train = train_config_from_json(j.at("train"));
    }
    return c;
}

RunConfig load_run_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw UsageError("cannot open config file " + path);
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config file " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

} // namespace spheregen
