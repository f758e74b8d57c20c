// spheregen command-line tool. Uses only the C interface.

#include "spheregen.h"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Failure {
    int code;
    std::string message;
};

void check(sg_status st)
{
    if (st != SG_OK) {
        throw Failure{static_cast<int>(st), sg_last_error()};
    }
}

void print_json(char* text)
{
    if (text) {
        std::cout << nlohmann::json::parse(text).dump(2) << '\n';
        sg_string_free(text);
    }
}

class Paths {
public:
    explicit Paths(const std::string& workdir) : root_(workdir) {}

    void validate() const
    {
        if (!fs::is_directory(root_)) {
            throw Failure{SG_ERR_USAGE, "--workdir " + root_.string() + " is not a directory"};
        }
    }
    std::string operator()(const std::string& p) const
    {
        if (p.empty()) {
            return p;
        }
        const fs::path path(p);
        return (path.is_absolute() ? path : root_ / path).lexically_normal().string();
    }

private:
    fs::path root_;
};

const char* c_or_null(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Symmetry-controllable spherical image generation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", sg_version());
    std::string workdir = ".";
    app.add_option("--workdir", workdir, "Directory all other paths are relative to");

    // make-dataset
    auto* mk = app.add_subcommand("make-dataset", "Render a synthetic panorama corpus");
    std::string mk_out = "data", mk_mix = "uniform";
    std::size_t mk_n = 600, mk_height = 64;
    std::uint64_t mk_seed = 0;
    bool mk_force = false;
    mk->add_option("--out", mk_out, "Corpus directory")->capture_default_str();
    mk->add_option("--n", mk_n, "Number of panoramas")->capture_default_str();
    mk->add_option("--mix", mk_mix, "Label mix: uniform or label=weight,...")->capture_default_str();
    mk->add_option("--seed", mk_seed)->capture_default_str();
    mk->add_option("--height", mk_height, "Panorama height (width = 2 x height)")->capture_default_str();
    mk->add_flag("--force", mk_force, "Overwrite a non-empty directory");

    // train
    auto* tr = app.add_subcommand("train", "Train a model on a corpus");
    std::string tr_config, tr_data = "data", tr_split = "train", tr_ckpt = "model.sgck", tr_metrics = "metrics.jsonl",
                           tr_resume;
    std::vector<std::string> tr_sets;
    std::size_t tr_log_every = 10;
    struct Override {
        const char* flag;
        const char* key;
        std::string value;
    };
    std::vector<Override> tr_overrides{{"--preset", "preset", {}},        {"--steps", "steps", {}},
                                       {"--batch-size", "batch_size", {}}, {"--lr", "lr", {}},
                                       {"--seed", "seed", {}},             {"--loss-mode", "loss_mode", {}},
                                       {"--circular-padding", "circular_padding", {}},
                                       {"--checkpoint-every", "checkpoint_every", {}}};
    tr->add_option("--config", tr_config, "JSON run configuration file");
    tr->add_option("--data", tr_data, "Corpus directory")->capture_default_str();
    tr->add_option("--split", tr_split)->capture_default_str();
    tr->add_option("--checkpoint", tr_ckpt, "Output checkpoint")->capture_default_str();
    tr->add_option("--metrics", tr_metrics, "JSON-lines metrics log")->capture_default_str();
    tr->add_option("--resume", tr_resume, "Continue from this checkpoint");
    tr->add_option("--log-every", tr_log_every, "Progress interval in steps")->capture_default_str();
    tr->add_option("--set", tr_sets, "Config override key=value (repeatable)");
    for (auto& o : tr_overrides) {
        tr->add_option(o.flag, o.value, std::string("Sets ") + o.key);
    }

    // generate
    auto* gen = app.add_subcommand("generate", "Generate a panorama from an NFOV image");
    std::string gen_ckpt = "model.sgck", gen_input, gen_out = "generated.png", gen_partial, gen_preset;
    std::vector<double> gen_s;
    sg_view gen_view{0.0, 0.0, 90.0};
    std::uint64_t gen_seed = 0;
    gen->add_option("--checkpoint", gen_ckpt)->capture_default_str();
    gen->add_option("--input", gen_input, "Square NFOV PNG")->required();
    gen->add_option("--lon", gen_view.lon_deg, "View center longitude (degrees)")->capture_default_str();
    gen->add_option("--lat", gen_view.lat_deg, "View center latitude (degrees)")->capture_default_str();
    gen->add_option("--fov", gen_view.fov_deg, "Field of view (degrees)")->capture_default_str();
    auto* s_opt = gen->add_option("--s", gen_s, "Five symmetry intensities in [0, 1]")->expected(SG_NUM_SYMMETRIES);
    gen->add_option("--s-preset", gen_preset, "90rot | 180rot | plane0 | plane90 | asym")->excludes(s_opt);
    gen->add_option("--seed", gen_seed)->capture_default_str();
    gen->add_option("--out", gen_out)->capture_default_str();
    gen->add_option("--partial-out", gen_partial, "Also write the projected partial panorama");

    // crop-nfov
    auto* crop = app.add_subcommand("crop-nfov", "Render a perspective view of a panorama");
    std::string crop_input, crop_out = "nfov.png";
    sg_view crop_view{0.0, 0.0, 90.0};
    std::size_t crop_size = 128;
    crop->add_option("--input", crop_input, "Equirectangular PNG")->required();
    crop->add_option("--lon", crop_view.lon_deg)->capture_default_str();
    crop->add_option("--lat", crop_view.lat_deg)->capture_default_str();
    crop->add_option("--fov", crop_view.fov_deg)->capture_default_str();
    crop->add_option("--size", crop_size, "Output side length")->capture_default_str();
    crop->add_option("--out", crop_out)->capture_default_str();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Symmetry sweep, FID and seam metrics");
    std::string ev_model = "checkpoint", ev_data = "data", ev_split = "test", ev_out = "eval", ev_ablation = "none",
                ev_targets, ev_extractor;
    std::vector<std::string> ev_ckpts;
    std::vector<double> ev_quality_s;
    std::size_t ev_max = 0;
    std::uint64_t ev_seed = 0;
    bool ev_montage = false, ev_no_sweep = false;
    ev->add_option("--model", ev_model, "checkpoint | echo")->capture_default_str();
    ev->add_option("--checkpoint", ev_ckpts, "Checkpoint(s); one per column for ablations");
    ev->add_option("--data", ev_data)->capture_default_str();
    ev->add_option("--split", ev_split)->capture_default_str();
    ev->add_option("--max-samples", ev_max, "0 = whole split")->capture_default_str();
    ev->add_option("--seed", ev_seed)->capture_default_str();
    ev->add_option("--out", ev_out, "Report directory")->capture_default_str();
    ev->add_option("--ablation", ev_ablation, "none | loss | padding")->capture_default_str();
    ev->add_option("--targets", ev_targets, "Comma list of sweep targets");
    ev->add_option("--quality-s", ev_quality_s, "s used for FID and seam")->expected(SG_NUM_SYMMETRIES);
    ev->add_option("--extractor", ev_extractor, "Feature extractor weights");
    ev->add_flag("--montage", ev_montage, "Write a PNG grid of the sweep");
    ev->add_flag("--no-sweep", ev_no_sweep, "Skip the symmetry sweep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return SG_ERR_USAGE;
    }

    try {
        const Paths path(workdir);
        path.validate();
        char* out = nullptr;

        if (*mk) {
            const std::string dir = path(mk_out);
            const sg_dataset_args a{dir.c_str(), mk_n, mk_mix.c_str(), mk_seed, mk_height, mk_force ? 1 : 0};
            check(sg_make_dataset(&a, &out));
        } else if (*tr) {
            sg_config* cfg = nullptr;
            check(sg_config_new(&cfg));
            std::unique_ptr<sg_config, decltype(&sg_config_free)> guard(cfg, sg_config_free);
            if (!tr_config.empty()) {
                check(sg_config_load(cfg, path(tr_config).c_str()));
            }
            for (const auto& o : tr_overrides) {
                if (!o.value.empty()) {
                    check(sg_config_set(cfg, o.key, o.value.c_str()));
                }
            }
            for (const auto& kv : tr_sets) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) {
                    throw Failure{SG_ERR_USAGE, "--set expects key=value, got '" + kv + "'"};
                }
                check(sg_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
            }
            check(sg_config_validate(cfg));
            const std::string data = path(tr_data), ckpt = path(tr_ckpt), metrics = path(tr_metrics),
                              resume = path(tr_resume);
            const sg_train_args a{data.c_str(), tr_split.c_str(), ckpt.c_str(), c_or_null(metrics),
                                  c_or_null(resume), tr_log_every};
            auto progress = [](const char* metrics_json, void*) {
                const auto m = nlohmann::json::parse(metrics_json);
                std::fprintf(stderr, "step %zu  L_rec %.4g  L_gen %.4g  L_D %.4g  KL %.4g  rec_l1 %.4f\n",
                             m.at("step").get<std::size_t>(), m.at("L_rec").get<double>(),
                             m.at("L_gen").get<double>(), m.at("L_D").get<double>(), m.at("KL_z").get<double>(),
                             m.at("rec_l1").get<double>());
            };
            check(sg_train(cfg, &a, progress, nullptr, &out));
        } else if (*gen) {
            sg_generate_args a{};
            std::array<double, SG_NUM_SYMMETRIES> s{};
            if (!gen_s.empty()) {
                std::copy(gen_s.begin(), gen_s.end(), s.begin());
            } else {
                check(sg_symmetry_preset(gen_preset.empty() ? "asym" : gen_preset.c_str(), s.data()));
            }
            const std::string ckpt = path(gen_ckpt), input = path(gen_input), o = path(gen_out),
                              partial = path(gen_partial);
            a.checkpoint = ckpt.c_str();
            a.input = input.c_str();
            a.view = gen_view;
            std::copy(s.begin(), s.end(), a.s);
            a.seed = gen_seed;
            a.out = o.c_str();
            a.partial_out = c_or_null(partial);
            check(sg_generate(&a, &out));
        } else if (*crop) {
            const std::string input = path(crop_input), o = path(crop_out);
            const sg_crop_args a{input.c_str(), crop_view, crop_size, o.c_str()};
            check(sg_crop_nfov(&a, &out));
        } else if (*ev) {
            std::vector<std::string> ckpts;
            for (const auto& c : ev_ckpts) {
                ckpts.push_back(path(c));
            }
            std::vector<const char*> ptrs;
            for (const auto& c : ckpts) {
                ptrs.push_back(c.c_str());
            }
            const std::string data = path(ev_data), o = path(ev_out), extractor = path(ev_extractor);
            sg_evaluate_args a{};
            a.model = ev_model.c_str();
            a.checkpoints = ptrs.data();
            a.num_checkpoints = ptrs.size();
            a.data_dir = data.c_str();
            a.split = ev_split.c_str();
            a.max_samples = ev_max;
            a.seed = ev_seed;
            a.out_dir = o.c_str();
            a.ablation = ev_ablation.c_str();
            a.targets = c_or_null(ev_targets);
            a.has_quality_s = ev_quality_s.empty() ? 0 : 1;
            std::copy(ev_quality_s.begin(), ev_quality_s.end(), a.quality_s);
            a.extractor = c_or_null(extractor);
            a.montage = ev_montage ? 1 : 0;
            a.sweep = ev_no_sweep ? 0 : 1;
            check(sg_evaluate(&a, &out));
        }
        print_json(out);
        return 0;
    } catch (const Failure& f) {
        std::cerr << "error: " << f.message << '\n';
        return f.code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return SG_ERR_INTERNAL;
    }
}
