#include "spheregen.h"

#include "core/app.hpp"
#include "core/errors.hpp"
#include "core/geometry.hpp"
#include "core/image_io.hpp"

#include <cstring>
#include <new>
#include <sstream>

struct sg_config {
    spheregen::RunConfig cfg;
};

struct sg_model {
    std::unique_ptr<spheregen::Model> model;
};

namespace {

using namespace spheregen;

thread_local std::string g_last_error;

template <class F>
sg_status guarded(F&& f)
{
    try {
        f();
        g_last_error.clear();
        return SG_OK;
    } catch (const UsageError& e) {
        g_last_error = e.what();
        return SG_ERR_USAGE;
    } catch (const DataError& e) {
        g_last_error = e.what();
        return SG_ERR_DATA;
    } catch (const NumericError& e) {
        g_last_error = e.what();
        return SG_ERR_NUMERIC;
    } catch (const DomainError& e) {
        // Argument preconditions reached from the outside are usage problems.
        g_last_error = e.what();
        return SG_ERR_USAGE;
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return SG_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return SG_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return SG_ERR_INTERNAL;
    }
}

void need(const void* p, const char* what)
{
    if (p == nullptr) {
        throw UsageError(std::string(what) + " must not be null");
    }
}

std::string str(const char* s, const char* fallback = "") { return s ? s : fallback; }

char* dup(const std::string& s)
{
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) {
        throw std::bad_alloc();
    }
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void emit(char** out, const nlohmann::json& j)
{
    if (out) {
        *out = dup(j.dump());
    }
}

SymmetryParams params(const double* s)
{
    SymmetryParams p;
    for (std::size_t i = 0; i < k_num_symmetries; ++i) {
        p.s[i] = s[i];
    }
    try {
        p.validate();
    } catch (const DomainError& e) {
        throw UsageError(e.what());
    }
    return p;
}

ViewArgs view_args(const sg_view& v) { return {v.lon_deg, v.lat_deg, v.fov_deg}; }

} // namespace

extern "C" {

const char* sg_version(void) { return "0.1.0"; }
const char* sg_last_error(void) { return g_last_error.c_str(); }
void sg_string_free(char* s) { std::free(s); }

sg_status sg_registry(char** json_out)
{
    return guarded([&] {
        need(json_out, "json_out");
        emit(json_out, registry_names());
    });
}

sg_status sg_symmetry_preset(const char* name, double s_out[SG_NUM_SYMMETRIES])
{
    return guarded([&] {
        need(name, "preset name");
        need(s_out, "output vector");
        const SymmetryParams p = symmetry_preset(name);
        std::copy(p.s.begin(), p.s.end(), s_out);
    });
}

sg_status sg_config_new(sg_config** out)
{
    return guarded([&] {
        need(out, "output handle");
        *out = new sg_config();
    });
}

void sg_config_free(sg_config* cfg) { delete cfg; }

sg_status sg_config_load(sg_config* cfg, const char* path)
{
    return guarded([&] {
        need(cfg, "config");
        need(path, "config path");
        cfg->cfg = load_run_config(path);
    });
}

sg_status sg_config_set(sg_config* cfg, const char* key, const char* value)
{
    return guarded([&] {
        need(cfg, "config");
        need(key, "key");
        need(value, "value");
        cfg->cfg.set(key, value);
    });
}

sg_status sg_config_validate(const sg_config* cfg)
{
    return guarded([&] {
        need(cfg, "config");
        cfg->cfg.validate();
    });
}

sg_status sg_config_to_json(const sg_config* cfg, char** json_out)
{
    return guarded([&] {
        need(cfg, "config");
        need(json_out, "json_out");
        emit(json_out, to_json(cfg->cfg));
    });
}

sg_status sg_make_dataset(const sg_dataset_args* args, char** summary_json)
{
    return guarded([&] {
        need(args, "arguments");
        MakeDatasetOptions o;
        o.out = str(args->out_dir);
        o.n = args->n;
        o.mix = str(args->mix, "uniform");
        o.seed = args->seed;
        o.height = args->height;
        o.force = args->force != 0;
        emit(summary_json, make_dataset(o));
    });
}

sg_status sg_train(const sg_config* cfg, const sg_train_args* args, sg_progress_fn progress, void* user,
                   char** summary_json)
{
    return guarded([&] {
        need(cfg, "config");
        need(args, "arguments");
        TrainOptions o;
        o.data = str(args->data_dir);
        o.split = str(args->split, "train");
        o.checkpoint = str(args->checkpoint);
        o.metrics = str(args->metrics);
        o.resume = str(args->resume);
        o.log_every = args->log_every;
        ProgressFn fn;
        if (progress) {
            fn = [&](const StepMetrics& m) { progress(to_json(m).dump().c_str(), user); };
        }
        emit(summary_json, train(cfg->cfg, o, fn));
    });
}

sg_status sg_model_load(const char* checkpoint, sg_model** out)
{
    return guarded([&] {
        need(checkpoint, "checkpoint path");
        need(out, "output handle");
        LoadedCheckpoint ck = load_checkpoint(checkpoint);
        *out = new sg_model{std::move(ck.model)};
    });
}

void sg_model_free(sg_model* model) { delete model; }

sg_status sg_model_describe(const sg_model* model, char** json_out)
{
    return guarded([&] {
        need(model, "model");
        need(json_out, "json_out");
        emit(json_out, describe_model(*model->model));
    });
}

sg_status sg_model_generate(const sg_model* model, const char* nfov_png, const sg_view* view,
                            const double s[SG_NUM_SYMMETRIES], uint64_t seed, const char* out_png,
                            const char* partial_png)
{
    return guarded([&] {
        need(model, "model");
        need(nfov_png, "input path");
        need(view, "view");
        need(s, "symmetry vector");
        need(out_png, "output path");
        const SymmetryParams p = params(s);
        const ViewSpec v = view_args(*view).spec();
        const Tensor nfov = load_png_rgb(nfov_png);
        if (nfov.dim(1) != nfov.dim(2)) {
            throw DataError(std::string("input ") + nfov_png + " must be square");
        }
        const PartialImage part =
            project_nfov(nfov, v, EquirectGrid::from_height(model->model->config().height));
        save_png(out_png, generate(*model->model, {part.image, part.mask, v.center}, p, seed));
        if (partial_png) {
            save_png(partial_png, part.image);
        }
    });
}

sg_status sg_generate(const sg_generate_args* args, char** summary_json)
{
    return guarded([&] {
        need(args, "arguments");
        GenerateOptions o;
        o.checkpoint = str(args->checkpoint);
        o.input = str(args->input);
        o.view = view_args(args->view);
        o.s = params(args->s);
        o.seed = args->seed;
        o.out = str(args->out);
        o.partial_out = str(args->partial_out);
        emit(summary_json, generate_command(o));
    });
}

sg_status sg_crop_nfov(const sg_crop_args* args, char** summary_json)
{
    return guarded([&] {
        need(args, "arguments");
        CropOptions o;
        o.input = str(args->input);
        o.view = view_args(args->view);
        o.size = args->size;
        o.out = str(args->out);
        emit(summary_json, crop_nfov(o));
    });
}

sg_status sg_evaluate(const sg_evaluate_args* args, char** report_json)
{
    return guarded([&] {
        need(args, "arguments");
        EvaluateOptions o;
        o.model = str(args->model, "checkpoint");
        for (std::size_t i = 0; i < args->num_checkpoints; ++i) {
            need(args->checkpoints, "checkpoint list");
            o.checkpoints.push_back(str(args->checkpoints[i]));
        }
        o.data = str(args->data_dir);
        o.split = str(args->split, "test");
        o.max_samples = args->max_samples;
        o.seed = args->seed;
        o.out_dir = str(args->out_dir);
        o.ablation = str(args->ablation, "none");
        if (args->targets && *args->targets) {
            o.targets.clear();
            std::stringstream ss(args->targets);
            for (std::string t; std::getline(ss, t, ',');) {
                if (!t.empty()) {
                    o.targets.push_back(t);
                }
            }
        }
        if (args->has_quality_s) {
            o.quality_s = params(args->quality_s);
        }
        o.extractor = str(args->extractor);
        o.montage = args->montage != 0;
        o.sweep = args->sweep != 0;
        emit(report_json, evaluate(o));
    });
}

} // extern "C"
