#include "core/app.hpp"

#include "core/errors.hpp"
#include "core/image_io.hpp"
#include "core/synthetic.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace spheregen {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json curve_summary(const std::vector<double>& v)
{
    if (v.empty()) {
        return json::object();
    }
    double lo = v.front(), hi = v.front();
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    // About 20 evenly spaced points of the curve.
    json points = json::array();
    const std::size_t stride = std::max<std::size_t>(1, v.size() / 20);
    for (std::size_t i = 0; i < v.size(); i += stride) {
        points.push_back(v[i]);
    }
    return json{{"first", v.front()}, {"last", v.back()}, {"min", lo}, {"max", hi}, {"points", points}};
}

void ensure_parent(const std::string& path)
{
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) {
        std::error_code ec;
        fs::create_directories(parent, ec);
        if (ec) {
            throw DataError("cannot create directory " + parent.string() + ": " + ec.message());
        }
    }
}

void write_text(const std::string& path, const std::string& text)
{
    ensure_parent(path);
    std::ofstream out(path);
    out << text;
    if (!out) {
        throw DataError("cannot write " + path);
    }
}

struct EvalModel {
    std::string label;
    std::string path;
    std::unique_ptr<Model> model;
    std::optional<TrainerSnapshot> trainer;
};

EvalModel load_eval_model(const std::string& path)
{
    if (!fs::exists(path)) {
        throw DataError("checkpoint not found: " + path);
    }
    LoadedCheckpoint ck = load_checkpoint(path);
    return {"", path, std::move(ck.model), std::move(ck.trainer)};
}

bool untrained(const EvalModel& m) { return !m.trainer || m.trainer->step == 0; }

json model_columns(const std::vector<EvalModel>& models, const std::vector<json>& results)
{
    json cols = json::object();
    for (std::size_t k = 0; k < models.size(); ++k) {
        cols[models[k].label] = results[k];
    }
    return cols;
}

std::string ablation_csv(const std::vector<EvalModel>& models, const std::vector<json>& results,
                         const std::vector<std::string>& targets, bool with_sweep)
{
    std::ostringstream out;
    out.precision(6);
    out << "metric";
    for (const auto& m : models) {
        out << ',' << m.label;
    }
    out << '\n';
    auto row = [&](const std::string& name, const std::function<double(const json&)>& get) {
        out << name;
        for (const auto& r : results) {
            out << ',' << get(r);
        }
        out << '\n';
    };
    row("fid", [](const json& r) { return r.at("quality").at("fid").get<double>(); });
    row("seam_mean", [](const json& r) { return r.at("quality").at("seam").at("mean").get<double>(); });
    row("seam_median", [](const json& r) { return r.at("quality").at("seam").at("median").get<double>(); });
    if (with_sweep) {
        for (const auto& t : targets) {
            for (double level : {0.0, 1.0}) {
                row("sem_" + t + "@" + (level == 0.0 ? "0" : "1"), [&](const json& r) {
                    for (const auto& c : r.at("sweep").at("cells")) {
                        if (c.at("target") == t && std::abs(c.at("level").get<double>() - level) < 1e-12) {
                            return c.at("sem").at("median").get<double>();
                        }
                    }
                    return std::nan("");
                });
            }
        }
    }
    return out.str();
}

} // namespace

json make_dataset(const MakeDatasetOptions& o)
{
    if (o.out.empty()) {
        throw UsageError("make-dataset: output directory is required");
    }
    if (o.n == 0) {
        throw UsageError("make-dataset: --n must be positive");
    }
    const LabelMix mix = parse_mix(o.mix);
    EquirectGrid::from_height(o.height).validate();
    const CorpusSummary s = build_corpus(o.out, o.n, mix, o.seed, o.height, o.force);
    return json{{"directory", o.out},
                {"total", s.total},
                {"per_label", s.per_label},
                {"per_split", s.per_split},
                {"manifest_sha", s.manifest_sha},
                {"seed", o.seed},
                {"height", o.height}};
}

json train(const RunConfig& cfg_in, const TrainOptions& o, const ProgressFn& progress)
{
    RunConfig cfg = cfg_in;
    cfg.validate();
    if (o.data.empty()) {
        throw UsageError("train: --data is required");
    }
    if (o.checkpoint.empty()) {
        throw UsageError("train: --checkpoint is required");
    }

    std::unique_ptr<Model> model;
    std::optional<TrainerSnapshot> snap;
    if (!o.resume.empty()) {
        if (!fs::exists(o.resume)) {
            throw DataError("resume checkpoint not found: " + o.resume);
        }
        LoadedCheckpoint ck = load_checkpoint(o.resume);
        if (!ck.trainer) {
            throw DataError("checkpoint " + o.resume + " has no optimizer state to resume from");
        }
        model = std::move(ck.model);
        snap = std::move(ck.trainer);
        cfg.model = model->config();
        const std::size_t steps = cfg.train.steps;
        cfg.train = snap->config;
        cfg.train.steps = steps;
        if (snap->step > steps) {
            throw UsageError("train: checkpoint is at step " + std::to_string(snap->step) + ", beyond --steps " +
                             std::to_string(steps));
        }
    }

    const LoadedSplit split = load_split(o.data, o.split, cfg.model.height);
    if (split.images.empty()) {
        throw DataError("train: split '" + o.split + "' of " + o.data + " is empty");
    }
    if (!model) {
        model = std::make_unique<Model>(cfg.model, cfg.train.seed);
    }
    Trainer trainer(*model, cfg.train);
    if (snap) {
        snap->config = cfg.train;
        restore_trainer(trainer, *snap);
    }
    const std::size_t start = trainer.step();

    if (!o.metrics.empty()) {
        ensure_parent(o.metrics);
    }
    ensure_parent(o.checkpoint);

    std::map<std::string, std::vector<double>> curves;
    TrainLoopOptions loop;
    loop.metrics_path = o.metrics;
    loop.checkpoint_path = o.checkpoint;
    loop.on_step = [&](const StepMetrics& m) {
        curves["L_rec"].push_back(m.l_rec);
        curves["L_gen"].push_back(m.l_gen);
        curves["L_D"].push_back(m.l_d);
        curves["KL_z"].push_back(m.kl_z);
        curves["rec_l1"].push_back(m.rec_l1);
        curves["gen_masked_l1"].push_back(m.gen_masked_l1);
        if (progress && o.log_every > 0 && (m.step % o.log_every == 0 || m.step == trainer.config().steps)) {
            progress(m);
        }
    };
    const StepMetrics last = run_training(trainer, split.images, loop);

    json c = json::object();
    for (const auto& [k, v] : curves) {
        c[k] = curve_summary(v);
    }
    json out{{"checkpoint", o.checkpoint},
             {"metrics", o.metrics},
             {"start_step", start},
             {"end_step", trainer.step()},
             {"train_items", split.images.size()},
             {"loss_mode", to_string(trainer.config().loss_mode)},
             {"curves", c}};
    if (trainer.step() > start) {
        out["final"] = to_json(last);
    }
    return out;
}

ViewSpec ViewArgs::spec() const
{
    if (!std::isfinite(lon) || !std::isfinite(lat) || lat < -90.0 || lat > 90.0) {
        throw UsageError("view: latitude must be in [-90, 90] degrees");
    }
    ViewSpec v;
    v.center = SphereDirection::from_lon_lat(lon, lat);
    v.fov_deg = fov;
    try {
        v.validate();
    } catch (const DomainError& e) {
        throw UsageError(std::string("view: ") + e.what());
    }
    return v;
}

json generate_command(const GenerateOptions& o)
{
    try {
        o.s.validate();
    } catch (const DomainError& e) {
        throw UsageError(std::string("generate: ") + e.what());
    }
    const ViewSpec view = o.view.spec();
    if (o.out.empty()) {
        throw UsageError("generate: --out is required");
    }
    if (!fs::exists(o.checkpoint)) {
        throw DataError("checkpoint not found: " + o.checkpoint);
    }
    const LoadedCheckpoint ck = load_checkpoint(o.checkpoint);
    const Model& model = *ck.model;

    const Tensor nfov = load_png_rgb(o.input);
    if (nfov.dim(1) != nfov.dim(2)) {
        throw DataError("generate: input " + o.input + " must be square (1:1 aspect), got " +
                        std::to_string(nfov.dim(2)) + "x" + std::to_string(nfov.dim(1)));
    }
    const PartialImage part = project_nfov(nfov, view, EquirectGrid::from_height(model.config().height));
    const Tensor img = generate(model, {part.image, part.mask, view.center}, o.s, o.seed);
    ensure_parent(o.out);
    save_png(o.out, img);
    if (!o.partial_out.empty()) {
        ensure_parent(o.partial_out);
        save_png(o.partial_out, part.image);
    }
    std::vector<double> s(o.s.s.begin(), o.s.s.end());
    return json{{"out", o.out}, {"s", s}, {"seed", o.seed}, {"height", img.dim(1)}, {"width", img.dim(2)}};
}

json crop_nfov(const CropOptions& o)
{
    const ViewSpec view = o.view.spec();
    if (o.size < 8 || o.size > 4096) {
        throw UsageError("crop-nfov: --size must be in [8, 4096]");
    }
    if (o.out.empty()) {
        throw UsageError("crop-nfov: --out is required");
    }
    const Tensor pano = load_png_rgb(o.input);
    if (pano.dim(2) != 2 * pano.dim(1)) {
        throw DataError("crop-nfov: " + o.input + " is not a 2:1 equirectangular panorama");
    }
    const Tensor nfov = render_nfov(pano, view, o.size);
    ensure_parent(o.out);
    save_png(o.out, nfov);
    return json{{"out", o.out}, {"size", o.size}, {"lon", o.view.lon}, {"lat", o.view.lat}, {"fov", o.view.fov}};
}

json describe_model(const Model& model)
{
    std::map<std::string, std::size_t> groups;
    auto add = [&](const ParamStore& store) {
        for (const auto& [name, var] : store.entries()) {
            groups[name.substr(0, name.find('.'))] += var.value().numel();
        }
    };
    add(model.generator_params());
    add(model.discriminator_params());
    return json{{"groups", groups},
                {"generator", model.generator_params().count()},
                {"discriminator", model.discriminator_params().count()},
                {"config", to_json(model.config())}};
}

json evaluate(const EvaluateOptions& o)
{
    if (o.data.empty()) {
        throw UsageError("evaluate: --data is required");
    }
    if (o.out_dir.empty()) {
        throw UsageError("evaluate: --out is required");
    }
    if (o.model != "checkpoint" && o.model != "echo") {
        throw UsageError("evaluate: --model must be 'checkpoint' or 'echo'");
    }
    if (o.ablation != "none" && o.ablation != "loss" && o.ablation != "padding") {
        throw UsageError("evaluate: --ablation must be none, loss or padding");
    }
    for (const auto& t : o.targets) {
        sweep_params(t, 0.0);
    }
    for (double l : o.levels) {
        if (!(l >= 0.0 && l <= 1.0)) {
            throw UsageError("evaluate: sweep levels must lie in [0, 1]");
        }
    }
    const std::size_t want = o.ablation == "loss" ? 3 : o.ablation == "padding" ? 2 : 1;
    if (o.model == "echo") {
        if (o.ablation != "none") {
            throw UsageError("evaluate: ablations need checkpoints, not the echo model");
        }
    } else if (o.checkpoints.size() != want) {
        throw UsageError("evaluate: expected " + std::to_string(want) + " checkpoint(s), got " +
                         std::to_string(o.checkpoints.size()));
    }

    std::vector<EvalModel> models;
    for (const auto& p : o.checkpoints) {
        if (o.model == "checkpoint") {
            models.push_back(load_eval_model(p));
        }
    }
    std::size_t height = 0;
    if (!models.empty()) {
        height = models.front().model->config().height;
        for (const auto& m : models) {
            if (m.model->config().height != height) {
                throw DataError("evaluate: checkpoints differ in resolution");
            }
        }
    } else {
        const auto items = read_manifest(o.data);
        if (items.empty()) {
            throw DataError("evaluate: " + o.data + " has no items");
        }
        height = items.front().recipe.height;
    }

    if (o.ablation == "loss") {
        std::map<std::string, EvalModel> by_mode;
        for (auto& m : models) {
            if (!m.trainer) {
                throw DataError("evaluate: " + m.path + " does not record its loss mode");
            }
            const std::string mode = to_string(m.trainer->config.loss_mode);
            if (by_mode.count(mode)) {
                throw UsageError("evaluate: two checkpoints trained with loss mode '" + mode + "'");
            }
            m.label = mode;
            by_mode.emplace(mode, std::move(m));
        }
        models.clear();
        for (const char* mode : {"both", "rec", "gen"}) {
            if (!by_mode.count(mode)) {
                throw UsageError(std::string("evaluate --ablation loss: missing a checkpoint trained with loss mode '") +
                                 mode + "'");
            }
            models.push_back(std::move(by_mode.at(mode)));
        }
    } else if (o.ablation == "padding") {
        std::map<std::string, EvalModel> by_pad;
        for (auto& m : models) {
            const std::string pad = m.model->config().circular_padding ? "circular" : "zero";
            if (by_pad.count(pad)) {
                throw UsageError("evaluate: two checkpoints with " + pad + " padding");
            }
            m.label = pad;
            by_pad.emplace(pad, std::move(m));
        }
        models.clear();
        for (const char* pad : {"circular", "zero"}) {
            if (!by_pad.count(pad)) {
                throw UsageError(std::string("evaluate --ablation padding: missing the ") + pad + "-padding checkpoint");
            }
            models.push_back(std::move(by_pad.at(pad)));
        }
    } else if (!models.empty()) {
        models.front().label = "model";
    }

    // Validated; now the expensive part.
    const FeatureExtractor fe = o.extractor.empty() ? FeatureExtractor() : FeatureExtractor::load(o.extractor);
    const LoadedSplit split = load_split(o.data, o.split, height);
    std::vector<Tensor> images = split.images;
    if (o.max_samples > 0 && images.size() > o.max_samples) {
        images.resize(o.max_samples);
    }
    if (images.empty()) {
        throw DataError("evaluate: split '" + o.split + "' of " + o.data + " is empty");
    }
    const std::vector<EvalSample> samples = make_eval_samples(images, o.seed);

    auto run_one = [&](const Generator& gen, const ModelConfig* mc, bool flag_untrained, const std::string& prefix) {
        SymmetryParams qs;
        qs.s.fill(mc ? mc->mu_s : 0.5);
        if (o.quality_s) {
            qs = *o.quality_s;
        }
        json r;
        r["quality"] = to_json(quality_report(gen, samples, qs, fe, o.seed));
        r["quality"]["s"] = std::vector<double>(qs.s.begin(), qs.s.end());
        if (o.sweep && !o.targets.empty()) {
            SweepReport sw = symmetry_sweep(gen, samples, o.targets, o.levels, fe, o.seed);
            sw.untrained = flag_untrained;
            r["sweep"] = to_json(sw);
            write_text((fs::path(o.out_dir) / (prefix + "sweep.csv")).string(), sweep_csv(sw));
        }
        if (o.montage && o.sweep && !o.targets.empty()) {
            std::vector<EvalSample> first(samples.begin(), samples.begin() + 1);
            std::vector<Tensor> tiles;
            for (const auto& t : o.targets) {
                for (double l : o.levels) {
                    tiles.push_back(gen(first, sweep_params(t, l), o.seed).front());
                }
            }
            const std::string mpath = (fs::path(o.out_dir) / (prefix + "sweep_montage.png")).string();
            ensure_parent(mpath);
            save_png(mpath, montage(tiles, o.levels.size()));
            r["montage"] = mpath;
        }
        return r;
    };

    json report{{"data", o.data},
                {"split", o.split},
                {"samples", samples.size()},
                {"seed", o.seed},
                {"extractor_seed", fe.seed()},
                {"ablation", o.ablation},
                {"targets", o.targets}};
    if (o.model == "echo") {
        report["model"] = "echo";
        json r = run_one(echo_generator(), nullptr, false, "");
        report.update(r);
    } else if (o.ablation == "none") {
        const EvalModel& m = models.front();
        report["model"] = m.path;
        report["untrained"] = untrained(m);
        report["parameters"] = describe_model(*m.model)["generator"];
        json r = run_one(model_generator(*m.model), &m.model->config(), untrained(m), "");
        report.update(r);
    } else {
        std::vector<json> results;
        json cols = json::array();
        for (const auto& m : models) {
            cols.push_back(m.label);
            json r = run_one(model_generator(*m.model), &m.model->config(), untrained(m), m.label + "_");
            r["checkpoint"] = m.path;
            r["untrained"] = untrained(m);
            results.push_back(std::move(r));
        }
        report["columns"] = cols;
        report["results"] = model_columns(models, results);
        write_text((fs::path(o.out_dir) / "ablation.csv").string(),
                   ablation_csv(models, results, o.targets, o.sweep && !o.targets.empty()));
    }
    write_text((fs::path(o.out_dir) / "report.json").string(), report.dump(2) + "\n");
    return report;
}

} // namespace spheregen
