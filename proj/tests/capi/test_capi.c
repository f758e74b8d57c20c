/* C-only client of the shared library: status codes, handles and ownership. */

#define _POSIX_C_SOURCE 200809L

#include <spheregen.h>

#include <stdio.h>
#include <stdlib.h>
#include <string.h>

static int failures = 0;
static int checks = 0;

#define CHECK(cond)                                                                 \
    do {                                                                            \
        ++checks;                                                                   \
        if (!(cond)) {                                                              \
            ++failures;                                                             \
            fprintf(stderr, "%s:%d: CHECK(%s) failed; last error: %s\n", __FILE__, \
                    __LINE__, #cond, sg_last_error());                              \
        }                                                                           \
    } while (0)

static char root[256];

static const char* path(const char* name)
{
    static char buf[8][512];
    static int next = 0;
    char* p = buf[next++ % 8];
    snprintf(p, 512, "%s/%s", root, name);
    return p;
}

static int file_exists(const char* p)
{
    FILE* f = fopen(p, "rb");
    if (f) {
        fclose(f);
        return 1;
    }
    return 0;
}

static int progress_calls = 0;
static void on_progress(const char* metrics, void* user)
{
    (void)user;
    if (metrics && strstr(metrics, "\"step\"")) {
        ++progress_calls;
    }
}

static void test_basics(void)
{
    char* json = NULL;
    double s[SG_NUM_SYMMETRIES];

    CHECK(sg_version() != NULL && strlen(sg_version()) > 0);
    CHECK(sg_registry(&json) == SG_OK);
    CHECK(json && strcmp(json, "[\"rot90\",\"rot180\",\"rot270\",\"plane0\",\"plane90\"]") == 0);
    sg_string_free(json);
    json = NULL;

    CHECK(sg_symmetry_preset("180rot", s) == SG_OK);
    CHECK(s[0] == 0.3 && s[1] == 1.0 && s[4] == 0.3);
    CHECK(sg_symmetry_preset("spiral", s) == SG_ERR_USAGE);
    CHECK(strstr(sg_last_error(), "spiral") != NULL);
    CHECK(sg_symmetry_preset(NULL, s) == SG_ERR_USAGE);
    CHECK(sg_registry(NULL) == SG_ERR_USAGE);
    sg_string_free(NULL);
}

static void test_config(void)
{
    sg_config* cfg = NULL;
    char* json = NULL;
    FILE* f;

    CHECK(sg_config_new(&cfg) == SG_OK);
    CHECK(sg_config_set(cfg, "lr", "0.01") == SG_OK);
    CHECK(sg_config_set(cfg, "model.kappa", "2") == SG_OK);
    CHECK(sg_config_set(cfg, "bogus", "1") == SG_ERR_USAGE);
    CHECK(sg_config_set(cfg, "steps", "many") == SG_ERR_USAGE);
    CHECK(sg_config_validate(cfg) == SG_OK);
    CHECK(sg_config_to_json(cfg, &json) == SG_OK);
    CHECK(json && strstr(json, "\"kappa\":2.0") != NULL);
    sg_string_free(json);
    json = NULL;
    CHECK(sg_config_set(cfg, "gamma", "3") == SG_OK);
    CHECK(sg_config_validate(cfg) == SG_ERR_USAGE);
    CHECK(sg_config_load(cfg, path("missing.json")) == SG_ERR_USAGE);
    f = fopen(path("c.json"), "w");
    fputs("{\"model\": {\"preset\": \"tiny\"}, \"train\": {\"steps\": 2, \"batch_size\": 2}}", f);
    fclose(f);
    CHECK(sg_config_load(cfg, path("c.json")) == SG_OK);
    CHECK(sg_config_validate(cfg) == SG_OK);
    sg_config_free(cfg);
    sg_config_free(NULL);
    CHECK(sg_config_new(NULL) == SG_ERR_USAGE);
}

static void test_pipeline(void)
{
    sg_dataset_args d = {0};
    sg_train_args t = {0};
    sg_crop_args c = {0};
    sg_generate_args g = {0};
    sg_evaluate_args e = {0};
    sg_config* cfg = NULL;
    sg_model* model = NULL;
    char* json = NULL;
    char ckpt[512];
    const char* list[1];

    d.out_dir = path("data");
    d.n = 13;
    d.mix = "uniform";
    d.seed = 3;
    d.height = 32;
    CHECK(sg_make_dataset(&d, &json) == SG_OK);
    CHECK(json && strstr(json, "\"total\":13") != NULL);
    sg_string_free(json);
    json = NULL;
    json = NULL;
    CHECK(sg_make_dataset(&d, &json) == SG_ERR_DATA);
    CHECK(json == NULL);
    d.mix = "circle=2";
    d.force = 1;
    CHECK(sg_make_dataset(&d, NULL) == SG_ERR_USAGE);

    sg_config_new(&cfg);
    sg_config_set(cfg, "preset", "tiny");
    sg_config_set(cfg, "steps", "2");
    sg_config_set(cfg, "batch_size", "2");
    snprintf(ckpt, sizeof ckpt, "%s", path("model.sgck"));
    t.data_dir = path("data");
    t.checkpoint = ckpt;
    t.metrics = path("metrics.jsonl");
    t.log_every = 1;
    CHECK(sg_train(cfg, &t, on_progress, NULL, &json) == SG_OK);
    CHECK(json && strstr(json, "\"end_step\":2") != NULL);
    sg_string_free(json);
    json = NULL;
    CHECK(progress_calls == 2);
    CHECK(file_exists(ckpt));
    t.resume = path("absent.sgck");
    CHECK(sg_train(cfg, &t, NULL, NULL, NULL) == SG_ERR_DATA);
    t.resume = NULL;
    sg_config_set(cfg, "lr", "nan");
    CHECK(sg_train(cfg, &t, NULL, NULL, NULL) == SG_ERR_USAGE);
    sg_config_free(cfg);

    c.input = path("data/images/000000.png");
    c.view.lon_deg = 20;
    c.view.lat_deg = 0;
    c.view.fov_deg = 90;
    c.size = 32;
    c.out = path("crop.png");
    CHECK(sg_crop_nfov(&c, NULL) == SG_OK);
    c.view.fov_deg = 170;
    CHECK(sg_crop_nfov(&c, NULL) == SG_ERR_USAGE);

    g.checkpoint = ckpt;
    g.input = path("crop.png");
    g.view.lon_deg = 20;
    g.view.fov_deg = 90;
    sg_symmetry_preset("plane0", g.s);
    g.seed = 1;
    g.out = path("gen.png");
    CHECK(sg_generate(&g, &json) == SG_OK);
    sg_string_free(json);
    json = NULL;
    CHECK(file_exists(path("gen.png")));
    g.checkpoint = path("absent.sgck");
    CHECK(sg_generate(&g, NULL) == SG_ERR_DATA);

    CHECK(sg_model_load(ckpt, &model) == SG_OK);
    CHECK(sg_model_describe(model, &json) == SG_OK);
    CHECK(json && strstr(json, "\"generator\"") != NULL);
    sg_string_free(json);
    json = NULL;
    CHECK(sg_model_generate(model, path("crop.png"), &g.view, g.s, 1, path("gen2.png"), NULL) == SG_OK);
    g.s[2] = -0.5;
    CHECK(sg_model_generate(model, path("crop.png"), &g.view, g.s, 1, path("gen3.png"), NULL) == SG_ERR_USAGE);
    CHECK(sg_model_generate(NULL, path("crop.png"), &g.view, g.s, 1, path("gen3.png"), NULL) == SG_ERR_USAGE);
    sg_model_free(model);
    sg_model_free(NULL);
    model = NULL;
    CHECK(sg_model_load(path("absent.sgck"), &model) == SG_ERR_DATA);
    CHECK(model == NULL);

    e.model = "echo";
    e.data_dir = path("data");
    e.max_samples = 2;
    e.out_dir = path("eval");
    e.ablation = "none";
    e.targets = "rot180,plane0";
    e.sweep = 1;
    CHECK(sg_evaluate(&e, &json) == SG_OK);
    CHECK(json && strstr(json, "\"fid\":") != NULL);
    CHECK(json && strtod(strstr(json, "\"fid\":") + 6, NULL) < 1e-9);
    sg_string_free(json);
    json = NULL;
    e.model = "checkpoint";
    list[0] = ckpt;
    e.checkpoints = list;
    e.num_checkpoints = 1;
    e.has_quality_s = 1;
    sg_symmetry_preset("asym", e.quality_s);
    CHECK(sg_evaluate(&e, NULL) == SG_OK);
    e.targets = "rot45";
    CHECK(sg_evaluate(&e, NULL) == SG_ERR_USAGE);
    e.targets = NULL;
    e.ablation = "loss";
    CHECK(sg_evaluate(&e, NULL) == SG_ERR_USAGE);
    CHECK(sg_evaluate(NULL, NULL) == SG_ERR_USAGE);
}

int main(void)
{
    const char* tmp = getenv("TMPDIR");
    snprintf(root, sizeof root, "%s/spheregen_capi_XXXXXX", tmp && *tmp ? tmp : "/tmp");
    if (!mkdtemp(root)) {
        perror("mkdtemp");
        return 1;
    }
    test_basics();
    test_config();
    test_pipeline();
    printf("capi: %d checks, %d failed\n", checks, failures);
    if (failures == 0) {
        char cmd[300];
        snprintf(cmd, sizeof cmd, "rm -rf '%s'", root);
        if (system(cmd) != 0) {
            fprintf(stderr, "could not remove %s\n", root);
        }
        return 0;
    }
    fprintf(stderr, "workspace kept at %s\n", root);
    return 1;
}
