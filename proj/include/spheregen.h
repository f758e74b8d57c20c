#ifndef SPHEREGEN_H
#define SPHEREGEN_H

/* C interface to the spheregen library. Every function returns an sg_status;
 * on failure sg_last_error() describes the problem (per thread). Strings
 * returned through char** are owned by the caller and released with
 * sg_string_free. Structured results are JSON text. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SG_API __declspec(dllexport)
#else
#define SG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum sg_status {
    SG_OK = 0,
    SG_ERR_INTERNAL = 1,
    SG_ERR_USAGE = 2,
    SG_ERR_DATA = 3,
    SG_ERR_NUMERIC = 4
} sg_status;

#define SG_NUM_SYMMETRIES 5

typedef struct sg_config sg_config;
typedef struct sg_model sg_model;

typedef struct sg_view {
    double lon_deg;
    double lat_deg;
    double fov_deg;
} sg_view;

typedef void (*sg_progress_fn)(const char* metrics_json, void* user);

SG_API const char* sg_version(void);
SG_API const char* sg_last_error(void);
SG_API void sg_string_free(char* s);

/* Symmetry registry names in s-vector order, as a JSON array. */
SG_API sg_status sg_registry(char** json_out);
/* One of 90rot, 180rot, plane0, plane90, asym. */
SG_API sg_status sg_symmetry_preset(const char* name, double s_out[SG_NUM_SYMMETRIES]);

/* Run configuration: defaults, then an optional JSON file, then key=value
 * overrides such as "lr" or "model.kappa". */
SG_API sg_status sg_config_new(sg_config** out);
SG_API void sg_config_free(sg_config* cfg);
SG_API sg_status sg_config_load(sg_config* cfg, const char* path);
SG_API sg_status sg_config_set(sg_config* cfg, const char* key, const char* value);
SG_API sg_status sg_config_validate(const sg_config* cfg);
SG_API sg_status sg_config_to_json(const sg_config* cfg, char** json_out);

typedef struct sg_dataset_args {
    const char* out_dir;
    size_t n;
    const char* mix; /* "uniform" or "label=weight,..." */
    uint64_t seed;
    size_t height;
    int force;
} sg_dataset_args;
SG_API sg_status sg_make_dataset(const sg_dataset_args* args, char** summary_json);

typedef struct sg_train_args {
    const char* data_dir;
    const char* split;      /* NULL = "train" */
    const char* checkpoint; /* output */
    const char* metrics;    /* JSON-lines; NULL = none */
    const char* resume;     /* NULL = fresh start */
    size_t log_every;
} sg_train_args;
SG_API sg_status sg_train(const sg_config* cfg, const sg_train_args* args, sg_progress_fn progress, void* user,
                          char** summary_json);

SG_API sg_status sg_model_load(const char* checkpoint, sg_model** out);
SG_API void sg_model_free(sg_model* model);
/* Configuration and per-network parameter counts. */
SG_API sg_status sg_model_describe(const sg_model* model, char** json_out);
/* Generates a panorama from a square NFOV PNG seen in the given view. */
SG_API sg_status sg_model_generate(const sg_model* model, const char* nfov_png, const sg_view* view,
                                   const double s[SG_NUM_SYMMETRIES], uint64_t seed, const char* out_png,
                                   const char* partial_png);

typedef struct sg_generate_args {
    const char* checkpoint;
    const char* input;       /* square NFOV PNG */
    sg_view view;
    double s[SG_NUM_SYMMETRIES];
    uint64_t seed;
    const char* out;
    const char* partial_out; /* NULL = not written */
} sg_generate_args;
SG_API sg_status sg_generate(const sg_generate_args* args, char** summary_json);

typedef struct sg_crop_args {
    const char* input; /* equirectangular PNG */
    sg_view view;
    size_t size;
    const char* out;
} sg_crop_args;
SG_API sg_status sg_crop_nfov(const sg_crop_args* args, char** summary_json);

typedef struct sg_evaluate_args {
    const char* model;              /* "checkpoint" or "echo" */
    const char* const* checkpoints; /* ablation columns in any order */
    size_t num_checkpoints;
    const char* data_dir;
    const char* split; /* NULL = "test" */
    size_t max_samples;
    uint64_t seed;
    const char* out_dir;
    const char* ablation; /* "none", "loss" or "padding" */
    const char* targets;  /* comma list; NULL = all */
    int has_quality_s;
    double quality_s[SG_NUM_SYMMETRIES];
    const char* extractor; /* NULL = built-in */
    int montage;
    int sweep;
} sg_evaluate_args;
SG_API sg_status sg_evaluate(const sg_evaluate_args* args, char** report_json);

#ifdef __cplusplus
}
#endif

#endif
