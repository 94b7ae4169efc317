/* C interface to the lcflow library. Objects are opaque handles created by
 * the library and released with the matching *_destroy function. Every
 * fallible call returns an lcf_status; on failure lcf_last_error() holds a
 * message for the calling thread. */
#ifndef LCFLOW_LCFLOW_H
#define LCFLOW_LCFLOW_H

#include <stddef.h>
#include <stdint.h>

#if defined(LCF_BUILDING_LIBRARY)
#define LCF_API __attribute__((visibility("default")))
#else
#define LCF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum lcf_status {
  LCF_OK = 0,
  LCF_ERR_INVALID_ARGUMENT = 1,
  LCF_ERR_SHAPE = 2,
  LCF_ERR_DOMAIN = 3,
  LCF_ERR_IO = 4,
  LCF_ERR_CORRUPT = 5,
  LCF_ERR_DIVERGED = 6,
  LCF_ERR_INTERNAL = 7
} lcf_status;

typedef enum lcf_split { LCF_SPLIT_TRAIN = 0, LCF_SPLIT_VALID = 1 } lcf_split;

typedef struct lcf_config lcf_config;
typedef struct lcf_dataset lcf_dataset;
typedef struct lcf_model lcf_model;
typedef struct lcf_maps lcf_maps;
typedef struct lcf_plan lcf_plan;
typedef struct lcf_metrics lcf_metrics;
typedef struct lcf_ablation lcf_ablation;

LCF_API const char* lcf_version(void);
LCF_API const char* lcf_status_string(lcf_status status);
/* Message of the last failed call on this thread; empty after success. */
LCF_API const char* lcf_last_error(void);

/* Training configuration (key=value text, see configs/). */
LCF_API lcf_status lcf_config_create(lcf_config** out);
LCF_API lcf_status lcf_config_load(const char* path, lcf_config** out);
LCF_API lcf_status lcf_config_set(lcf_config* config, const char* key, const char* value);
/* Writes the value of `key` into buf (NUL-terminated, truncated to len). */
LCF_API lcf_status lcf_config_get(const lcf_config* config, const char* key, char* buf, size_t len);
LCF_API lcf_status lcf_config_save(const lcf_config* config, const char* path);
LCF_API void lcf_config_destroy(lcf_config* config);

/* Datasets of n images side x side x channels with pixels in [0, 256). */
LCF_API lcf_status lcf_dataset_generate(size_t n, size_t side, size_t channels, uint64_t seed,
                                        double structure, double valid_fraction, lcf_dataset** out);
LCF_API lcf_status lcf_dataset_load(const char* path, lcf_dataset** out);
LCF_API lcf_status lcf_dataset_save(const lcf_dataset* data, const char* path);
LCF_API lcf_status lcf_dataset_info(const lcf_dataset* data, size_t* n, size_t* n_train, size_t* side,
                                    size_t* channels);
/* Copies image `index` (side*side*channels values, row-major, channel fastest). */
LCF_API lcf_status lcf_dataset_image(const lcf_dataset* data, size_t index, double* out, size_t len);
/* Writes the first `count` images as a PGM/PPM grid. */
LCF_API lcf_status lcf_dataset_write_grid(const lcf_dataset* data, size_t count, const char* path);
LCF_API void lcf_dataset_destroy(lcf_dataset* data);

/* Models. */
LCF_API lcf_status lcf_model_load(const char* path, lcf_model** out);
LCF_API lcf_status lcf_model_save(const lcf_model* model, const char* path);
LCF_API lcf_status lcf_model_info(const lcf_model* model, size_t* input_dims, size_t* layers,
                                  size_t* factor_layers, size_t* parameters);
LCF_API void lcf_model_destroy(lcf_model* model);

/* Per-scale log-det maps of a pretrained model. */
LCF_API lcf_status lcf_maps_compute(const lcf_model* pretrained, const lcf_config* config,
                                    const lcf_dataset* data, lcf_maps** out);
LCF_API lcf_status lcf_maps_load(const char* path, lcf_maps** out);
LCF_API lcf_status lcf_maps_save(const lcf_maps* maps, const char* path);
LCF_API lcf_status lcf_maps_count(const lcf_maps* maps, size_t* count);
LCF_API void lcf_maps_destroy(lcf_maps* maps);

/* Factorization plans. `strategy` is lcma, static, random or reverse (or
 * the long tags static-realnvp, reverse-lcma). `maps` may be NULL for static
 * and random. */
LCF_API lcf_status lcf_plan_derive(const char* strategy, size_t side, size_t channels, size_t scales,
                                   uint64_t seed, const lcf_maps* maps, lcf_plan** out);
LCF_API lcf_status lcf_plan_load(const char* path, lcf_plan** out);
LCF_API lcf_status lcf_plan_save(const lcf_plan* plan, const char* path);
/* Plan text; `needed` receives the size including the terminator. */
LCF_API lcf_status lcf_plan_format(const lcf_plan* plan, char* buf, size_t len, size_t* needed);
LCF_API void lcf_plan_destroy(lcf_plan* plan);

/* Training. Outputs may be NULL when not wanted. */
LCF_API lcf_status lcf_pretrain(const lcf_config* config, const lcf_dataset* data, lcf_model** model,
                                lcf_maps** maps, lcf_metrics** metrics);
LCF_API lcf_status lcf_train(const lcf_config* config, const lcf_dataset* data, const lcf_plan* plan,
                             lcf_model** model, lcf_metrics** metrics);
LCF_API lcf_status lcf_metrics_epochs(const lcf_metrics* metrics, size_t* count);
LCF_API lcf_status lcf_metrics_epoch(const lcf_metrics* metrics, size_t index, double* train_bpd,
                                     double* valid_bpd, double* seconds);
LCF_API lcf_status lcf_metrics_save_csv(const lcf_metrics* metrics, const char* path, int timing);
LCF_API void lcf_metrics_destroy(lcf_metrics* metrics);

/* Evaluation, sampling, interpolation. */
LCF_API lcf_status lcf_evaluate_bpd(const lcf_model* model, const lcf_dataset* data, lcf_split split,
                                    double alpha, double* out_bpd);
/* n samples in pixel space, n*D values. */
LCF_API lcf_status lcf_sample(const lcf_model* model, size_t n, uint64_t seed, double alpha, double* out,
                              size_t len);
LCF_API lcf_status lcf_sample_grid(const lcf_model* model, size_t n, uint64_t seed, double alpha,
                                   const char* path);
/* steps frames of D values each between images a and b (D values each). */
LCF_API lcf_status lcf_interpolate(const lcf_model* model, const double* a, const double* b, size_t dims,
                                   size_t steps, double alpha, double* out, size_t len);
LCF_API lcf_status lcf_interpolate_grid(const lcf_model* model, const lcf_dataset* data, size_t index_a,
                                        size_t index_b, size_t steps, double alpha, const char* path);

/* Ablation over all four strategies. `out_dir` may be NULL to skip files. */
LCF_API lcf_status lcf_ablate(const lcf_config* config, const lcf_dataset* data, size_t seeds, size_t jobs,
                              const char* out_dir, int timing, lcf_ablation** out);
LCF_API lcf_status lcf_ablation_rows(const lcf_ablation* ablation, size_t* count);
LCF_API lcf_status lcf_ablation_row(const lcf_ablation* ablation, size_t index, const char** strategy,
                                    uint64_t* seed, double* final_valid_bpd);
/* Summary rows in the order random, reverse-lcma, static-realnvp, lcma. */
LCF_API lcf_status lcf_ablation_summary(const lcf_ablation* ablation, size_t index, const char** strategy,
                                        double* mean, double* stddev);
LCF_API void lcf_ablation_destroy(lcf_ablation* ablation);

#ifdef __cplusplus
}
#endif

#endif
