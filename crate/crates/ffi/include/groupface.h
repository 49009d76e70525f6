#ifndef GROUPFACE_H
#define GROUPFACE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call.
 */
typedef enum GfStatus {
  GF_STATUS_OK = 0,
  GF_STATUS_NULL_POINTER = 1,
  GF_STATUS_INVALID_UTF8 = 2,
  GF_STATUS_INVALID_CONFIG = 3,
  GF_STATUS_INVALID_ARGUMENT = 4,
  GF_STATUS_MALFORMED = 5,
  GF_STATUS_IO = 6,
  GF_STATUS_NON_FINITE = 7,
  GF_STATUS_DIVERGED = 8,
  GF_STATUS_BUFFER_TOO_SMALL = 9,
  GF_STATUS_PANIC = 10,
  GF_STATUS_INTERNAL = 11,
} GfStatus;

/**
 * Run configuration.
 */
typedef struct GfConfig GfConfig;

/**
 * Generated train and test splits.
 */
typedef struct GfDataset GfDataset;

/**
 * Trained parameters together with the config that built them.
 */
typedef struct GfModel GfModel;

/**
 * Full training report.
 */
typedef struct GfReport GfReport;

/**
 * Flat evaluation summary. Empty groups have `group_mae` NaN.
 */
typedef struct GfMetrics {
  double mae;
  double sigma;
  double aar;
  double group_mae[GROUP_COUNT];
  size_t group_counts[GROUP_COUNT];
} GfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *gf_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *gf_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void gf_string_free(char *s);

/**
 * `max(0, 7 - mae) + max(0, 3 - sigma)`.
 */
double gf_aar_score(double mae, double sigma);

/**
 * # Safety
 * `out` must be valid for one write.
 */
enum GfStatus gf_group_of_age(double age, size_t *out);

/**
 * Default configuration. Never null.
 */
struct GfConfig *gf_config_default(void);

/**
 * Parses and validates a JSON configuration; missing fields take defaults.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` valid for one write.
 */
enum GfStatus gf_config_from_json(const char *json, struct GfConfig **out);

/**
 * # Safety
 * `config` must come from this library; `out` valid for one write.
 */
enum GfStatus gf_config_to_json(const struct GfConfig *config, char **out);

/**
 * # Safety
 * `config` must come from this library.
 */
enum GfStatus gf_config_set_seed(struct GfConfig *config, uint64_t seed);

/**
 * # Safety
 * `config` must be null or come from this library, and not be used after.
 */
void gf_config_free(struct GfConfig *config);

/**
 * # Safety
 * `config` must come from this library; `out` valid for one write.
 */
enum GfStatus gf_dataset_generate(const struct GfConfig *config, struct GfDataset **out);

/**
 * Writes the four training-split group counts to `counts`.
 *
 * # Safety
 * `dataset` must come from this library; `counts` valid for 4 writes.
 */
enum GfStatus gf_dataset_group_counts(const struct GfDataset *dataset, size_t *counts);

/**
 * Hex SHA-256 of the serialized dataset.
 *
 * # Safety
 * `dataset` must come from this library; `out` valid for one write.
 */
enum GfStatus gf_dataset_digest(const struct GfDataset *dataset, char **out);

/**
 * # Safety
 * `dataset` must be null or come from this library, and not be used after.
 */
void gf_dataset_free(struct GfDataset *dataset);

/**
 * Trains on `dataset`, which must have been generated with the same data
 * settings. Either output may be null if unwanted.
 *
 * # Safety
 * Inputs must come from this library; non-null outputs valid for one write.
 */
enum GfStatus gf_train(const struct GfConfig *config,
                       const struct GfDataset *dataset,
                       struct GfModel **model_out,
                       struct GfReport **report_out);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` valid for one write.
 */
enum GfStatus gf_model_from_checkpoint(const char *json, struct GfModel **out);

/**
 * # Safety
 * `model` must come from this library; `out` valid for one write.
 */
enum GfStatus gf_model_to_checkpoint(const struct GfModel *model, char **out);

/**
 * Predicted ages for the test split. With `out` null only `written` is
 * set, to the required length.
 *
 * # Safety
 * Inputs must come from this library; `out` valid for `capacity` writes;
 * `written` valid for one write.
 */
enum GfStatus gf_model_predict(const struct GfModel *model,
                               const struct GfDataset *dataset,
                               double *out,
                               size_t capacity,
                               size_t *written);

/**
 * Metrics on the test split.
 *
 * # Safety
 * Inputs must come from this library; `out` valid for one write.
 */
enum GfStatus gf_model_evaluate(const struct GfModel *model,
                                const struct GfDataset *dataset,
                                struct GfMetrics *out);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used after.
 */
void gf_model_free(struct GfModel *model);

/**
 * # Safety
 * `report` must come from this library; `out` valid for one write.
 */
enum GfStatus gf_report_metrics(const struct GfReport *report, struct GfMetrics *out);

/**
 * # Safety
 * `report` must come from this library; `out` valid for one write.
 */
enum GfStatus gf_report_to_json(const struct GfReport *report, char **out);

/**
 * # Safety
 * `report` must be null or come from this library, and not be used after.
 */
void gf_report_free(struct GfReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROUPFACE_H */
