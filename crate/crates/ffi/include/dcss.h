#ifndef DCSS_H
#define DCSS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DCSS_STATUS_OK = 0,
  DCSS_STATUS_NULL_POINTER = 1,
  DCSS_STATUS_INVALID_UTF8 = 2,
  DCSS_STATUS_CONFIG = 3,
  DCSS_STATUS_IO = 4,
  DCSS_STATUS_FORMAT = 5,
  DCSS_STATUS_SHAPE = 6,
  DCSS_STATUS_STATE = 7,
  DCSS_STATUS_NUMERIC = 8,
  DCSS_STATUS_INTERNAL = 9,
  DCSS_STATUS_PANIC = 10,
} DcssStatus;

/*
 Experiment configuration.
 */
typedef struct DcssConfig DcssConfig;

/*
 Network loaded from a checkpoint, in its stored precision.
 */
typedef struct DcssModel DcssModel;

/*
 Result of a full pipeline run.
 */
typedef struct DcssReport DcssReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call into the library on the same thread; do not free.
 */
const char *dcss_last_error_message(void);

/*
 Frees a string returned by this library.
 */
void dcss_string_free(char *s);

/*
 Library version, static storage.
 */
const char *dcss_version(void);

/*
 FLOPs of one convolution: `kh * kw * in_channels * out_h * out_w * out_channels`.
 */
uint64_t dcss_conv_flops(uintptr_t kh,
                         uintptr_t kw,
                         uintptr_t in_channels,
                         uintptr_t out_h,
                         uintptr_t out_w,
                         uintptr_t out_channels);

/*
 Configuration with every key at its default.
 */
DcssStatus dcss_config_default(DcssConfig **out);

/*
 Parses a TOML configuration; unknown keys are errors.
 */
DcssStatus dcss_config_from_toml(const char *text, DcssConfig **out);

/*
 Reads a TOML configuration file.
 */
DcssStatus dcss_config_load(const char *path, DcssConfig **out);

DcssStatus dcss_config_set_seed(DcssConfig *cfg, uint64_t seed);

DcssStatus dcss_config_set_lambda(DcssConfig *cfg, double lambda);

DcssStatus dcss_config_set_out_dir(DcssConfig *cfg, const char *dir);

/*
 Hex SHA-256 of the configuration (output directory excluded). Free with
 `dcss_string_free`.
 */
DcssStatus dcss_config_hash(const DcssConfig *cfg, char **out);

void dcss_config_free(DcssConfig *cfg);

/*
 Runs warm-up, search, extraction, fine-tuning and the baselines, writing
 every artifact to the configured output directory.
 */
DcssStatus dcss_run_pipeline(const DcssConfig *cfg, bool resume, DcssReport **out);

double dcss_report_predicted_flops(const DcssReport *report);

uint64_t dcss_report_true_flops(const DcssReport *report);

double dcss_report_prune_ratio(const DcssReport *report);

/*
 Test accuracy of the slim model in percent; NaN for regression.
 */
double dcss_report_slim_accuracy(const DcssReport *report);

/*
 The report as JSON. Free with `dcss_string_free`.
 */
DcssStatus dcss_report_to_json(const DcssReport *report, char **out);

void dcss_report_free(DcssReport *report);

/*
 Loads a checkpoint written by the pipeline (either precision).
 */
DcssStatus dcss_model_load(const char *path, DcssModel **out);

/*
 Per-sample FLOPs of the network at its current widths.
 */
uint64_t dcss_model_true_flops(const DcssModel *model);

bool dcss_model_is_gated(const DcssModel *model);

/*
 Slim plan of a searched network at temperature `tau`, as JSON. Free with
 `dcss_string_free`.
 */
DcssStatus dcss_model_derive_plan(const DcssModel *model, double tau, char **out);

void dcss_model_free(DcssModel *model);

/*
 Runs the oracle-equivalence and gradient suites. Writes the number of
 suites and of passing suites; returns `DCSS_STATUS_OK` even when some fail.
 */
DcssStatus dcss_verify(uint64_t seed, uintptr_t instances, uintptr_t *passed, uintptr_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCSS_H */
