#ifndef RSALIGN_H
#define RSALIGN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Which caption score [`rsalign_caption_score`] computes.
typedef enum RsMetric {
  RS_METRIC_BLEU1 = 0,
  RS_METRIC_BLEU2 = 1,
  RS_METRIC_BLEU3 = 2,
  RS_METRIC_BLEU4 = 3,
  RS_METRIC_METEOR = 4,
  RS_METRIC_ROUGE_L = 5,
} RsMetric;

typedef enum RsStatus {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_POINTER = 1,
  RS_STATUS_INVALID_ARGUMENT = 2,
  RS_STATUS_OUT_OF_BOUNDS = 3,
  RS_STATUS_SHAPE = 4,
  RS_STATUS_DEGENERATE_VECTOR = 5,
  RS_STATUS_NON_FINITE = 6,
  RS_STATUS_PARSE = 7,
  RS_STATUS_FORMAT = 8,
  RS_STATUS_IO = 9,
  RS_STATUS_BUFFER_TOO_SMALL = 10,
  RS_STATUS_PANIC = 11,
} RsStatus;

// Opaque feature grid.
typedef struct RsGrid RsGrid;

// Opaque toy model parameters.
typedef struct RsModel RsModel;

typedef struct RsDrisConfig {
  double tau_saliency;
  double sigma;
  size_t k;
  size_t n;
  size_t roi_height;
  size_t roi_width;
} RsDrisConfig;

// Half-open box `[row0, row1) x [col0, col1)`.
typedef struct RsRoi {
  size_t row0;
  size_t col0;
  size_t row1;
  size_t col1;
} RsRoi;

typedef struct RsCost {
  uint64_t full_res_cell_ops;
  uint64_t coarse_cell_ops;
  uint64_t fine_cell_ops;
  double savings_ratio;
  bool exact_division;
} RsCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rsalign_version(void);

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `cap`). Returns the full message length plus one,
// so a return value greater than `cap` means truncation.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t rsalign_last_error(char *buf, size_t cap);

// Creates a grid from `h*w*c` row-major, channel-minor values.
//
// # Safety
// `data` must point to `len` readable doubles; `out_grid` must be writable.
enum RsStatus rsalign_grid_new(size_t height,
                               size_t width,
                               size_t channels,
                               const double *data,
                               size_t len,
                               struct RsGrid **out_grid);

// Reads an FGRD file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_grid` must be writable.
enum RsStatus rsalign_grid_read_fgrd(const char *path, struct RsGrid **out_grid);

// Writes `grid` as FGRD (values narrowed to f32).
//
// # Safety
// `grid` must be a live handle and `path` a NUL-terminated string.
enum RsStatus rsalign_grid_write_fgrd(const struct RsGrid *grid, const char *path);

// # Safety
// `grid` must be a live handle; the out pointers must be writable.
enum RsStatus rsalign_grid_dims(const struct RsGrid *grid,
                                size_t *height,
                                size_t *width,
                                size_t *channels);

// Copies the grid values into `buf`, which must hold `h*w*c` doubles.
//
// # Safety
// `grid` must be a live handle; `buf` must point to `cap` writable doubles.
enum RsStatus rsalign_grid_copy_data(const struct RsGrid *grid, double *buf, size_t cap);

// # Safety
// `grid` must be null or a handle not yet freed.
void rsalign_grid_free(struct RsGrid *grid);

// Writes the default DRIS configuration into `cfg`.
//
// # Safety
// `cfg` must be writable.
enum RsStatus rsalign_dris_config_default(struct RsDrisConfig *cfg);

// Runs the coarse-to-fine pass with channel-mean saliency. ROIs (coarse
// cells) are written to `rois` (capacity `cap`); `count` receives the
// number selected, which may exceed `cap` (then `BufferTooSmall`).
//
// # Safety
// `grid` must be a live handle, `cfg` readable, `rois` null or `cap`
// writable entries, `count` and `cost` writable (`cost` may be null).
enum RsStatus rsalign_dris_run(const struct RsGrid *grid,
                               const struct RsDrisConfig *cfg,
                               struct RsRoi *rois,
                               size_t cap,
                               size_t *count,
                               struct RsCost *cost);

// Cell-operation counts for an `height x width` image and the given ROIs.
//
// # Safety
// `cfg` readable, `rois` `count` readable entries, `cost` writable.
enum RsStatus rsalign_dris_cost(size_t height,
                                size_t width,
                                const struct RsDrisConfig *cfg,
                                const struct RsRoi *rois,
                                size_t count,
                                struct RsCost *cost);

// Intersection over union of two boxes.
//
// # Safety
// `a`, `b` readable; `value` writable.
enum RsStatus rsalign_iou(const struct RsRoi *a, const struct RsRoi *b, double *value);

// Global cosine loss `1 - cos(g, t)` and its gradients.
//
// # Safety
// `g`, `t` must point to `dim` doubles; `value` writable; `grad_g` and
// `grad_t` null or `dim` writable doubles.
enum RsStatus rsalign_global_loss(const double *g,
                                  const double *t,
                                  size_t dim,
                                  double *value,
                                  double *grad_g,
                                  double *grad_t);

// Region InfoNCE over `k` visual rows and `m` phrase rows of width `dim`
// with positive phrase indices `positives[k]`.
//
// # Safety
// Input arrays must hold the stated counts; `value` writable; gradient
// buffers null or `k*dim` / `m*dim` writable doubles.
enum RsStatus rsalign_region_nce_loss(const double *visual,
                                      size_t k,
                                      const double *phrases,
                                      size_t m,
                                      size_t dim,
                                      const size_t *positives,
                                      double tau,
                                      double *value,
                                      double *grad_visual,
                                      double *grad_phrases);

// Scores `candidate` against a single `reference`.
//
// # Safety
// Both strings NUL-terminated; `value` writable.
enum RsStatus rsalign_caption_score(enum RsMetric metric,
                                    const char *candidate,
                                    const char *reference,
                                    double *value);

// Learning rate at `step` for linear warmup then linear decay.
//
// # Safety
// `lr` must be writable.
enum RsStatus rsalign_lr_at(size_t step,
                            double peak_lr,
                            size_t warmup_steps,
                            size_t total_steps,
                            double *lr);

// Freshly initialized toy-size model.
//
// # Safety
// `out_model` must be writable.
enum RsStatus rsalign_model_init_toy(uint64_t seed, struct RsModel **out_model);

// Loads a TVLM checkpoint.
//
// # Safety
// `path` NUL-terminated; `out_model` writable.
enum RsStatus rsalign_model_load(const char *path, struct RsModel **out_model);

// Saves a TVLM checkpoint.
//
// # Safety
// `model` a live handle; `path` NUL-terminated.
enum RsStatus rsalign_model_save(const struct RsModel *model, const char *path);

// FNV-1a checksums of the frozen and trainable parameter groups.
//
// # Safety
// `model` a live handle; out pointers writable.
enum RsStatus rsalign_model_checksums(const struct RsModel *model,
                                      uint64_t *frozen,
                                      uint64_t *trainable);

// # Safety
// `model` must be null or a handle not yet freed.
void rsalign_model_free(struct RsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RSALIGN_H */
