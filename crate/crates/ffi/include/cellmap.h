#ifndef CELLMAP_H
#define CELLMAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of values written by [`cm_features`].
 */
#define CM_N_FEATURES 12

/**
 * Number of growth-pattern classes scored by a classifier.
 */
#define CM_N_CLASSES 6

typedef enum CmStatus {
  CM_STATUS_OK = 0,
  CM_STATUS_NULL_POINTER = 1,
  CM_STATUS_INVALID_ARGUMENT = 2,
  CM_STATUS_PARSE = 3,
  CM_STATUS_DATA = 4,
  CM_STATUS_IO = 5,
  CM_STATUS_BUFFER_TOO_SMALL = 6,
  CM_STATUS_PANIC = 7,
} CmStatus;

/**
 * Nucleus classes as reported through the ABI.
 */
typedef enum CmCellClass {
  CM_CELL_CLASS_NEOPLASTIC = 0,
  CM_CELL_CLASS_INFLAMMATORY = 1,
  CM_CELL_CLASS_CONNECTIVE = 2,
  CM_CELL_CLASS_DEAD = 3,
  CM_CELL_CLASS_NON_NEOPLASTIC_EPITHELIAL = 4,
  CM_CELL_CLASS_UNLABELED = 5,
} CmCellClass;

/**
 * Three-plane binary cell map.
 */
typedef struct CmCellMap CmCellMap;

/**
 * Trained feature standardizer plus one-vs-rest linear SVM.
 */
typedef struct CmClassifier CmClassifier;

/**
 * Parsed nuclei of one slide.
 */
typedef struct CmNuclei CmNuclei;

/**
 * One nucleus. `cell_class` holds a [`CmCellClass`] value; `type_prob` is
 * NaN when the detector gave none.
 */
typedef struct CmNucleus {
  double x;
  double y;
  int32_t cell_class;
  double type_prob;
} CmNucleus;

/**
 * Byte buffer owned by the library; release with [`cm_bytes_free`].
 */
typedef struct CmBytes {
  uint8_t *data;
  size_t len;
} CmBytes;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL if there was none.
 */
const char *cm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cm_version(void);

/**
 * Parses detector JSON using the default code table. With `skip_invalid`
 * nonzero, bad entries are dropped and counted instead of failing.
 *
 * # Safety
 * `json` must be valid for `len` bytes; `out` must be writable.
 */
enum CmStatus cm_nuclei_parse(const uint8_t *json,
                              size_t len,
                              int32_t skip_invalid,
                              struct CmNuclei **out);

/**
 * Builds a nuclei handle from caller-provided records.
 *
 * # Safety
 * `records` must be valid for `n` elements; `out` must be writable.
 */
enum CmStatus cm_nuclei_from_records(const struct CmNucleus *records,
                                     size_t n,
                                     struct CmNuclei **out);

/**
 * Number of records held; 0 for NULL.
 *
 * # Safety
 * `nuclei` must be NULL or a live handle.
 */
size_t cm_nuclei_len(const struct CmNuclei *nuclei);

/**
 * Entries dropped under `skip_invalid`; 0 for NULL.
 *
 * # Safety
 * `nuclei` must be NULL or a live handle.
 */
size_t cm_nuclei_rejected(const struct CmNuclei *nuclei);

/**
 * Copies record `index` into `out`.
 *
 * # Safety
 * `nuclei` must be a live handle; `out` must be writable.
 */
enum CmStatus cm_nuclei_get(const struct CmNuclei *nuclei, size_t index, struct CmNucleus *out);

/**
 * # Safety
 * `nuclei` must be NULL or a handle not yet freed.
 */
void cm_nuclei_free(struct CmNuclei *nuclei);

/**
 * Renders the neoplastic, connective and non-neoplastic nuclei of a slide
 * into a cell map. Other classes are ignored.
 *
 * # Safety
 * `nuclei` must be a live handle; `out` must be writable.
 */
enum CmStatus cm_cell_map_build(const struct CmNuclei *nuclei,
                                uint64_t width_px,
                                uint64_t height_px,
                                double detection_mag,
                                double map_mag,
                                uint32_t disk_radius,
                                struct CmCellMap **out);

/**
 * # Safety
 * `map` must be NULL or a live handle.
 */
size_t cm_cell_map_width(const struct CmCellMap *map);

/**
 * # Safety
 * `map` must be NULL or a live handle.
 */
size_t cm_cell_map_height(const struct CmCellMap *map);

/**
 * Copies plane `plane` (0 neoplastic, 1 connective, 2 non-neoplastic) as
 * row-major 0/1 bytes. `len` must be at least width × height.
 *
 * # Safety
 * `map` must be a live handle; `buf` must be writable for `len` bytes.
 */
enum CmStatus cm_cell_map_copy_plane(const struct CmCellMap *map,
                                     uint32_t plane,
                                     uint8_t *buf,
                                     size_t len);

/**
 * Encodes the map as an 8-bit RGB PNG (R connective, G neoplastic,
 * B non-neoplastic).
 *
 * # Safety
 * `map` must be a live handle; `out` must be writable.
 */
enum CmStatus cm_cell_map_encode_png(const struct CmCellMap *map, struct CmBytes *out);

/**
 * # Safety
 * `map` must be NULL or a handle not yet freed.
 */
void cm_cell_map_free(struct CmCellMap *map);

/**
 * # Safety
 * `bytes` must come from this library and not have been freed.
 */
void cm_bytes_free(struct CmBytes bytes);

/**
 * The twelve tile features of `records`, written to `out[0..12]`.
 *
 * # Safety
 * `records` must be valid for `n` elements; `out` for `out_len` writes.
 */
enum CmStatus cm_features(const struct CmNucleus *records, size_t n, double *out, size_t out_len);

/**
 * Loads a classifier saved by `cellmap train-svm`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CmStatus cm_classifier_load(const char *path, struct CmClassifier **out);

/**
 * Parses a classifier from its text form.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum CmStatus cm_classifier_from_text(const char *text, struct CmClassifier **out);

/**
 * Feature dimension expected by the classifier; 0 for NULL.
 *
 * # Safety
 * `clf` must be NULL or a live handle.
 */
size_t cm_classifier_dim(const struct CmClassifier *clf);

/**
 * Scores one feature row. Writes six margins in class-index order to
 * `scores` and, if `predicted` is not NULL, the argmax class index.
 *
 * # Safety
 * `clf` must be a live handle; `x` valid for `n` reads; `scores` for
 * `scores_len` writes; `predicted` NULL or writable.
 */
enum CmStatus cm_classifier_score(const struct CmClassifier *clf,
                                  const double *x,
                                  size_t n,
                                  double *scores,
                                  size_t scores_len,
                                  int32_t *predicted);

/**
 * # Safety
 * `clf` must be NULL or a handle not yet freed.
 */
void cm_classifier_free(struct CmClassifier *clf);

/**
 * Binary AUC by pair counting, ties counting one half.
 *
 * # Safety
 * `pos` and `neg` must be valid for `n_pos` and `n_neg` reads; `out`
 * writable.
 */
enum CmStatus cm_auc_binary(const double *pos,
                            size_t n_pos,
                            const double *neg,
                            size_t n_neg,
                            double *out);

/**
 * Fraction of positions where `truth` and `predicted` (class indices)
 * agree.
 *
 * # Safety
 * `truth` and `predicted` must be valid for `n` reads; `out` writable.
 */
enum CmStatus cm_accuracy(const int32_t *truth, const int32_t *predicted, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CELLMAP_H */
