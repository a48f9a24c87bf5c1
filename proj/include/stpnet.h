/* C interface to the text-prompt-guided segmentation library.
 *
 * Conventions:
 *   - Every fallible call returns a stpnet_status; STPNET_OK is 0.
 *   - On failure, stpnet_last_error() describes the most recent error on the
 *     calling thread.
 *   - Objects returned through `out` parameters are owned by the caller and
 *     released with the matching *_free function. Strings returned through
 *     char** are released with stpnet_string_free.
 *   - `config_text` parameters take the line-oriented "key value" document
 *     described in the README; NULL or "" means all defaults. Later lines
 *     override earlier ones, so callers can append overrides to a file's
 *     contents before passing it in.
 */
#ifndef STPNET_H
#define STPNET_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define STPNET_API __declspec(dllexport)
#else
#define STPNET_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum stpnet_status {
  STPNET_OK = 0,
  STPNET_INVALID_ARGUMENT = 1,
  STPNET_IO = 2,
  STPNET_INTEGRITY = 3,
  STPNET_VERSION = 4,
  STPNET_NUMERIC = 5,
  STPNET_CONTRACT = 6,
  STPNET_INTERNAL = 7
} stpnet_status;

/* Description of the last failure observed on the calling thread; empty
 * string after a success. The pointer stays valid until the next library
 * call on the same thread. */
STPNET_API const char* stpnet_last_error(void);

/* Library version string. */
STPNET_API const char* stpnet_version(void);

STPNET_API void stpnet_string_free(char* s);

/* Opaque handles. */
typedef struct stpnet_model stpnet_model;     /* network + phrase bank */
typedef struct stpnet_dataset stpnet_dataset; /* in-memory sample set */

/* ---- datasets ---------------------------------------------------------- */

/* Synthesizes `count` samples for global indices [first, first+count) from
 * the generator settings in config_text. Per-index seeds derive from
 * master_seed, so disjoint index ranges give disjoint, reproducible sets. */
STPNET_API stpnet_status stpnet_dataset_generate(const char* config_text,
                                                 uint64_t master_seed,
                                                 int64_t first, int64_t count,
                                                 stpnet_dataset** out);

/* Synthesizes one of the three standard splits (0 train, 1 val, 2 test)
 * using the seed and split sizes from config_text. */
STPNET_API stpnet_status stpnet_dataset_split(const char* config_text,
                                              int which, stpnet_dataset** out);

STPNET_API stpnet_status stpnet_dataset_load(const char* path,
                                             stpnet_dataset** out);
STPNET_API stpnet_status stpnet_dataset_save(const stpnet_dataset* ds,
                                             const char* path);

/* Sample count; 0 for NULL. */
STPNET_API int64_t stpnet_dataset_size(const stpnet_dataset* ds);
/* Side length S of the square images; 0 for NULL or empty. */
STPNET_API int64_t stpnet_dataset_image_size(const stpnet_dataset* ds);

/* Copies one sample out. Any destination may be NULL to skip it.
 *   image  - S*S floats in [0,1], row-major
 *   mask   - S*S bytes, 0 or 1
 *   labels - 4 ints: infection, count, left location, right location */
STPNET_API stpnet_status stpnet_dataset_sample(const stpnet_dataset* ds,
                                               int64_t index, float* image,
                                               uint8_t* mask, int32_t* labels);

STPNET_API void stpnet_dataset_free(stpnet_dataset* ds);

/* ---- models ------------------------------------------------------------ */

/* Fresh, untrained model from the architecture settings in config_text. */
STPNET_API stpnet_status stpnet_model_create(const char* config_text,
                                             stpnet_model** out);

/* Checkpoint round trip. Loading rebuilds the exact architecture from the
 * embedded config and restores every parameter; a corrupted file fails with
 * STPNET_INTEGRITY, an unknown format version with STPNET_VERSION. */
STPNET_API stpnet_status stpnet_model_load(const char* path,
                                           stpnet_model** out);
STPNET_API stpnet_status stpnet_model_save(const stpnet_model* m,
                                           const char* path);

STPNET_API int64_t stpnet_model_image_size(const stpnet_model* m);
/* Number of parameter tensors (checkpoint manifest length). */
STPNET_API int64_t stpnet_model_tensor_count(const stpnet_model* m);

STPNET_API void stpnet_model_free(stpnet_model* m);

/* ---- training and evaluation ------------------------------------------- */

/* Trains a fresh model per config_text on `train`, validating on `val`;
 * returns the model restored to its best-validation snapshot. If `log` is
 * non-NULL it receives one structured-text record per epoch. */
STPNET_API stpnet_status stpnet_train(const char* config_text,
                                      const stpnet_dataset* train,
                                      const stpnet_dataset* val,
                                      stpnet_model** out_model, char** log);

typedef struct stpnet_metrics {
  int64_t n;
  double dice, iou, precision, recall; /* means over samples */
  double top1[4]; /* retrieval accuracy per category */
} stpnet_metrics;

/* Eval-mode pass over a whole set. Either output may be NULL. */
STPNET_API stpnet_status stpnet_evaluate(stpnet_model* m,
                                         const stpnet_dataset* ds,
                                         const char* split_name,
                                         stpnet_metrics* out, char** report);

/* ---- single-image operations -------------------------------------------- */

/* One forward pass on an S*S image (S = stpnet_model_image_size).
 *   mask_out    - S*S bytes, 0/1 predicted mask (may be NULL)
 *   scores_out  - 32 doubles: 4 categories x 8 slots of retrieval scores,
 *                 row-major, unused slots zero (may be NULL)
 *   indices_out - 4 ints, retrieved phrase index per category (may be NULL) */
STPNET_API stpnet_status stpnet_predict(stpnet_model* m, const float* image,
                                        uint8_t* mask_out, double* scores_out,
                                        int32_t* indices_out);

/* Phrase text for (category 0..3, index); copies at most buf_len-1 bytes and
 * terminates. */
STPNET_API stpnet_status stpnet_phrase(const stpnet_model* m, int category,
                                       int index, char* buf, size_t buf_len);

/* Writes the four decoder activation maps plus the predicted mask as binary
 * PGM files named {prefix}_up1..4.pgm and {prefix}_mask.pgm. If `files` is
 * non-NULL it receives the newline-joined list of paths written. */
STPNET_API stpnet_status stpnet_export_saliency(stpnet_model* m,
                                                const float* image,
                                                const char* prefix,
                                                char** files);

/* ---- gradient verification ---------------------------------------------- */

/* Runs the finite-difference suite over every block and loss at the reduced
 * image size (64-bit, eps 1e-5, tolerance 1e-4). `corrupt` may name one
 * check whose analytic gradients are deliberately perturbed (negative
 * control); pass NULL or "" for an honest run. all_passed gets 1/0; report,
 * if non-NULL, receives one line per check. */
STPNET_API stpnet_status stpnet_gradcheck(int64_t image_size, int64_t coords,
                                          uint64_t seed, const char* corrupt,
                                          int* all_passed, char** report);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* STPNET_H */
