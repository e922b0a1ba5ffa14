#ifndef DSCLS_H
#define DSCLS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsclsStatus {
  DSCLS_STATUS_OK = 0,
  DSCLS_STATUS_NULL_POINTER = 1,
  DSCLS_STATUS_INVALID_UTF8 = 2,
  DSCLS_STATUS_IO = 3,
  DSCLS_STATUS_BAD_CHECKPOINT = 4,
  DSCLS_STATUS_BAD_VOCABULARY = 5,
  DSCLS_STATUS_INVALID_ARGUMENT = 6,
  DSCLS_STATUS_BUFFER_TOO_SMALL = 7,
  DSCLS_STATUS_INTERNAL = 8,
} DsclsStatus;

// A loaded checkpoint: configuration, vocabulary and weights.
typedef struct DsclsModel DsclsModel;

// A byte-level BPE vocabulary.
typedef struct DsclsVocab DsclsVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *dscls_last_error(void);

// Library version as a static NUL-terminated string.
const char *dscls_version(void);

// Loads a checkpoint file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum DsclsStatus dscls_model_load(const char *path, struct DsclsModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`dscls_model_load`] and not be used afterwards.
void dscls_model_free(struct DsclsModel *model);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dscls_model_num_classes(const struct DsclsModel *model);

// Name of class `index`, or null when out of range. Owned by the model.
//
// # Safety
// `model` must be null or a live handle.
const char *dscls_model_label(const struct DsclsModel *model, size_t index);

// Predicted class index and its probability for one text.
//
// # Safety
// `model` must be a live handle, `text` NUL-terminated, and both outputs
// writable.
enum DsclsStatus dscls_model_predict(const struct DsclsModel *model,
                                     const char *text,
                                     size_t *out_class,
                                     double *out_confidence);

// Writes the class probabilities of one text into `probs[0..num_classes]`.
//
// # Safety
// `model` must be a live handle, `text` NUL-terminated, and `probs` valid for
// `len` writes.
enum DsclsStatus dscls_model_predict_proba(const struct DsclsModel *model,
                                           const char *text,
                                           double *probs,
                                           size_t len);

// Loads a vocabulary JSON file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum DsclsStatus dscls_vocab_load(const char *path, struct DsclsVocab **out);

// A copy of the vocabulary embedded in a model.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum DsclsStatus dscls_model_vocab(const struct DsclsModel *model, struct DsclsVocab **out);

// Releases a vocabulary; null is ignored.
//
// # Safety
// `vocab` must come from this library and not be used afterwards.
void dscls_vocab_free(struct DsclsVocab *vocab);

// Token count, or 0 for a null handle.
//
// # Safety
// `vocab` must be null or a live handle.
size_t dscls_vocab_size(const struct DsclsVocab *vocab);

// Encodes `text` as `[CLS] tokens [SEP]` padded to `max_len`, writing ids
// and the attention mask (1 = real token). Returns the unpadded length in
// `*out_len` when it is not null.
//
// # Safety
// `vocab` must be a live handle, `text` NUL-terminated, and `ids`/`mask`
// valid for `max_len` writes.
enum DsclsStatus dscls_encode(const struct DsclsVocab *vocab,
                              const char *text,
                              size_t max_len,
                              uint32_t *ids,
                              uint8_t *mask,
                              size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSCLS_H */
