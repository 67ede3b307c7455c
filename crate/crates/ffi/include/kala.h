#ifndef KALA_H
#define KALA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define KALA_SPLIT_TRAIN 0

#define KALA_SPLIT_VAL 1

#define KALA_SPLIT_TEST 2

typedef enum KalaStatus {
  KALA_STATUS_OK = 0,
  KALA_STATUS_NULL_POINTER = 1,
  KALA_STATUS_INVALID_ARGUMENT = 2,
  KALA_STATUS_CONFIG = 3,
  KALA_STATUS_PARSE = 4,
  KALA_STATUS_RANGE = 5,
  KALA_STATUS_LOOKUP = 6,
  KALA_STATUS_CONTRACT = 7,
  KALA_STATUS_CHECKPOINT = 8,
  KALA_STATUS_IO = 9,
  KALA_STATUS_NUMERICS = 10,
  KALA_STATUS_DIVERGENCE = 11,
  KALA_STATUS_PANIC = 12,
} KalaStatus;

// A corpus held on the Rust side.
typedef struct KalaCorpus KalaCorpus;

// A trained model restored from a checkpoint.
typedef struct KalaModel KalaModel;

// Scores for one split. Undefined values (EM outside QA, empty subsets) are NaN.
typedef struct KalaScores {
  uintptr_t count;
  double em;
  double f1;
  uintptr_t seen_count;
  double seen_f1;
  uintptr_t unseen_count;
  double unseen_f1;
} KalaScores;

// Training FLOPs per sequence for each variant, and relational over fine-tune.
typedef struct KalaFlops {
  double fine_tune;
  double pointwise;
  double relational;
  double ratio;
} KalaFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next failing call.
const char *kala_last_error(void);

// Library version as a static NUL-terminated string.
const char *kala_version(void);

// Loads a corpus directory written by `kala generate`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum KalaStatus kala_corpus_load(const char *dir, struct KalaCorpus **out);

// Generates the synthetic corpus described by a run configuration file.
//
// # Safety
// `config_path` must be a NUL-terminated string and `out` a valid pointer.
enum KalaStatus kala_corpus_generate(const char *config_path, struct KalaCorpus **out);

// Writes the corpus files to `dir`.
//
// # Safety
// `corpus` must come from this library and `dir` must be a NUL-terminated string.
enum KalaStatus kala_corpus_save(const struct KalaCorpus *corpus, const char *dir);

// Number of documents in a split, or 0 for a null handle or unknown split.
//
// # Safety
// `corpus` must be null or come from this library.
uintptr_t kala_corpus_len(const struct KalaCorpus *corpus, uint32_t split);

// # Safety
// `corpus` must be null or come from this library, and is invalid afterwards.
void kala_corpus_free(struct KalaCorpus *corpus);

// Restores a model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum KalaStatus kala_model_load(const char *path, struct KalaModel **out);

// # Safety
// `model` must be null or come from this library, and is invalid afterwards.
void kala_model_free(struct KalaModel *model);

// Predicts every example of a split and scores the predictions.
//
// # Safety
// `model` and `corpus` must come from this library and `out` must be a valid pointer.
enum KalaStatus kala_model_evaluate(const struct KalaModel *model,
                                    const struct KalaCorpus *corpus,
                                    uint32_t split,
                                    uintptr_t max_answer_len,
                                    struct KalaScores *out);

// Training FLOPs from a configuration file with a `[flops]` table.
//
// # Safety
// `config_path` must be a NUL-terminated string and `out` a valid pointer.
enum KalaStatus kala_flops(const char *config_path, struct KalaFlops *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KALA_H */
