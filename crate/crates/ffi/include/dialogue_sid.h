#ifndef DIALOGUE_SID_H
#define DIALOGUE_SID_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsidStatus {
  DSID_STATUS_OK = 0,
  DSID_STATUS_NULL_POINTER = 1,
  DSID_STATUS_CONFIG = 2,
  DSID_STATUS_NUMERIC = 3,
  DSID_STATUS_IO = 4,
  DSID_STATUS_SHAPE = 5,
  DSID_STATUS_PANIC = 6,
} DsidStatus;

typedef enum DsidLossKind {
  DSID_LOSS_KIND_AVA = 0,
  DSID_LOSS_KIND_GE2E = 1,
  DSID_LOSS_KIND_APROTO = 2,
} DsidLossKind;

/**
 * Synthetic dialogue corpus.
 */
typedef struct DsidCorpus DsidCorpus;

/**
 * Trained utterance encoder.
 */
typedef struct DsidEncoder DsidEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next failing call.
 */
const char *dsid_last_error(void);

/**
 * Generates a corpus from a JSON corpus spec; `"{}"` gives the defaults.
 */
enum DsidStatus dsid_corpus_generate(const char *spec_json, struct DsidCorpus **out);

enum DsidStatus dsid_corpus_load(const char *path, struct DsidCorpus **out);

enum DsidStatus dsid_corpus_save(const struct DsidCorpus *corpus, const char *path);

/**
 * Number of dialogues, or 0 for NULL.
 */
size_t dsid_corpus_num_dialogues(const struct DsidCorpus *corpus);

/**
 * Frame count and feature width of every utterance.
 */
enum DsidStatus dsid_corpus_shape(const struct DsidCorpus *corpus,
                                  size_t *utterances_per_dialogue,
                                  size_t *frames,
                                  size_t *feature_dim);

/**
 * Ground truth of one dialogue: `speakers` receives `utterances_per_dialogue` ids.
 */
enum DsidStatus dsid_corpus_dialogue(const struct DsidCorpus *corpus,
                                     size_t index,
                                     size_t *speakers,
                                     size_t speakers_len,
                                     bool *contaminated);

/**
 * Copies one utterance's frames (row-major, `frames × feature_dim`).
 */
enum DsidStatus dsid_corpus_utterance(const struct DsidCorpus *corpus,
                                      size_t dialogue,
                                      size_t slot,
                                      double *out,
                                      size_t out_len);

void dsid_corpus_free(struct DsidCorpus *corpus);

/**
 * Loads the encoder stored in a training checkpoint.
 */
enum DsidStatus dsid_encoder_load(const char *checkpoint_path, struct DsidEncoder **out);

size_t dsid_encoder_input_dim(const struct DsidEncoder *encoder);

size_t dsid_encoder_embed_dim(const struct DsidEncoder *encoder);

/**
 * Embeds one utterance given as `frames × dim` row-major features.
 */
enum DsidStatus dsid_encoder_encode(const struct DsidEncoder *encoder,
                                    const double *features,
                                    size_t frames,
                                    size_t dim,
                                    double *out,
                                    size_t out_len);

void dsid_encoder_free(struct DsidEncoder *encoder);

/**
 * Equal error rate of target and nontarget score lists.
 */
enum DsidStatus dsid_compute_eer(const double *targets,
                                 size_t num_targets,
                                 const double *nontargets,
                                 size_t num_nontargets,
                                 double *eer,
                                 double *threshold);

/**
 * Summed batch loss of `n_dialogues × utterances` embeddings, rows grouped by dialogue.
 * `kind` is a [`DsidLossKind`] value; `w`/`b` are ignored by the all-versus-all loss.
 */
enum DsidStatus dsid_batch_loss(int32_t kind,
                                const double *embeddings,
                                size_t n_dialogues,
                                size_t utterances,
                                size_t dim,
                                double w,
                                double b,
                                double *loss);

/**
 * Soft rejection weights for per-dialogue compactness values.
 */
enum DsidStatus dsid_soft_weights(const double *compactness,
                                  size_t len,
                                  double threshold,
                                  double temperature,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIALOGUE_SID_H */
