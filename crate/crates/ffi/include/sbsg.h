/* C interface for the sbsg translator. Generated by cbindgen; do not edit. */

#ifndef SBSG_H
#define SBSG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call in this interface.
 */
typedef enum SbsgStatus {
  /*
   The call succeeded.
   */
  SBSG_STATUS_OK = 0,
  /*
   A required pointer argument was NULL.
   */
  SBSG_STATUS_NULL_ARGUMENT = 1,
  /*
   A string argument was not valid UTF-8.
   */
  SBSG_STATUS_INVALID_UTF8 = 2,
  /*
   The request contradicts the loaded model: bad beam width, length
   budget out of range, vocabulary/checkpoint mismatch.
   */
  SBSG_STATUS_CONFIG = 3,
  /*
   Everything else: unreadable files, malformed checkpoints, decode
   failures.
   */
  SBSG_STATUS_RUNTIME = 4,
} SbsgStatus;

/*
 One loaded model plus its search settings; opaque to C.
 */
typedef struct SbsgTranslator SbsgTranslator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a checkpoint and its vocabulary and hands back a translator that
 decodes greedily with the model's full position budget. Adjust the search
 with [`sbsg_translator_set_beam`] and [`sbsg_translator_set_max_len`].

 On success writes the new handle to `*out` and returns [`SbsgStatus::Ok`];
 on failure writes NULL and returns the reason.

 # Safety
 `ckpt_path` and `vocab_path` must be NUL-terminated strings or NULL, and
 `out` must point to writable storage for one pointer.
 */
enum SbsgStatus sbsg_translator_open(const char *ckpt_path,
                                     const char *vocab_path,
                                     struct SbsgTranslator **out);

/*
 Releases a handle from [`sbsg_translator_open`]. NULL is a no-op.

 # Safety
 `t` must be NULL or a handle that has not already been closed.
 */
void sbsg_translator_close(struct SbsgTranslator *t);

/*
 Switches the search. `beam` 0 decodes greedily; anything else keeps that
 many live streams and picks the finished hypothesis with the best
 length-penalized score, exponent `alpha`. Models that generate from both
 ends need an even width.

 # Safety
 `t` must be NULL or a live handle from [`sbsg_translator_open`].
 */
enum SbsgStatus sbsg_translator_set_beam(struct SbsgTranslator *t, size_t beam, double alpha);

/*
 Caps how many tokens each stream may emit, end marker included. Must be
 between 2 and the model's position budget.

 # Safety
 `t` must be NULL or a live handle from [`sbsg_translator_open`].
 */
enum SbsgStatus sbsg_translator_set_max_len(struct SbsgTranslator *t, size_t max_len);

/*
 Translates one whitespace-tokenized line. On success writes a freshly
 allocated NUL-terminated string to `*out_line` (empty input produces an
 empty string); release it with [`sbsg_string_free`]. On failure writes
 NULL.

 # Safety
 `t` must be NULL or a live handle, `line` a NUL-terminated string or
 NULL, and `out_line` writable storage for one pointer.
 */
enum SbsgStatus sbsg_translate(const struct SbsgTranslator *t, const char *line, char **out_line);

/*
 Releases a string allocated by this library. NULL is a no-op.

 # Safety
 `s` must be NULL or a string from [`sbsg_translate`] that has not already
 been freed.
 */
void sbsg_string_free(char *s);

/*
 Message behind the most recent failure on the calling thread; the empty
 string until one happens. The pointer stays valid until the next failing
 call on the same thread, so copy it out if you need it longer.
 */
const char *sbsg_last_error(void);

/*
 Library version as a static string; do not free.
 */
const char *sbsg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBSG_H */
