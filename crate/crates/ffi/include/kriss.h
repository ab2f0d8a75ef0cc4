#ifndef KRISS_H
#define KRISS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum KrissStatus {
  KRISS_STATUS_OK = 0,
  /*
   Null pointer, invalid UTF-8 or an out-of-range argument.
   */
  KRISS_STATUS_INVALID_ARGUMENT = 1,
  /*
   Bad configuration or usage.
   */
  KRISS_STATUS_USAGE = 2,
  /*
   Missing, malformed or inconsistent data.
   */
  KRISS_STATUS_DATA = 3,
  /*
   A non-finite value was produced.
   */
  KRISS_STATUS_NUMERIC = 4,
  /*
   Internal panic caught at the boundary.
   */
  KRISS_STATUS_PANIC = 5,
} KrissStatus;

/*
 Entity catalog handle.
 */
typedef struct KrissCatalog KrissCatalog;

/*
 Linker handle: encoder plus prototype index.
 */
typedef struct KrissLinker KrissLinker;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next kriss call on the same thread.
 */
const char *kriss_last_error(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void kriss_string_free(char *s);

/*
 Loads an entities JSONL file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KrissStatus kriss_catalog_open(const char *path, struct KrissCatalog **out);

/*
 Number of entities, or 0 for a null handle.

 # Safety
 `catalog` must be null or a live handle.
 */
size_t kriss_catalog_len(const struct KrissCatalog *catalog);

/*
 Renders the reference text of entity `id`.

 # Safety
 `catalog` must be a live handle, `id` a NUL-terminated string and `out`
 writable.
 */
enum KrissStatus kriss_catalog_reference_text(const struct KrissCatalog *catalog,
                                              const char *id,
                                              bool include_description,
                                              char **out);

/*
 # Safety
 `catalog` must be null or a handle not yet freed.
 */
void kriss_catalog_free(struct KrissCatalog *catalog);

/*
 Opens an index directory written by `kriss index build`.

 # Safety
 `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum KrissStatus kriss_linker_open(const char *dir, struct KrissLinker **out);

/*
 Links one mention given as a JSON object with the fields of a
 `mentions.jsonl` line and writes the result as JSON.

 # Safety
 `linker` must be a live handle, `query_json` a NUL-terminated string and
 `out` writable.
 */
enum KrissStatus kriss_linker_link_json(const struct KrissLinker *linker,
                                        const char *query_json,
                                        size_t top_k,
                                        char **out);

/*
 # Safety
 `linker` must be null or a handle not yet freed.
 */
void kriss_linker_free(struct KrissLinker *linker);

/*
 Pair InfoNCE loss of anchor `i` and positive `j` over `count` row-major
 vectors of width `dim`.

 # Safety
 `vectors` must point to `count * dim` doubles; `out` must be writable.
 */
enum KrissStatus kriss_info_nce_pair_loss(const double *vectors,
                                          size_t count,
                                          size_t dim,
                                          size_t i,
                                          size_t j,
                                          double tau,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KRISS_H */
