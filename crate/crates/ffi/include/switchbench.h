/* C interface for the switchbench solver suite. Generated by cbindgen; do not edit. */

#ifndef SWITCHBENCH_H
#define SWITCHBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Numeric values mirror the CLI exit codes;
// the argument-misuse codes are specific to the C boundary.
typedef enum SbStatus {
  SB_OK = 0,
  SB_PARSE_ERROR = 1,
  SB_DOMAIN_ERROR = 2,
  SB_NUMERICAL_ERROR = 3,
  SB_NULL_ARGUMENT = 4,
  SB_PANIC = 5,
} SbStatus;

// A solved value surface on a scenario tree.
typedef struct SbField SbField;

// A solved value surface on a finite-difference grid.
typedef struct SbPde SbPde;

// A parsed problem instance plus its resolved discretization defaults.
typedef struct SbProblem SbProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; do not free.
const char *sb_version(void);

// Message describing the most recent error on this thread, or null when no
// error has occurred. The caller owns the string and must release it with
// `sb_string_free`.
char *sb_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must have been returned by `sb_last_error` and not freed before.
void sb_string_free(char *s);

// Parses a problem file (JSON, same schema as the CLI) into a handle.
// On success writes the new handle to `out`.
//
// # Safety
// `json` must point to a NUL-terminated string; `out` must be a valid
// pointer to pointer.
enum SbStatus sb_problem_parse(const char *json, struct SbProblem **out);

// Releases a problem handle. Null is ignored.
//
// # Safety
// `p` must be a handle from `sb_problem_parse`, not yet freed.
void sb_problem_free(struct SbProblem *p);

// Number of modes, or 0 for a null handle.
//
// # Safety
// `p` must be a live handle or null.
uint32_t sb_problem_modes(const struct SbProblem *p);

// Time horizon, or NaN for a null handle.
//
// # Safety
// `p` must be a live handle or null.
double sb_problem_horizon(const struct SbProblem *p);

// Runs the structural assumption checks. Writes `true` to `passed` when
// every check holds.
//
// # Safety
// `p` must be a live handle; `passed` must be a valid pointer.
enum SbStatus sb_validate(const struct SbProblem *p, bool *passed);

// Solves the switching system by backward induction on a scenario tree.
// `max_dt <= 0` uses the instance's resolved default step. Requires an
// instance with payoff rates; coupled drivers need `sb_solve_picard`.
//
// # Safety
// `p` must be a live handle; `out` must be a valid pointer to pointer.
enum SbStatus sb_solve_tree(const struct SbProblem *p, double max_dt, struct SbField **out);

// Solves the coupled system by fixed-point iteration on a scenario tree;
// accepts both rate and driver instances. `max_dt <= 0` uses the resolved
// default step.
//
// # Safety
// `p` must be a live handle; `out` must be a valid pointer to pointer.
enum SbStatus sb_solve_picard(const struct SbProblem *p, double max_dt, struct SbField **out);

// Number of modes in a solved field, or 0 for null.
//
// # Safety
// `f` must be a live handle or null.
uint32_t sb_field_modes(const struct SbField *f);

// Number of time layers in a solved field, or 0 for null.
//
// # Safety
// `f` must be a live handle or null.
uint64_t sb_field_layers(const struct SbField *f);

// Value at time zero for a 0-based mode.
//
// # Safety
// `f` must be a live handle; `out` must be a valid pointer.
enum SbStatus sb_field_root(const struct SbField *f, uint32_t mode, double *out);

// Releases a field handle. Null is ignored.
//
// # Safety
// `f` must be a handle from a solve call, not yet freed.
void sb_field_free(struct SbField *f);

// Solves the variational system with an explicit finite-difference scheme.
// Nonpositive `max_dt`, `h`, or `half_width` fall back to the instance's
// resolved defaults.
//
// # Safety
// `p` must be a live handle; `out` must be a valid pointer to pointer.
enum SbStatus sb_solve_pde(const struct SbProblem *p,
                           double max_dt,
                           double h,
                           double half_width,
                           struct SbPde **out);

// Finite-difference value at time zero and the centered start state, for a
// 0-based mode.
//
// # Safety
// `s` must be a live handle; `out` must be a valid pointer.
enum SbStatus sb_pde_root(const struct SbPde *s, uint32_t mode, double *out);

// Releases a finite-difference solution handle. Null is ignored.
//
// # Safety
// `s` must be a handle from `sb_solve_pde`, not yet freed.
void sb_pde_free(struct SbPde *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWITCHBENCH_H */
