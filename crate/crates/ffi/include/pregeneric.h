#ifndef PREGENERIC_H
#define PREGENERIC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_NULL_POINTER = 1,
  PG_STATUS_INVALID_INPUT = 2,
  PG_STATUS_CONFIG = 3,
  // Step above the stability bound, blow-up, or a refused construction.
  PG_STATUS_REFUSED = 4,
  PG_STATUS_IO = 5,
  PG_STATUS_BUFFER_TOO_SMALL = 6,
  PG_STATUS_PANIC = 7,
} PgStatus;

typedef enum PgVerdict {
  PG_VERDICT_PASS = 0,
  PG_VERDICT_FAIL = 1,
  PG_VERDICT_NOT_APPLICABLE = 2,
} PgVerdict;

typedef enum PgPotentialKind {
  PG_POTENTIAL_KIND_ZERO = 0,
  // `a x² / 2`
  PG_POTENTIAL_KIND_HARMONIC = 1,
  // `a (1 − cos(b x))`
  PG_POTENTIAL_KIND_COSINE = 2,
  // `a exp(−x² / (2 b²))`
  PG_POTENTIAL_KIND_GAUSSIAN = 3,
} PgPotentialKind;

typedef enum PgMechanism {
  PG_MECHANISM_ANDERSEN = 0,
  // Fokker-Planck momentum diffusion; Langevin noise for particles.
  PG_MECHANISM_DIFFUSIVE = 1,
} PgMechanism;

typedef struct PgEnsemble PgEnsemble;

typedef struct PgExperiment PgExperiment;

typedef struct PgKineticModel PgKineticModel;

typedef struct PgReport PgReport;

// One row of a report.
typedef struct PgCheck {
  double residual;
  double tolerance;
  enum PgVerdict verdict;
  // Expected order in the grid spacing, 0 when none.
  uint8_t order;
  bool tainted;
} PgCheck;

typedef struct PgGrid {
  double q_min;
  double q_max;
  size_t nq;
  bool periodic;
  double p_max;
  size_t np;
} PgGrid;

typedef struct PgPotential {
  enum PgPotentialKind kind;
  double a;
  double b;
} PgPotential;

typedef struct PgModelParams {
  struct PgGrid grid;
  double m;
  double gamma;
  struct PgPotential v;
  struct PgPotential phi;
  enum PgMechanism mechanism;
} PgModelParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pg_version(void);

// Copies the last error message of this thread into `buf`. With a null
// `buf` and zero `len`, only `needed` is written.
//
// # Safety
// `buf` must hold `len` bytes; `needed` may be null.
enum PgStatus pg_last_error(char *buf, size_t len, size_t *needed);

// Parses and validates a TOML experiment config.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum PgStatus pg_experiment_from_toml(const char *toml, struct PgExperiment **out);

// Default experiment of a catalog entry.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum PgStatus pg_experiment_builtin(const char *name, struct PgExperiment **out);

// Overrides the seed of a stochastic experiment.
//
// # Safety
// `exp` must be a live handle.
enum PgStatus pg_experiment_set_seed(struct PgExperiment *exp, uint64_t seed);

// Runs the experiment in memory.
//
// # Safety
// `exp` must be a live handle; `out` must be writable.
enum PgStatus pg_experiment_run(const struct PgExperiment *exp, struct PgReport **out);

// # Safety
// `exp` must be null or a handle not yet freed.
void pg_experiment_free(struct PgExperiment *exp);

// # Safety
// `report` must be a live handle; `count` must be writable.
enum PgStatus pg_report_check_count(const struct PgReport *report, size_t *count);

// Whether every untainted check passed or does not apply.
//
// # Safety
// `report` must be a live handle; `ok` must be writable.
enum PgStatus pg_report_ok(const struct PgReport *report, bool *ok);

// # Safety
// `report` must be a live handle; `out` must be writable.
enum PgStatus pg_report_check(const struct PgReport *report, size_t index, struct PgCheck *out);

// Name of check `index`; same buffer protocol as [`pg_last_error`].
//
// # Safety
// `report` must be a live handle; `buf` must hold `len` bytes.
enum PgStatus pg_report_check_name(const struct PgReport *report,
                                   size_t index,
                                   char *buf,
                                   size_t len,
                                   size_t *needed);

// The report as JSON, byte-identical to `report.json`.
//
// # Safety
// `report` must be a live handle; `buf` must hold `len` bytes.
enum PgStatus pg_report_json(const struct PgReport *report, char *buf, size_t len, size_t *needed);

// Writes the report and auxiliary files into `dir`.
//
// # Safety
// `report` must be a live handle; `dir` a NUL-terminated path.
enum PgStatus pg_report_write(const struct PgReport *report, const char *dir);

// # Safety
// `report` must be null or a handle not yet freed.
void pg_report_free(struct PgReport *report);

// # Safety
// `params` must point to a valid struct; `out` must be writable.
enum PgStatus pg_kinetic_new(const struct PgModelParams *params, struct PgKineticModel **out);

// Number of grid cells, `nq * np`.
//
// # Safety
// `model` must be a live handle; `cells` must be writable.
enum PgStatus pg_kinetic_cells(const struct PgKineticModel *model, size_t *cells);

// Largest stable explicit step.
//
// # Safety
// `model` must be a live handle; `bound` must be writable.
enum PgStatus pg_kinetic_cfl_bound(const struct PgKineticModel *model, double *bound);

// Normalized Gibbs density, row-major with `p` fastest.
//
// # Safety
// `model` must be a live handle; `out` must hold `len` doubles.
enum PgStatus pg_kinetic_gibbs(const struct PgKineticModel *model, double *out, size_t len);

// Evolves `rho0` (unit mass) for `steps` steps of size `dt` into `out`.
// `tainted` reports whether positivity clipping removed too much mass.
//
// # Safety
// `rho0` and `out` must hold `len` doubles; `tainted` may be null.
enum PgStatus pg_kinetic_run(const struct PgKineticModel *model,
                             const double *rho0,
                             double dt,
                             size_t steps,
                             double *out,
                             size_t len,
                             bool *tainted);

// `S(rho) = ∫ rho log rho + E(rho)` for a density on the model grid.
//
// # Safety
// `rho` must hold `len` doubles; `value` must be writable.
enum PgStatus pg_kinetic_entropy(const struct PgKineticModel *model,
                                 const double *rho,
                                 size_t len,
                                 double *value);

// # Safety
// `model` must be null or a handle not yet freed.
void pg_kinetic_free(struct PgKineticModel *model);

// `n` particles drawn from independent Gaussians in `q` and `p`. The
// grid of `params` is used only for its periodic window.
//
// # Safety
// `params` must point to a valid struct; `out` must be writable.
enum PgStatus pg_particles_gaussian(const struct PgModelParams *params,
                                    size_t n,
                                    uint64_t seed,
                                    double q0,
                                    double p0,
                                    double sq,
                                    double sp,
                                    struct PgEnsemble **out);

// Advances `steps` steps; a step above the stability bound is refused
// before any state changes.
//
// # Safety
// `ens` must be a live handle.
enum PgStatus pg_particles_run(struct PgEnsemble *ens, double dt, size_t steps);

// Particle count and elapsed time.
//
// # Safety
// `ens` must be a live handle; `n` and `time` may be null.
enum PgStatus pg_particles_info(const struct PgEnsemble *ens, size_t *n, double *time);

// Copies positions and momenta; either output may be null.
//
// # Safety
// Non-null outputs must hold `len` doubles.
enum PgStatus pg_particles_state(const struct PgEnsemble *ens, double *q, double *p, size_t len);

// # Safety
// `ens` must be null or a handle not yet freed.
void pg_particles_free(struct PgEnsemble *ens);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREGENERIC_H */
