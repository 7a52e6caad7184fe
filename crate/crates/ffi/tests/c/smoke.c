#include "pregeneric.h"
#include <math.h>
#include <stdio.h>
#include <string.h>

#define EXPECT(cond)                                          \
  do {                                                        \
    if (!(cond)) {                                            \
      fprintf(stderr, "line %d: %s\n", __LINE__, #cond);      \
      return 1;                                               \
    }                                                         \
  } while (0)

int main(void) {
  EXPECT(strlen(pg_version()) > 0);

  PgExperiment *exp = NULL;
  EXPECT(pg_experiment_builtin("damped-oscillator", &exp) == PG_STATUS_OK);
  PgReport *rep = NULL;
  EXPECT(pg_experiment_run(exp, &rep) == PG_STATUS_OK);
  bool ok = false;
  size_t count = 0;
  EXPECT(pg_report_ok(rep, &ok) == PG_STATUS_OK && ok);
  EXPECT(pg_report_check_count(rep, &count) == PG_STATUS_OK && count > 0);
  for (size_t i = 0; i < count; ++i) {
    PgCheck c;
    char name[64];
    EXPECT(pg_report_check(rep, i, &c) == PG_STATUS_OK);
    EXPECT(c.verdict == PG_VERDICT_PASS && c.residual <= c.tolerance);
    EXPECT(pg_report_check_name(rep, i, name, sizeof name, NULL) == PG_STATUS_OK);
  }
  pg_report_free(rep);
  pg_experiment_free(exp);

  EXPECT(pg_experiment_builtin("nope", &exp) == PG_STATUS_CONFIG);
  size_t need = 0;
  EXPECT(pg_last_error(NULL, 0, &need) == PG_STATUS_OK && need > 1);

  PgModelParams prm = {
      .grid = {-3.141592653589793, 3.141592653589793, 16, true, 8.0, 16},
      .m = 1.0,
      .gamma = 1.0,
      .v = {PG_POTENTIAL_KIND_COSINE, 0.5, 1.0},
      .phi = {PG_POTENTIAL_KIND_ZERO, 0.0, 0.0},
      .mechanism = PG_MECHANISM_DIFFUSIVE,
  };
  PgKineticModel *model = NULL;
  EXPECT(pg_kinetic_new(&prm, &model) == PG_STATUS_OK);
  size_t cells = 0;
  double bound = 0.0;
  EXPECT(pg_kinetic_cells(model, &cells) == PG_STATUS_OK && cells == 256);
  EXPECT(pg_kinetic_cfl_bound(model, &bound) == PG_STATUS_OK && bound > 0.0);
  double rho[256], out[256];
  EXPECT(pg_kinetic_gibbs(model, rho, 256) == PG_STATUS_OK);
  EXPECT(pg_kinetic_run(model, rho, 2.0 * bound, 1, out, 256, NULL) == PG_STATUS_REFUSED);
  EXPECT(pg_kinetic_run(model, rho, 0.5 * bound, 4, out, 256, NULL) == PG_STATUS_OK);
  pg_kinetic_free(model);

  PgEnsemble *ens = NULL;
  prm.v.kind = PG_POTENTIAL_KIND_HARMONIC;
  prm.v.a = 1.0;
  prm.grid.periodic = false;
  EXPECT(pg_particles_gaussian(&prm, 100, 7, 0.0, 0.0, 1.0, 1.0, &ens) == PG_STATUS_OK);
  EXPECT(pg_particles_run(ens, 0.01, 10) == PG_STATUS_OK);
  double q[100];
  double t = 0.0;
  EXPECT(pg_particles_state(ens, q, NULL, 100) == PG_STATUS_OK);
  EXPECT(pg_particles_info(ens, NULL, &t) == PG_STATUS_OK && fabs(t - 0.1) < 1e-12);
  pg_particles_free(ens);
  puts("ok");
  return 0;
}
