#ifndef SAFEFLOW_H
#define SAFEFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stdint.h>

typedef enum SafeflowStatus {
  SAFEFLOW_STATUS_OK = 0,
  SAFEFLOW_STATUS_NULL_POINTER = 1,
  SAFEFLOW_STATUS_INVALID_ARGUMENT = 2,
  SAFEFLOW_STATUS_IO = 3,
  SAFEFLOW_STATUS_FORMAT = 4,
  SAFEFLOW_STATUS_NUMERICAL = 5,
  SAFEFLOW_STATUS_PANIC = 6,
} SafeflowStatus;

// Opaque learned model.
typedef struct SafeflowModel SafeflowModel;

// Opaque simulator.
typedef struct SafeflowSimulator SafeflowSimulator;

// Safety-filter parameters.
typedef struct SafeflowFilterConfig {
  // Barrier gain (1/s).
  double alpha_gain;
  // Componentwise bound on the command (rad/s).
  double u_max;
  // Control period (s); replaced by the simulator step inside a simulator.
  double dt;
  // Barrier offset.
  double margin;
} SafeflowFilterConfig;

// Simulator parameters.
typedef struct SafeflowSimConfig {
  double dt;
  double speed_scale;
  bool filter_on;
  struct SafeflowFilterConfig filter;
} SafeflowSimConfig;

// One simulator tick.
typedef struct SafeflowStep {
  uint64_t tick;
  double t;
  double q_ref[4];
  double q_exc[4];
  double theta[3];
  double h[3];
  double u0[3];
  double u_star[3];
  bool active[3];
  bool feasible;
} SafeflowStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *safeflow_version(void);

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next call into the library on this thread.
const char *safeflow_last_error(void);

struct SafeflowFilterConfig safeflow_filter_config_default(void);

struct SafeflowSimConfig safeflow_sim_config_default(void);

// Loads a model file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SafeflowStatus safeflow_model_load(const char *path, struct SafeflowModel **out);

// Parses a model from its JSON text.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum SafeflowStatus safeflow_model_from_json(const char *json, struct SafeflowModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void safeflow_model_free(struct SafeflowModel *model);

// Goal frame as a quaternion.
//
// # Safety
// `q_out` must point to 4 writable doubles.
enum SafeflowStatus safeflow_model_goal(const struct SafeflowModel *model, double *q_out);

// Mean start frame of the training demonstrations.
//
// # Safety
// `q_out` must point to 4 writable doubles.
enum SafeflowStatus safeflow_model_start(const struct SafeflowModel *model, double *q_out);

// Angular velocity commanded by the DS at frame `q`.
//
// # Safety
// `q` must point to 4 doubles and `omega_out` to 3 writable doubles.
enum SafeflowStatus safeflow_model_evaluate(const struct SafeflowModel *model,
                                            const double *q,
                                            double *omega_out);

// Cone half-angles (rad) for a reference frame.
//
// # Safety
// `q_ref` must point to 4 doubles and `theta_out` to 3 writable doubles.
enum SafeflowStatus safeflow_model_cone_angles(const struct SafeflowModel *model,
                                               const double *q_ref,
                                               double *theta_out);

// One safety-filter solve. `feasible_out` may be NULL.
//
// # Safety
// Quaternion arguments must point to 4 doubles, vector arguments to 3;
// `config` may be NULL for defaults.
enum SafeflowStatus safeflow_filter_step(const struct SafeflowModel *model,
                                         const double *q_exc,
                                         const double *q_ref,
                                         const double *w_ref,
                                         const double *u0,
                                         const struct SafeflowFilterConfig *config,
                                         double *u_out,
                                         bool *feasible_out);

// Creates a simulator; `config` NULL selects defaults and `q_initial` NULL
// starts both frames at the model's start frame. The simulator does not
// borrow the model, which may be freed afterwards.
//
// # Safety
// Pointers must be valid or NULL where allowed; `out` must be valid.
enum SafeflowStatus safeflow_simulator_new(const struct SafeflowModel *model,
                                           const struct SafeflowSimConfig *config,
                                           const double *q_initial,
                                           struct SafeflowSimulator **out);

// Advances one tick with external input `u_ext` (NULL for zero).
//
// # Safety
// `sim` and `step_out` must be valid; `u_ext` NULL or 3 doubles.
enum SafeflowStatus safeflow_simulator_step(struct SafeflowSimulator *sim,
                                            const double *u_ext,
                                            struct SafeflowStep *step_out);

// Returns both frames to their initial values and the clock to zero.
//
// # Safety
// `sim` must be valid.
enum SafeflowStatus safeflow_simulator_reset(struct SafeflowSimulator *sim);

// # Safety
// `sim` must be valid.
enum SafeflowStatus safeflow_simulator_set_speed_scale(struct SafeflowSimulator *sim, double scale);

// # Safety
// `sim` must be valid.
enum SafeflowStatus safeflow_simulator_set_filter(struct SafeflowSimulator *sim, bool on);

// Releases a simulator. NULL is ignored.
//
// # Safety
// `sim` must come from this library and not be used afterwards.
void safeflow_simulator_free(struct SafeflowSimulator *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFEFLOW_H */
