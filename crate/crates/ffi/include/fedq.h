/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef FEDQ_H
#define FEDQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedqStatus {
  FEDQ_STATUS_OK = 0,
  FEDQ_STATUS_NULL_POINTER = 1,
  FEDQ_STATUS_INVALID_ARGUMENT = 2,
  FEDQ_STATUS_INVALID_MDP = 3,
  FEDQ_STATUS_OUT_OF_BOUND = 4,
  FEDQ_STATUS_IO = 5,
  FEDQ_STATUS_BUFFER_TOO_SMALL = 6,
  FEDQ_STATUS_PANIC = 7,
} FedqStatus;

typedef enum FedqCommKind {
  FEDQ_COMM_KIND_EVERY_STEP = 0,
  FEDQ_COMM_KIND_FINAL_ONLY = 1,
  FEDQ_COMM_KIND_PERIODIC = 2,
} FedqCommKind;

// Opaque result of a distributed variance-reduced run.
typedef struct FedqDvrRun FedqDvrRun;

// Opaque MDP handle.
typedef struct FedqMdp FedqMdp;

typedef struct FedqDvrSettings {
  double eps;
  double delta;
  double eta;
  size_t num_agents;
  // Fraction of coordinates per upload; 1 sends all of them.
  double alpha;
  double scale_l;
  double scale_b;
  uint64_t min_recentering;
  uint64_t min_batch;
} FedqDvrSettings;

typedef struct FedqEpochReport {
  size_t epoch;
  // Sup-norm error against `Q*` (the run always solves for it).
  double error;
  uint64_t samples_per_agent_per_sa;
  uint64_t rounds;
  uint64_t bits_per_agent;
  double max_compressor_input;
  double bound;
} FedqEpochReport;

typedef struct FedqLedger {
  uint64_t rounds;
  uint64_t bits_per_agent;
  uint64_t samples_per_agent_per_sa;
} FedqLedger;

typedef struct FedqSyncSettings {
  uint64_t total_steps;
  size_t batch_size;
  size_t num_agents;
  // Constant step size when positive; otherwise `c_eta` selects the
  // rescaled linear schedule.
  double eta;
  double c_eta;
  enum FedqCommKind comm;
  // Averaging period for `FEDQ_COMM_KIND_PERIODIC`.
  uint64_t period;
} FedqSyncSettings;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length
// excluding the terminator.
size_t fedq_last_error_message(char *buf, size_t len);

// Four-state hard instance with one copy and two actions in state 1.
enum FedqStatus fedq_mdp_new_hard(double gamma, struct FedqMdp **out);

// Three-state, two-action instance with self-loop probability `p`.
enum FedqStatus fedq_mdp_new_experiment(double gamma, double p, struct FedqMdp **out);

// Parses an MDP from a NUL-terminated JSON document.
enum FedqStatus fedq_mdp_from_json(const char *json, struct FedqMdp **out);

void fedq_mdp_free(struct FedqMdp *mdp);

size_t fedq_mdp_num_states(const struct FedqMdp *mdp);

size_t fedq_mdp_num_actions(const struct FedqMdp *mdp);

double fedq_mdp_gamma(const struct FedqMdp *mdp);

// Writes `Q*` (row-major by state, `num_states * num_actions` values) into `q_out`.
enum FedqStatus fedq_solve(const struct FedqMdp *mdp, double tol, double *q_out, size_t len);

// Prescribed constants (no scaling, no floors, `alpha = 1`).
struct FedqDvrSettings fedq_dvr_settings_default(double eps,
                                                 double delta,
                                                 double eta,
                                                 size_t num_agents);

// Runs every epoch from `Q = 0`; the result owns per-epoch reports and the final table.
enum FedqStatus fedq_dvr_run(const struct FedqMdp *mdp,
                             const struct FedqDvrSettings *settings,
                             uint64_t seed,
                             struct FedqDvrRun **out);

void fedq_dvr_run_free(struct FedqDvrRun *run);

size_t fedq_dvr_run_num_epochs(const struct FedqDvrRun *run);

// Report of epoch `index` (0-based; the report's own `epoch` field is 1-based).
enum FedqStatus fedq_dvr_run_epoch(const struct FedqDvrRun *run,
                                   size_t index,
                                   struct FedqEpochReport *out);

enum FedqStatus fedq_dvr_run_ledger(const struct FedqDvrRun *run, struct FedqLedger *out);

// Final Q-table of the run, row-major by state.
enum FedqStatus fedq_dvr_run_q(const struct FedqDvrRun *run, double *buf, size_t len);

// Intermittent-communication run; reports agent 0's final error and the ledger.
enum FedqStatus fedq_sync_run(const struct FedqMdp *mdp,
                              const struct FedqSyncSettings *settings,
                              uint64_t seed,
                              double *final_error,
                              struct FedqLedger *ledger);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDQ_H */
