#include <math.h>
#include <stdio.h>

#include "fedq.h"

int main(void) {
    FedqMdp *mdp = NULL;
    if (fedq_mdp_new_hard(0.9, &mdp) != FEDQ_STATUS_OK) {
        return 1;
    }
    double q[8];
    if (fedq_solve(mdp, 1e-12, q, 8) != FEDQ_STATUS_OK) {
        return 2;
    }
    double v1 = q[2] > q[3] ? q[2] : q[3];
    if (fabs(v1 - 7.5) > 1e-8) {
        return 3;
    }
    if (fedq_solve(mdp, 1e-12, q, 2) != FEDQ_STATUS_BUFFER_TOO_SMALL) {
        return 4;
    }
    char msg[128];
    size_t n = fedq_last_error_message(msg, sizeof msg);
    if (n == 0) {
        return 5;
    }
    fedq_mdp_free(mdp);

    FedqMdp *exp = NULL;
    if (fedq_mdp_new_experiment(0.8, 0.9, &exp) != FEDQ_STATUS_OK) {
        return 6;
    }
    FedqDvrSettings s = fedq_dvr_settings_default(0.25, 0.1, 0.5, 2);
    s.scale_l = 1e-3;
    s.scale_b = 1e-2;
    FedqDvrRun *run = NULL;
    if (fedq_dvr_run(exp, &s, 1, &run) != FEDQ_STATUS_OK) {
        return 7;
    }
    FedqLedger ledger;
    if (fedq_dvr_run_ledger(run, &ledger) != FEDQ_STATUS_OK || ledger.rounds == 0) {
        return 8;
    }
    printf("epochs=%zu rounds=%llu\n", fedq_dvr_run_num_epochs(run), (unsigned long long)ledger.rounds);
    fedq_dvr_run_free(run);
    fedq_mdp_free(exp);
    return 0;
}
