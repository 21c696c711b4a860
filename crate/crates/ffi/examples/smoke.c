#include <stdio.h>
#include "tmrd.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        TmrdStatus s_ = (call);                                            \
        if (s_ != TMRD_STATUS_OK) {                                        \
            fprintf(stderr, "%s -> %d: %s\n", #call, s_, tmrd_last_error()); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    TmrdDataset *ds = NULL;
    TmrdConfig *cfg = NULL;
    TmrdRun *run = NULL;
    size_t labeled = 0, unlabeled = 0;
    double ap50 = -1.0, map = -1.0;

    CHECK(tmrd_dataset_generate(3, 20, 0.5, &ds));
    CHECK(tmrd_dataset_counts(ds, &labeled, &unlabeled, NULL));
    CHECK(tmrd_config_default(&cfg));
    CHECK(tmrd_config_set(cfg, "train.burn_in_iterations", "2"));
    CHECK(tmrd_config_set(cfg, "train.total_iterations", "2"));
    CHECK(tmrd_config_set(cfg, "train.batch_labeled", "2"));
    CHECK(tmrd_run_new(cfg, ds, &run));
    CHECK(tmrd_run_until(run, 2));
    CHECK(tmrd_run_evaluate(run, &ap50, &map, NULL));
    if (tmrd_config_set(cfg, "train.nope", "1") != TMRD_STATUS_CONFIG) {
        return 2;
    }
    printf("labeled=%zu unlabeled=%zu ap50=%.4f map=%.4f\n", labeled, unlabeled, ap50, map);
    tmrd_run_free(run);
    tmrd_config_free(cfg);
    tmrd_dataset_free(ds);
    return 0;
}
