#include <math.h>
#include <stdio.h>
#include <string.h>

#include "posemamba.h"

#define T 5
#define J 17

int main(void) {
    const char *cfg = "depth = 1\nd_model = 8\nframes = 4\njoints = 17\nprecision = \"f64\"\n";
    PmModel *m = NULL;
    if (pm_model_init(cfg, 7, &m) != PM_STATUS_OK) return 1;
    if (pm_model_frames(m) != 4 || pm_model_joints(m) != J) return 2;

    double kp[T * J * 2];
    for (int i = 0; i < T * J * 2; i++) kp[i] = 0.5 * sin(0.37 * i);
    double out[T * J * 3];
    if (pm_model_predict(m, kp, T, J, 0, out, T * J * 3) != PM_STATUS_OK) return 3;
    for (int i = 0; i < T * J * 3; i++)
        if (!isfinite(out[i])) return 4;

    if (pm_model_predict(m, kp, T, J, 0, out, 3) != PM_STATUS_BUFFER_TOO_SMALL) return 5;
    char msg[256];
    if (pm_last_error_message(msg, sizeof msg) == 0 || strstr(msg, "buffer") == NULL) return 6;

    double err = -1.0;
    if (pm_mpjpe(out, out, T, J, &err) != PM_STATUS_OK || err != 0.0) return 7;

    PmModel *bad = NULL;
    if (pm_model_load("/nonexistent/model.pmck", 0, &bad) != PM_STATUS_IO || bad != NULL) return 8;

    pm_model_free(m);
    printf("ok %s\n", pm_version());
    return 0;
}
