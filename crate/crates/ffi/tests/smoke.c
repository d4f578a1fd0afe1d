/* SPDX-License-Identifier: Apache-2.0 */
#include <math.h>
#include <stdio.h>
#include "ria.h"

int main(void) {
    RiaBox a = {0, 0, 3, 3};
    RiaBox b = {2, 2, 5, 5};
    double v = 0.0;
    if (ria_iou(&a, &b, &v) != RIA_STATUS_OK || fabs(v - 4.0 / 28.0) > 1e-12) {
        return 1;
    }
    if (ria_iou_hat(&a, &b, &v) != RIA_STATUS_OK || fabs(v - 4.0 / 16.0) > 1e-12) {
        return 2;
    }
    if (ria_rfs(0.9, 0.6, &v) != RIA_STATUS_OK || fabs(v - 0.3) > 1e-12) {
        return 3;
    }
    if (ria_iou(NULL, &b, &v) != RIA_STATUS_NULL_POINTER || ria_last_error_message() == NULL) {
        return 4;
    }
    printf("ok %s\n", ria_version());
    return 0;
}
