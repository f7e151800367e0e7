#include <stdio.h>
#include "stemob.h"

int main(void) {
    StemSchedule *s = NULL;
    if (stem_schedule_new(STEM_SCHEDULE_KIND_COSINE, 50, &s) != STEM_STATUS_OK) {
        fprintf(stderr, "%s\n", stem_last_error());
        return 1;
    }
    size_t shape[3] = {3, 2, 2};
    float data[12] = {0};
    StemLatent *x = NULL;
    StemLatent *y = NULL;
    if (stem_latent_new(shape, 3, data, &x) != STEM_STATUS_OK ||
        stem_preprocess(x, s, STEM_METHOD_DDPM, 15, 0, stem_stream_id("frame-0"), &y) != STEM_STATUS_OK) {
        fprintf(stderr, "%s\n", stem_last_error());
        return 1;
    }
    double ab = 0.0;
    stem_schedule_alpha_bar(s, 15, &ab);
    printf("alpha_bar_15=%.12f len=%zu first=%.6f\n", ab, stem_latent_len(y), stem_latent_data(y)[0]);
    if (stem_schedule_alpha_bar(s, 99, &ab) != STEM_STATUS_OUT_OF_RANGE) {
        return 1;
    }
    stem_latent_free(y);
    stem_latent_free(x);
    stem_schedule_free(s);
    return 0;
}
