#include <stdio.h>
#include <stdlib.h>

#include "nrdiff.h"

#define CHECK(call)                                                     \
    do {                                                                \
        NrdStatus s_ = (call);                                          \
        if (s_ != NRD_STATUS_OK) {                                      \
            char msg_[256];                                             \
            nrd_last_error(msg_, sizeof msg_);                          \
            fprintf(stderr, "%s failed (%d): %s\n", #call, s_, msg_);   \
            return 1;                                                   \
        }                                                               \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke MODEL\n");
        return 2;
    }
    NrdModel *model = NULL;
    NrdBank *bank = NULL;
    NrdSchedule *schedule = NULL;
    size_t c, h, w;
    CHECK(nrd_model_load(argv[1], &model));
    CHECK(nrd_model_shape(model, &c, &h, &w));
    CHECK(nrd_model_schedule(model, &schedule));
    CHECK(nrd_bank_build(7, 32, c, h, w, &bank));

    size_t d = c * h * w;
    double *image = malloc(d * sizeof *image);
    unsigned char *labels = malloc(h * w);
    for (size_t i = 0; i < d; i++) image[i] = (double)(i % 17) / 8.0 - 1.0;
    for (size_t i = 0; i < h * w; i++) labels[i] = (unsigned char)((i / w) * 5 / h);

    size_t need = 0, index = 0;
    if (nrd_tx(bank, schedule, NULL, image, d, labels, h * w, 5, 0.25, NULL, 0, &need, &index)
        != NRD_STATUS_BUFFER_TOO_SMALL) {
        fprintf(stderr, "size query did not report a short buffer\n");
        return 1;
    }
    unsigned char *packet = malloc(need);
    size_t len = 0;
    CHECK(nrd_tx(bank, schedule, NULL, image, d, labels, h * w, 5, 0.25, packet, need, &len, &index));

    size_t decoded = 0, n = 0;
    CHECK(nrd_packet_decode(packet, len, NULL, &decoded, &n));
    if (decoded != index || n != 32) {
        fprintf(stderr, "decoded index %zu of %zu, sent %zu of 32\n", decoded, n, index);
        return 1;
    }
    double *out = malloc(d * sizeof *out);
    size_t written = 0;
    CHECK(nrd_rx(model, bank, NULL, packet, len, 3, out, d, &written, &decoded));
    for (size_t i = 0; i < written; i++) {
        if (!(out[i] >= -1.0 && out[i] <= 1.0)) {
            fprintf(stderr, "pixel %zu out of range: %f\n", i, out[i]);
            return 1;
        }
    }
    printf("ok %s index=%zu bytes=%zu\n", nrd_version(), index, len);

    free(out);
    free(packet);
    free(labels);
    free(image);
    nrd_bank_free(bank);
    nrd_schedule_free(schedule);
    nrd_model_free(model);
    return 0;
}
