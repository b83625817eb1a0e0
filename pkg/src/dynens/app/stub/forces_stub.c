/* Tiny stand-in simulation: forces_stub <particles> <steps> [sleep_seconds]
 *
 * Optionally sleeps (to model a long run), then writes forces.stat in the
 * working directory, one "step energy" row per step. The last value on the
 * last line is the final energy a caller treats as the simulation output.
 */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <time.h>

int main(int argc, char **argv) {
    long particles = argc > 1 ? atol(argv[1]) : 100;
    long steps = argc > 2 ? atol(argv[2]) : 10;
    double sleep_s = argc > 3 ? atof(argv[3]) : 0.0;

    if (particles < 1 || steps < 1) {
        fprintf(stderr, "usage: %s particles steps [sleep_seconds]\n", argv[0]);
        return 2;
    }
    if (sleep_s > 0) {
        struct timespec ts;
        ts.tv_sec = (time_t)sleep_s;
        ts.tv_nsec = (long)((sleep_s - (double)ts.tv_sec) * 1e9);
        nanosleep(&ts, NULL);
    }

    FILE *fp = fopen("forces.stat", "w");
    if (!fp) {
        perror("forces.stat");
        return 1;
    }
    double energy = 0.0;
    for (long s = 0; s < steps; s++) {
        for (long p = 0; p < particles; p++)
            energy += sin(1e-3 * (double)((p + 1) * (s + 1)));
        fprintf(fp, "%ld %.10f\n", s, energy);
    }
    fclose(fp);
    return 0;
}
