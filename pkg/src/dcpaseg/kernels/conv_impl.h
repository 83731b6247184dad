/* Register-blocked valid convolution kernels, instantiated per real type.
 *
 * Include with REAL and FN(name) defined. Every output value is accumulated
 * in a fixed order (bias, then ci, ky, kx ascending) whatever the blocking
 * path, so results do not depend on batch size or tile position.
 */

#define CO_B 8
#define X_B 16
#define TAPS_MAX 9

#include <stdlib.h>

static void FN(conv_fwd)(const REAL *x, const REAL *w, const REAL *b, REAL *y,
                         long N, long C, long H, long W, long Co, long k)
{
    const long Ho = H - k + 1, Wo = W - k + 1;
    const long wstride = C * k * k;
    for (long n = 0; n < N; n++) {
        const REAL *xn = x + n * C * H * W;
        REAL *yn = y + n * Co * Ho * Wo;
        long co = 0;
        for (; co + CO_B <= Co; co += CO_B) {
            for (long yy = 0; yy < Ho; yy++) {
                long x0 = 0;
                /* the last block is shifted left to end flush with the row;
                   recomputed columns get bit-identical values */
                for (long xb = 0; Wo >= X_B && xb < Wo; xb += X_B) {
                    x0 = (xb + X_B <= Wo) ? xb : Wo - X_B;
                    REAL acc[CO_B][X_B];
                    for (int c = 0; c < CO_B; c++)
                        for (int j = 0; j < X_B; j++)
                            acc[c][j] = b[co + c];
                    for (long ci = 0; ci < C; ci++) {
                        for (long ky = 0; ky < k; ky++) {
                            const REAL *xr = xn + (ci * H + yy + ky) * W + x0;
                            const REAL *wr = w + (co * C + ci) * k * k + ky * k;
                            for (long kx = 0; kx < k; kx++) {
                                const REAL w0 = wr[kx];
                                const REAL w1 = wr[wstride + kx];
                                const REAL w2 = wr[2 * wstride + kx];
                                const REAL w3 = wr[3 * wstride + kx];
                                const REAL w4 = wr[4 * wstride + kx];
                                const REAL w5 = wr[5 * wstride + kx];
                                const REAL w6 = wr[6 * wstride + kx];
                                const REAL w7 = wr[7 * wstride + kx];
                                for (int j = 0; j < X_B; j++) {
                                    const REAL xv = xr[kx + j];
                                    acc[0][j] += w0 * xv;
                                    acc[1][j] += w1 * xv;
                                    acc[2][j] += w2 * xv;
                                    acc[3][j] += w3 * xv;
                                    acc[4][j] += w4 * xv;
                                    acc[5][j] += w5 * xv;
                                    acc[6][j] += w6 * xv;
                                    acc[7][j] += w7 * xv;
                                }
                            }
                        }
                    }
                    for (int c = 0; c < CO_B; c++) {
                        REAL *yr = yn + ((co + c) * Ho + yy) * Wo + x0;
                        for (int j = 0; j < X_B; j++)
                            yr[j] = acc[c][j];
                    }
                    x0 = Wo;
                }
                for (; x0 < Wo; x0++) {
                    for (int c = 0; c < CO_B; c++) {
                        REAL s = b[co + c];
                        for (long ci = 0; ci < C; ci++)
                            for (long ky = 0; ky < k; ky++) {
                                const REAL *xr = xn + (ci * H + yy + ky) * W + x0;
                                const REAL *wr = w + ((co + c) * C + ci) * k * k + ky * k;
                                for (long kx = 0; kx < k; kx++)
                                    s += wr[kx] * xr[kx];
                            }
                        yn[((co + c) * Ho + yy) * Wo + x0] = s;
                    }
                }
            }
        }
        for (; co < Co; co++) {
            for (long yy = 0; yy < Ho; yy++) {
                long x0 = 0;
                for (long xb = 0; Wo >= X_B && xb < Wo; xb += X_B) {
                    x0 = (xb + X_B <= Wo) ? xb : Wo - X_B;
                    REAL acc[X_B];
                    for (int j = 0; j < X_B; j++)
                        acc[j] = b[co];
                    for (long ci = 0; ci < C; ci++)
                        for (long ky = 0; ky < k; ky++) {
                            const REAL *xr = xn + (ci * H + yy + ky) * W + x0;
                            const REAL *wr = w + (co * C + ci) * k * k + ky * k;
                            for (long kx = 0; kx < k; kx++) {
                                const REAL w0 = wr[kx];
                                for (int j = 0; j < X_B; j++)
                                    acc[j] += w0 * xr[kx + j];
                            }
                        }
                    REAL *yr = yn + (co * Ho + yy) * Wo + x0;
                    for (int j = 0; j < X_B; j++)
                        yr[j] = acc[j];
                    x0 = Wo;
                }
                for (; x0 < Wo; x0++) {
                    REAL s = b[co];
                    for (long ci = 0; ci < C; ci++)
                        for (long ky = 0; ky < k; ky++) {
                            const REAL *xr = xn + (ci * H + yy + ky) * W + x0;
                            const REAL *wr = w + (co * C + ci) * k * k + ky * k;
                            for (long kx = 0; kx < k; kx++)
                                s += wr[kx] * xr[kx];
                        }
                    yn[(co * Ho + yy) * Wo + x0] = s;
                }
            }
        }
    }
}

#ifndef DCPASEG_DW3_STEP
#define DCPASEG_DW3_STEP
/* One 16-lane step of the paired k == 3 weight gradient. Lanes are summed
 * at the end, so which column a lane holds does not matter. */
#define DW3_STEP(A, B, R0, R1, R2)                                           \
    do {                                                                     \
        const REAL v0 = (R0)[0], v1 = (R0)[1], v2 = (R0)[2];                 \
        const REAL v3 = (R1)[0], v4 = (R1)[1], v5 = (R1)[2];                 \
        const REAL v6 = (R2)[0], v7 = (R2)[1], v8 = (R2)[2];                 \
        acc[0][0][j] += (A) * v0; acc[1][0][j] += (B) * v0;                  \
        acc[0][1][j] += (A) * v1; acc[1][1][j] += (B) * v1;                  \
        acc[0][2][j] += (A) * v2; acc[1][2][j] += (B) * v2;                  \
        acc[0][3][j] += (A) * v3; acc[1][3][j] += (B) * v3;                  \
        acc[0][4][j] += (A) * v4; acc[1][4][j] += (B) * v4;                  \
        acc[0][5][j] += (A) * v5; acc[1][5][j] += (B) * v5;                  \
        acc[0][6][j] += (A) * v6; acc[1][6][j] += (B) * v6;                  \
        acc[0][7][j] += (A) * v7; acc[1][7][j] += (B) * v7;                  \
        acc[0][8][j] += (A) * v8; acc[1][8][j] += (B) * v8;                  \
    } while (0)
#endif

/* dw for output channels co (and co + 1 when `two`) against input channel
 * ci, summed over images [n0, n1). */
static void FN(dw3_pair)(const REAL *x, const REAL *dy, REAL *dw, long n0, long n1,
                         long C, long H, long W, long Co, long co, long ci, int two)
{
    const long Ho = H - 2, Wo = W - 2;
    REAL acc[2][9][X_B];
    for (int t = 0; t < 9; t++)
        for (int j = 0; j < X_B; j++)
            acc[0][t][j] = acc[1][t][j] = 0;
    for (long n = n0; n < n1; n++) {
        const REAL *xn = x + (n * C + ci) * H * W;
        const REAL *dyn0 = dy + (n * Co + co) * Ho * Wo;
        const REAL *dyn1 = two ? dyn0 + Ho * Wo : dyn0;
        for (long yy = 0; yy < Ho; yy++) {
            const REAL *d0 = dyn0 + yy * Wo, *d1 = dyn1 + yy * Wo;
            const REAL *r0 = xn + yy * W, *r1 = r0 + W, *r2 = r1 + W;
            long x0 = 0;
            for (; x0 + X_B <= Wo; x0 += X_B)
                for (int j = 0; j < X_B; j++) {
                    const long p = x0 + j;
                    DW3_STEP(d0[p], d1[p], r0 + p, r1 + p, r2 + p);
                }
            if (x0 == Wo)
                continue;
            if (Wo >= X_B) {
                /* flush-right block; lanes already covered get a zero gradient */
                const long p0 = Wo - X_B, skip = x0 - p0;
                for (int j = 0; j < X_B; j++) {
                    const long p = p0 + j;
                    const REAL a = (j >= skip) ? d0[p] : 0, b = (j >= skip) ? d1[p] : 0;
                    DW3_STEP(a, b, r0 + p, r1 + p, r2 + p);
                }
            } else {
                /* row narrower than one block: zero-padded copies */
                const long m = Wo;
                REAL e0[X_B], e1[X_B], b0[X_B + 2], b1[X_B + 2], b2[X_B + 2];
                for (int j = 0; j < X_B; j++) {
                    e0[j] = (j < m) ? d0[j] : 0;
                    e1[j] = (j < m) ? d1[j] : 0;
                }
                for (int j = 0; j < X_B + 2; j++) {
                    b0[j] = (j < m + 2) ? r0[j] : 0;
                    b1[j] = (j < m + 2) ? r1[j] : 0;
                    b2[j] = (j < m + 2) ? r2[j] : 0;
                }
                for (int j = 0; j < X_B; j++)
                    DW3_STEP(e0[j], e1[j], b0 + j, b1 + j, b2 + j);
            }
        }
    }
    for (int c = 0; c < 1 + two; c++)
        for (int t = 0; t < 9; t++) {
            REAL sacc = 0;
            for (int j = 0; j < X_B; j++)
                sacc += acc[c][t][j];
            dw[((co + c) * C + ci) * 9 + t] += sacc;
        }
}

/* k == 3 weight gradient, output channels in pairs so each input row load
 * feeds 18 accumulators. When the whole batch fits in L2 the accumulators
 * run across all images; otherwise images are the outer loop so one
 * image's planes stay cache-resident while every channel pair visits them. */
#define DW3_L2_BYTES (1536L * 1024L)
static int FN(conv_dw3)(const REAL *x, const REAL *dy, REAL *dw,
                        long N, long C, long H, long W, long Co)
{
    const long Ho = H - 2, Wo = W - 2;
    const long batch_bytes = (long)sizeof(REAL) * N * (C * H * W + Co * Ho * Wo);
    const long n_outer = batch_bytes > DW3_L2_BYTES ? N : 1;
    const long n_inner = N / n_outer;
    for (long nb = 0; nb < n_outer; nb++) {
        for (long co = 0; co < Co; co += 2) {
            const int two = (co + 1 < Co);
            for (long ci = 0; ci < C; ci++)
                FN(dw3_pair)(x, dy, dw, nb * n_inner, (nb + 1) * n_inner, C, H, W, Co, co, ci, two);
        }
    }
    return 0;
}

/* dw[co, ci, ky, kx] += sum_{n, y, x} dy[n, co, y, x] * x[n, ci, y + ky, x + kx]
 * dw must be zeroed by the caller; requires k * k <= TAPS_MAX. */
static void FN(conv_dw)(const REAL *x, const REAL *dy, REAL *dw,
                        long N, long C, long H, long W, long Co, long k)
{
    const long Ho = H - k + 1, Wo = W - k + 1;
    const long taps = k * k;
    if (k == 3 && FN(conv_dw3)(x, dy, dw, N, C, H, W, Co) == 0)
        return;
    for (long co = 0; co < Co; co++) {
        for (long ci = 0; ci < C; ci++) {
            REAL acc[TAPS_MAX][X_B];
            REAL tail[TAPS_MAX];
            for (long t = 0; t < taps; t++) {
                tail[t] = 0;
                for (int j = 0; j < X_B; j++)
                    acc[t][j] = 0;
            }
            for (long n = 0; n < N; n++) {
                const REAL *xn = x + (n * C + ci) * H * W;
                const REAL *dyn = dy + (n * Co + co) * Ho * Wo;
                for (long yy = 0; yy < Ho; yy++) {
                    const REAL *dyr = dyn + yy * Wo;
                    long x0 = 0;
                    if (k == 3) {
                        const REAL *r0 = xn + yy * W, *r1 = r0 + W, *r2 = r1 + W;
                        for (; x0 + X_B <= Wo; x0 += X_B) {
                            for (int j = 0; j < X_B; j++) {
                                const REAL d = dyr[x0 + j];
                                const long p = x0 + j;
                                acc[0][j] += d * r0[p];
                                acc[1][j] += d * r0[p + 1];
                                acc[2][j] += d * r0[p + 2];
                                acc[3][j] += d * r1[p];
                                acc[4][j] += d * r1[p + 1];
                                acc[5][j] += d * r1[p + 2];
                                acc[6][j] += d * r2[p];
                                acc[7][j] += d * r2[p + 1];
                                acc[8][j] += d * r2[p + 2];
                            }
                        }
                        if (x0 < Wo) {
                            /* zero-padded copy of the ragged tail */
                            const long m = Wo - x0;
                            REAL dv[X_B], b0[X_B + 2], b1[X_B + 2], b2[X_B + 2];
                            for (int j = 0; j < X_B; j++)
                                dv[j] = (j < m) ? dyr[x0 + j] : 0;
                            for (int j = 0; j < X_B + 2; j++) {
                                b0[j] = (j < m + 2) ? r0[x0 + j] : 0;
                                b1[j] = (j < m + 2) ? r1[x0 + j] : 0;
                                b2[j] = (j < m + 2) ? r2[x0 + j] : 0;
                            }
                            for (int j = 0; j < X_B; j++) {
                                const REAL d = dv[j];
                                acc[0][j] += d * b0[j];
                                acc[1][j] += d * b0[j + 1];
                                acc[2][j] += d * b0[j + 2];
                                acc[3][j] += d * b1[j];
                                acc[4][j] += d * b1[j + 1];
                                acc[5][j] += d * b1[j + 2];
                                acc[6][j] += d * b2[j];
                                acc[7][j] += d * b2[j + 1];
                                acc[8][j] += d * b2[j + 2];
                            }
                            x0 = Wo;
                        }
                    }
                    for (; x0 + X_B <= Wo; x0 += X_B) {
                        REAL dv[X_B];
                        for (int j = 0; j < X_B; j++)
                            dv[j] = dyr[x0 + j];
                        for (long ky = 0; ky < k; ky++) {
                            const REAL *xr = xn + (yy + ky) * W + x0;
                            for (long kx = 0; kx < k; kx++) {
                                REAL *a = acc[ky * k + kx];
                                for (int j = 0; j < X_B; j++)
                                    a[j] += dv[j] * xr[kx + j];
                            }
                        }
                    }
                    for (; x0 < Wo; x0++) {
                        const REAL d = dyr[x0];
                        for (long ky = 0; ky < k; ky++) {
                            const REAL *xr = xn + (yy + ky) * W + x0;
                            for (long kx = 0; kx < k; kx++)
                                tail[ky * k + kx] += d * xr[kx];
                        }
                    }
                }
            }
            REAL *dwr = dw + (co * C + ci) * taps;
            for (long t = 0; t < taps; t++) {
                REAL s = tail[t];
                for (int j = 0; j < X_B; j++)
                    s += acc[t][j];
                dwr[t] += s;
            }
        }
    }
}
