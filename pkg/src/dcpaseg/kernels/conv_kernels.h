#ifndef DCPASEG_CONV_KERNELS_H
#define DCPASEG_CONV_KERNELS_H

/* Subnormal floats take a microcode path that is ~100x slower. Late in
 * training the output gradients are full of them, so kernels flush them to
 * zero while they run and then restore the caller's MXCSR. */
#if defined(__SSE2__)
#include <xmmintrin.h>
static inline unsigned int ftz_begin(void)
{
    unsigned int old = _mm_getcsr();
    _mm_setcsr(old | 0x8040u); /* FTZ | DAZ */
    return old;
}
static inline void ftz_end(unsigned int old) { _mm_setcsr(old); }
#else
static inline unsigned int ftz_begin(void) { return 0; }
static inline void ftz_end(unsigned int old) { (void)old; }
#endif

#define REAL float
#define FN(name) name##_f32
#include "conv_impl.h"
#undef REAL
#undef FN

#undef CO_B
#undef X_B
#undef TAPS_MAX
#undef DW3_L2_BYTES

#define REAL double
#define FN(name) name##_f64
#include "conv_impl.h"
#undef REAL
#undef FN

#endif
