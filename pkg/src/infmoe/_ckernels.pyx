# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled single-pass masked-FFN forward.

Strategy: tokens are processed in blocks; within a block the retained
(token, neuron) pairs are bucketed by neuron *tile* (16 consecutive rows),
which keeps a tile's weight rows hot in L1 while the bucket's entries
arrive grouped by token, so each token activation row and each output row
is streamed once per tile instead of once per retained entry. Three
vectorizable phases per block: hidden dot products, batched activation
times retained mask value, grouped accumulation into the output. The dot
and accumulate loops process in-group entries in pairs, halving row
traffic again.

Work is proportional to the number of retained hidden units, unlike the
two-pass reference which always materializes the full hidden layer.
"""

from libc.stdlib cimport free, malloc


cdef extern from *:
    """
    #include <math.h>

    static void imoe_gelu_vec_f64(double* v, const double* m, long n) {
        long i;
        #pragma omp simd
        for (i = 0; i < n; i++) {
            double u = 0.7978845608028654 * (v[i] + 0.044715 * v[i]*v[i]*v[i]);
            v[i] = 0.5 * v[i] * (1.0 + tanh(u)) * m[i];
        }
    }
    static double imoe_dot_f64(const double* restrict w, const double* restrict x, long n) {
        double s = 0.0;
        long i;
        #pragma omp simd reduction(+:s)
        for (i = 0; i < n; i++) s += w[i]*x[i];
        return s;
    }
    static void imoe_dot2_f64(const double* restrict w0, const double* restrict w1,
                              const double* restrict x, long n, double* restrict out) {
        double s0 = 0.0, s1 = 0.0;
        long i;
        #pragma omp simd reduction(+:s0, s1)
        for (i = 0; i < n; i++) { s0 += w0[i]*x[i]; s1 += w1[i]*x[i]; }
        out[0] = s0; out[1] = s1;
    }
    static void imoe_axpy_f64(double* restrict y, const double* restrict w, double h, long n) {
        long i;
        #pragma omp simd
        for (i = 0; i < n; i++) y[i] += w[i]*h;
    }
    static void imoe_axpy2_f64(double* restrict y, const double* restrict w0, double h0,
                               const double* restrict w1, double h1, long n) {
        long i;
        #pragma omp simd
        for (i = 0; i < n; i++) y[i] += w0[i]*h0 + w1[i]*h1;
    }

    static void imoe_gelu_vec_f32(float* v, const float* m, long n) {
        long i;
        #pragma omp simd
        for (i = 0; i < n; i++) {
            float u = 0.7978845608028654f * (v[i] + 0.044715f * v[i]*v[i]*v[i]);
            v[i] = 0.5f * v[i] * (1.0f + tanhf(u)) * m[i];
        }
    }
    static float imoe_dot_f32(const float* restrict w, const float* restrict x, long n) {
        float s = 0.0f;
        long i;
        #pragma omp simd reduction(+:s)
        for (i = 0; i < n; i++) s += w[i]*x[i];
        return s;
    }
    static void imoe_dot2_f32(const float* restrict w0, const float* restrict w1,
                              const float* restrict x, long n, float* restrict out) {
        float s0 = 0.0f, s1 = 0.0f;
        long i;
        #pragma omp simd reduction(+:s0, s1)
        for (i = 0; i < n; i++) { s0 += w0[i]*x[i]; s1 += w1[i]*x[i]; }
        out[0] = s0; out[1] = s1;
    }
    static void imoe_axpy_f32(float* restrict y, const float* restrict w, float h, long n) {
        long i;
        #pragma omp simd
        for (i = 0; i < n; i++) y[i] += w[i]*h;
    }
    static void imoe_axpy2_f32(float* restrict y, const float* restrict w0, float h0,
                               const float* restrict w1, float h1, long n) {
        long i;
        #pragma omp simd
        for (i = 0; i < n; i++) y[i] += w0[i]*h0 + w1[i]*h1;
    }
    """
    void imoe_gelu_vec_f64(double* v, const double* m, long n) nogil
    double imoe_dot_f64(const double* w, const double* x, long n) nogil
    void imoe_dot2_f64(const double* w0, const double* w1, const double* x,
                       long n, double* out) nogil
    void imoe_axpy_f64(double* y, const double* w, double h, long n) nogil
    void imoe_axpy2_f64(double* y, const double* w0, double h0,
                        const double* w1, double h1, long n) nogil
    void imoe_gelu_vec_f32(float* v, const float* m, long n) nogil
    float imoe_dot_f32(const float* w, const float* x, long n) nogil
    void imoe_dot2_f32(const float* w0, const float* w1, const float* x,
                       long n, float* out) nogil
    void imoe_axpy_f32(float* y, const float* w, float h, long n) nogil
    void imoe_axpy2_f32(float* y, const float* w0, float h0,
                        const float* w1, float h1, long n) nogil


DEF DEFAULT_TOKEN_BLOCK = 128
DEF NEURON_TILE = 16


def extract_indices_f64(double[:, ::1] mask, int[:, ::1] idx, double[:, ::1] mvals):
    """Gather each row's nonzero columns and values; rows must hold exactly
    idx.shape[1] nonzeros."""
    cdef Py_ssize_t T = mask.shape[0], d = mask.shape[1], A = idx.shape[1]
    cdef Py_ssize_t t, j, k
    cdef int bad = -1
    with nogil:
        for t in range(T):
            k = 0
            for j in range(d):
                if mask[t, j] != 0.0:
                    if k < A:
                        idx[t, k] = <int> j
                        mvals[t, k] = mask[t, j]
                    k += 1
            if k != A:
                bad = <int> t
                break
    if bad >= 0:
        raise ValueError(f"row {bad} retains a different number of entries")


def extract_indices_f32(float[:, ::1] mask, int[:, ::1] idx, float[:, ::1] mvals):
    """float32 twin of extract_indices_f64."""
    cdef Py_ssize_t T = mask.shape[0], d = mask.shape[1], A = idx.shape[1]
    cdef Py_ssize_t t, j, k
    cdef int bad = -1
    with nogil:
        for t in range(T):
            k = 0
            for j in range(d):
                if mask[t, j] != 0.0:
                    if k < A:
                        idx[t, k] = <int> j
                        mvals[t, k] = mask[t, j]
                    k += 1
            if k != A:
                bad = <int> t
                break
    if bad >= 0:
        raise ValueError(f"row {bad} retains a different number of entries")


def fused_masked_ffn_f64(double[:, ::1] x, double[:, ::1] w1, double[:, ::1] w2t,
                         double[:, ::1] mvals, int[:, ::1] idx, double[:, ::1] out,
                         Py_ssize_t token_block=DEFAULT_TOKEN_BLOCK):
    """out[t] = sum_a gelu(w1[idx[t,a]] . x[t]) * mvals[t,a] * w2t[idx[t,a]].

    ``idx`` lists the retained hidden indices per token, ``mvals`` the
    matching retained mask values, ``w2t`` is the output projection stored
    neuron-major ([d_ff, d_out]).
    """
    cdef Py_ssize_t T = x.shape[0], din = x.shape[1]
    cdef Py_ssize_t dff = w1.shape[0], dout = w2t.shape[1], A = idx.shape[1]
    cdef Py_ssize_t ntile = (dff + NEURON_TILE - 1) // NEURON_TILE
    cdef Py_ssize_t t0, t1, t, a, o, j, i, e, g1, tile
    cdef long n
    cdef double pair[2]
    if token_block < 1:
        token_block = DEFAULT_TOKEN_BLOCK
    cdef int* cnt = <int*> malloc(ntile * sizeof(int))
    cdef int* start = <int*> malloc((ntile + 1) * sizeof(int))
    cdef int* toks = <int*> malloc(token_block * A * sizeof(int))
    cdef int* cols = <int*> malloc(token_block * A * sizeof(int))
    cdef double* hval = <double*> malloc(token_block * A * sizeof(double))
    cdef double* mval = <double*> malloc(token_block * A * sizeof(double))
    if cnt == NULL or start == NULL or toks == NULL or cols == NULL \
            or hval == NULL or mval == NULL:
        free(cnt); free(start); free(toks); free(cols); free(hval); free(mval)
        raise MemoryError()
    with nogil:
        t0 = 0
        while t0 < T:
            t1 = t0 + token_block
            if t1 > T:
                t1 = T
            n = <long>((t1 - t0) * A)
            for j in range(ntile):
                cnt[j] = 0
            for t in range(t0, t1):
                for a in range(A):
                    cnt[idx[t, a] / NEURON_TILE] += 1
            start[0] = 0
            for j in range(ntile):
                start[j + 1] = start[j] + cnt[j]
                cnt[j] = start[j]
            for t in range(t0, t1):
                for o in range(dout):
                    out[t, o] = 0.0
                for a in range(A):
                    j = idx[t, a]
                    tile = j / NEURON_TILE
                    toks[cnt[tile]] = <int> t
                    cols[cnt[tile]] = <int> j
                    mval[cnt[tile]] = mvals[t, a]
                    cnt[tile] += 1
            # tile buckets hold entries in token order: share each x row
            # across the token's in-tile neuron pair
            for tile in range(ntile):
                i = start[tile]
                e = start[tile + 1]
                while i < e:
                    t = toks[i]
                    g1 = i
                    while g1 < e and toks[g1] == t:
                        g1 += 1
                    while i + 2 <= g1:
                        imoe_dot2_f64(&w1[cols[i], 0], &w1[cols[i + 1], 0],
                                      &x[t, 0], din, pair)
                        hval[i] = pair[0]
                        hval[i + 1] = pair[1]
                        i += 2
                    if i < g1:
                        hval[i] = imoe_dot_f64(&w1[cols[i], 0], &x[t, 0], din)
                        i += 1
            imoe_gelu_vec_f64(hval, mval, n)
            for tile in range(ntile):
                i = start[tile]
                e = start[tile + 1]
                while i < e:
                    t = toks[i]
                    g1 = i
                    while g1 < e and toks[g1] == t:
                        g1 += 1
                    while i + 2 <= g1:
                        imoe_axpy2_f64(&out[t, 0], &w2t[cols[i], 0], hval[i],
                                       &w2t[cols[i + 1], 0], hval[i + 1], dout)
                        i += 2
                    if i < g1:
                        imoe_axpy_f64(&out[t, 0], &w2t[cols[i], 0], hval[i], dout)
                        i += 1
            t0 = t1
    free(cnt); free(start); free(toks); free(cols); free(hval); free(mval)


def fused_masked_ffn_f32(float[:, ::1] x, float[:, ::1] w1, float[:, ::1] w2t,
                         float[:, ::1] mvals, int[:, ::1] idx, float[:, ::1] out,
                         Py_ssize_t token_block=DEFAULT_TOKEN_BLOCK):
    """float32 twin of fused_masked_ffn_f64."""
    cdef Py_ssize_t T = x.shape[0], din = x.shape[1]
    cdef Py_ssize_t dff = w1.shape[0], dout = w2t.shape[1], A = idx.shape[1]
    cdef Py_ssize_t ntile = (dff + NEURON_TILE - 1) // NEURON_TILE
    cdef Py_ssize_t t0, t1, t, a, o, j, i, e, g1, tile
    cdef long n
    cdef float pair[2]
    if token_block < 1:
        token_block = DEFAULT_TOKEN_BLOCK
    cdef int* cnt = <int*> malloc(ntile * sizeof(int))
    cdef int* start = <int*> malloc((ntile + 1) * sizeof(int))
    cdef int* toks = <int*> malloc(token_block * A * sizeof(int))
    cdef int* cols = <int*> malloc(token_block * A * sizeof(int))
    cdef float* hval = <float*> malloc(token_block * A * sizeof(float))
    cdef float* mval = <float*> malloc(token_block * A * sizeof(float))
    if cnt == NULL or start == NULL or toks == NULL or cols == NULL \
            or hval == NULL or mval == NULL:
        free(cnt); free(start); free(toks); free(cols); free(hval); free(mval)
        raise MemoryError()
    with nogil:
        t0 = 0
        while t0 < T:
            t1 = t0 + token_block
            if t1 > T:
                t1 = T
            n = <long>((t1 - t0) * A)
            for j in range(ntile):
                cnt[j] = 0
            for t in range(t0, t1):
                for a in range(A):
                    cnt[idx[t, a] / NEURON_TILE] += 1
            start[0] = 0
            for j in range(ntile):
                start[j + 1] = start[j] + cnt[j]
                cnt[j] = start[j]
            for t in range(t0, t1):
                for o in range(dout):
                    out[t, o] = 0.0
                for a in range(A):
                    j = idx[t, a]
                    tile = j / NEURON_TILE
                    toks[cnt[tile]] = <int> t
                    cols[cnt[tile]] = <int> j
                    mval[cnt[tile]] = mvals[t, a]
                    cnt[tile] += 1
            for tile in range(ntile):
                i = start[tile]
                e = start[tile + 1]
                while i < e:
                    t = toks[i]
                    g1 = i
                    while g1 < e and toks[g1] == t:
                        g1 += 1
                    while i + 2 <= g1:
                        imoe_dot2_f32(&w1[cols[i], 0], &w1[cols[i + 1], 0],
                                      &x[t, 0], din, pair)
                        hval[i] = pair[0]
                        hval[i + 1] = pair[1]
                        i += 2
                    if i < g1:
                        hval[i] = imoe_dot_f32(&w1[cols[i], 0], &x[t, 0], din)
                        i += 1
            imoe_gelu_vec_f32(hval, mval, n)
            for tile in range(ntile):
                i = start[tile]
                e = start[tile + 1]
                while i < e:
                    t = toks[i]
                    g1 = i
                    while g1 < e and toks[g1] == t:
                        g1 += 1
                    while i + 2 <= g1:
                        imoe_axpy2_f32(&out[t, 0], &w2t[cols[i], 0], hval[i],
                                       &w2t[cols[i + 1], 0], hval[i + 1], dout)
                        i += 2
                    if i < g1:
                        imoe_axpy_f32(&out[t, 0], &w2t[cols[i], 0], hval[i], dout)
                        i += 1
            t0 = t1
    free(cnt); free(start); free(toks); free(cols); free(hval); free(mval)
