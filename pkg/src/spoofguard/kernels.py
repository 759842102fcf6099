"""JIT-compiled inner loops for convolution and dense layers.

All kernels accumulate each output element in a fixed sequential order
(bias, then channel, kernel-row, kernel-col), so results are bit-exact
against a naive Python loop with the same ordering and independent of
thread count. The stride-1 paths slice rows contiguously so LLVM can
vectorize the column loop without reassociating any sum.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def conv2d_forward(xp, w, b, stride, out):
    # xp: padded input (N,C,Hp,Wp); w: (F,C,kh,kw); out: (N,F,Ho,Wo)
    N, F, Ho, Wo = out.shape
    C, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for nf in prange(N * F):
        n = nf // F
        f = nf % F
        for i in range(Ho):
            orow = out[n, f, i]
            for j in range(Wo):
                orow[j] = b[f]
            if stride == 1:
                for c in range(C):
                    for ki in range(kh):
                        xrow = xp[n, c, i + ki]
                        for kj in range(kw):
                            wv = w[f, c, ki, kj]
                            xoff = xrow[kj : kj + Wo]
                            for j in range(Wo):
                                orow[j] += xoff[j] * wv
            else:
                for c in range(C):
                    for ki in range(kh):
                        xrow = xp[n, c, stride * i + ki]
                        for kj in range(kw):
                            wv = w[f, c, ki, kj]
                            for j in range(Wo):
                                orow[j] += xrow[stride * j + kj] * wv


@njit(parallel=True, cache=True)
def conv2d_backward_dx(dout, w, stride, dxp):
    # dxp: gradient w.r.t. the padded input, zero-initialized here.
    N, F, Ho, Wo = dout.shape
    C, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    Hp, Wp = dxp.shape[2], dxp.shape[3]
    for nc in prange(N * C):
        n = nc // C
        c = nc % C
        for h in range(Hp):
            row = dxp[n, c, h]
            for j in range(Wp):
                row[j] = 0.0
        if stride == 1:
            for f in range(F):
                for ki in range(kh):
                    for i2 in range(Ho):
                        drow = dxp[n, c, i2 + ki]
                        dorow = dout[n, f, i2]
                        for kj in range(kw):
                            wv = w[f, c, ki, kj]
                            dst = drow[kj : kj + Wo]
                            for j in range(Wo):
                                dst[j] += dorow[j] * wv
        else:
            for f in range(F):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[f, c, ki, kj]
                        for i2 in range(Ho):
                            base = dxp[n, c, stride * i2 + ki]
                            dorow = dout[n, f, i2]
                            for j2 in range(Wo):
                                base[stride * j2 + kj] += dorow[j2] * wv


@njit(parallel=True, cache=True)
def conv2d_backward_dw(dout, xp, stride, dw):
    F, C, kh, kw = dw.shape
    N, _, Ho, Wo = dout.shape
    for fc in prange(F * C):
        f = fc // C
        c = fc % C
        rowacc = np.zeros_like(dout[0, 0, 0])
        for ki in range(kh):
            for kj in range(kw):
                for j in range(Wo):
                    rowacc[j] = 0.0
                for n in range(N):
                    for i2 in range(Ho):
                        dorow = dout[n, f, i2]
                        xrow = xp[n, c, stride * i2 + ki]
                        if stride == 1:
                            xoff = xrow[kj : kj + Wo]
                            for j in range(Wo):
                                rowacc[j] += dorow[j] * xoff[j]
                        else:
                            for j in range(Wo):
                                rowacc[j] += dorow[j] * xrow[stride * j + kj]
                acc = 0.0
                for j in range(Wo):
                    acc += rowacc[j]
                dw[f, c, ki, kj] = acc


@njit(parallel=True, cache=True)
def conv2d_backward_db(dout, db):
    N, F, Ho, Wo = dout.shape
    for f in prange(F):
        acc = 0.0
        for n in range(N):
            for i in range(Ho):
                dorow = dout[n, f, i]
                for j in range(Wo):
                    acc += dorow[j]
        db[f] = acc


@njit(parallel=True, cache=True)
def dense_forward(x, w, b, out):
    # x: (N,D); w: (D,K); out: (N,K)
    N, D = x.shape
    K = w.shape[1]
    for n in prange(N):
        orow = out[n]
        for k in range(K):
            orow[k] = b[k]
        for d in range(D):
            xv = x[n, d]
            wrow = w[d]
            for k in range(K):
                orow[k] += xv * wrow[k]


@njit(parallel=True, cache=True)
def dense_backward_dx(dout, w, dx):
    N, K = dout.shape
    D = w.shape[0]
    for n in prange(N):
        dorow = dout[n]
        for d in range(D):
            acc = 0.0
            wrow = w[d]
            for k in range(K):
                acc += dorow[k] * wrow[k]
            dx[n, d] = acc


@njit(parallel=True, cache=True)
def dense_backward_dw(x, dout, dw):
    N, D = x.shape
    K = dout.shape[1]
    for d in prange(D):
        dwrow = dw[d]
        for k in range(K):
            dwrow[k] = 0.0
        for n in range(N):
            xv = x[n, d]
            dorow = dout[n]
            for k in range(K):
                dwrow[k] += xv * dorow[k]


@njit(parallel=True, cache=True)
def dense_backward_db(dout, db):
    N, K = dout.shape
    for k in prange(K):
        acc = 0.0
        for n in range(N):
            acc += dout[n, k]
        db[k] = acc
