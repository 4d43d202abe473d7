"""Single-pass max-pool kernels (the numpy formulation needs several full passes)."""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def pool_forward(x, size, stride, oh, ow):
    b = x.shape[0]
    out = np.empty((b, oh, ow), dtype=x.dtype)
    arg = np.empty((b, oh, ow), dtype=np.int16)
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                best = x[n, i * stride, j * stride]
                k_best = 0
                k = 0
                for di in range(size):
                    for dj in range(size):
                        v = x[n, i * stride + di, j * stride + dj]
                        if v > best:
                            best = v
                            k_best = k
                        k += 1
                out[n, i, j] = best
                arg[n, i, j] = k_best
    return out, arg


@numba.njit(cache=True, nogil=True)
def pool_backward(g, arg, size, stride, h, w):
    b, oh, ow = g.shape
    gx = np.zeros((b, h, w), dtype=g.dtype)
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                k = arg[n, i, j]
                gx[n, i * stride + k // size, j * stride + k % size] += g[n, i, j]
    return gx
