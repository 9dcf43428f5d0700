# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP cross-entropy loss and gradient.

Samples are processed in fixed blocks laid out feature-major, so the
innermost loops run over contiguous samples and auto-vectorize.  Block
partial sums are folded into the totals in a fixed order, so results are
bit-reproducible for a given input.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, exp, log

cnp.import_array()

DEF BLOCK = 64


def mlp_loss_grad(const double[::1] params, const double[:, ::1] X,
                  const long long[::1] y, const long long[::1] sizes,
                  int activation, bint want_grad=True):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t n_layers = sizes.shape[0] - 1
    cdef Py_ssize_t n_params = params.shape[0]
    cdef Py_ssize_t c_out = sizes[n_layers]
    cdef Py_ssize_t l, i, j, s, s0, nb, n_in, n_out, w_off, b_off
    cdef Py_ssize_t total = 0, max_w = 0, off = 0, aoff = 0
    cdef double loss = 0.0, m, se, w, acc, blk_loss
    cdef long long label

    for l in range(n_layers + 1):
        total += sizes[l]
        if sizes[l] > max_w:
            max_w = sizes[l]
    if X.shape[1] != sizes[0]:
        raise ValueError("feature width does not match input size")

    w_offs_np = np.empty(n_layers, dtype=np.intp)
    a_offs_np = np.empty(n_layers + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] w_offs = w_offs_np
    cdef Py_ssize_t[::1] a_offs = a_offs_np
    for l in range(n_layers):
        w_offs[l] = off
        off += sizes[l] * sizes[l + 1] + sizes[l + 1]
        a_offs[l] = aoff
        aoff += sizes[l]
    a_offs[n_layers] = aoff
    if off != n_params:
        raise ValueError("parameter length does not match layer sizes")

    acts_np = np.zeros(total * BLOCK, dtype=np.float64)
    delta_np = np.zeros(max_w * BLOCK, dtype=np.float64)
    back_np = np.zeros(max_w * BLOCK, dtype=np.float64)
    grad_np = np.zeros(n_params, dtype=np.float64)
    cdef double[::1] acts_mv = acts_np
    cdef double[::1] delta_mv = delta_np
    cdef double[::1] back_mv = back_np
    cdef double[::1] grad_mv = grad_np
    cdef double* A = &acts_mv[0]
    cdef double* D = &delta_mv[0]
    cdef double* Bk = &back_mv[0]
    cdef double* G = &grad_mv[0]
    cdef const double* P = &params[0]
    cdef double* z
    cdef double* a
    cdef double* dr
    cdef double* br
    cdef double* tmp

    for s0 in range(0, n, BLOCK):
        nb = BLOCK if s0 + BLOCK <= n else n - s0
        for i in range(sizes[0]):
            for s in range(nb):
                A[i * BLOCK + s] = X[s0 + s, i]

        for l in range(n_layers):
            n_in = sizes[l]
            n_out = sizes[l + 1]
            w_off = w_offs[l]
            b_off = w_off + n_in * n_out
            for j in range(n_out):
                z = A + (a_offs[l + 1] + j) * BLOCK
                w = P[b_off + j]
                for s in range(nb):
                    z[s] = w
                for i in range(n_in):
                    a = A + (a_offs[l] + i) * BLOCK
                    w = P[w_off + i * n_out + j]
                    for s in range(nb):
                        z[s] += a[s] * w
                if l < n_layers - 1:
                    if activation == 0:
                        for s in range(nb):
                            z[s] = tanh(z[s])
                    else:
                        for s in range(nb):
                            if z[s] < 0.0:
                                z[s] = 0.0

        # softmax cross-entropy; D holds dL/dlogits for the block
        z = A + a_offs[n_layers] * BLOCK
        blk_loss = 0.0
        for s in range(nb):
            label = y[s0 + s]
            if label < 0 or label >= c_out:
                raise ValueError("label out of range")
            m = z[s]
            for j in range(1, c_out):
                if z[j * BLOCK + s] > m:
                    m = z[j * BLOCK + s]
            se = 0.0
            for j in range(c_out):
                se = se + exp(z[j * BLOCK + s] - m)
            blk_loss = blk_loss + (m + log(se) - z[label * BLOCK + s])
            if want_grad:
                for j in range(c_out):
                    D[j * BLOCK + s] = exp(z[j * BLOCK + s] - m) / se
                D[label * BLOCK + s] -= 1.0
        loss = loss + blk_loss
        if not want_grad:
            continue

        for l in range(n_layers - 1, -1, -1):
            n_in = sizes[l]
            n_out = sizes[l + 1]
            w_off = w_offs[l]
            b_off = w_off + n_in * n_out
            for j in range(n_out):
                dr = D + j * BLOCK
                acc = 0.0
                for s in range(nb):
                    acc = acc + dr[s]
                G[b_off + j] += acc
            for i in range(n_in):
                a = A + (a_offs[l] + i) * BLOCK
                for j in range(n_out):
                    dr = D + j * BLOCK
                    acc = 0.0
                    for s in range(nb):
                        acc = acc + a[s] * dr[s]
                    G[w_off + i * n_out + j] += acc
            if l == 0:
                break
            for i in range(n_in):
                br = Bk + i * BLOCK
                a = A + (a_offs[l] + i) * BLOCK
                for s in range(nb):
                    br[s] = 0.0
                for j in range(n_out):
                    dr = D + j * BLOCK
                    w = P[w_off + i * n_out + j]
                    for s in range(nb):
                        br[s] += dr[s] * w
                if activation == 0:
                    for s in range(nb):
                        br[s] = br[s] * (1.0 - a[s] * a[s])
                else:
                    for s in range(nb):
                        if a[s] <= 0.0:
                            br[s] = 0.0
            tmp = D
            D = Bk
            Bk = tmp

    if n > 0:
        loss = loss / n
        if want_grad:
            for i in range(n_params):
                G[i] = G[i] / n
    return loss, (grad_np if want_grad else None)
