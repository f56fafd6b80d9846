# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Bit-packed GF(2) Toeplitz products.

Bits are packed LSB-first into little-endian 64-bit words. Row ``i`` of the
product is the XOR, over the set bits ``j`` of the input, of bit
``i + n - 1 - j`` of the diagonal sequence. Windows are accumulated per
bit-shift residue without shifting, and shifted once at the end.
"""
import numpy as np
from libc.stdint cimport uint64_t


def toeplitz_words(const uint64_t[::1] diag, const unsigned char[::1] x, Py_ssize_t m):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t mw = (m + 63) >> 6
    if n == 0 or m == 0:
        return np.zeros(mw, dtype=np.uint64)
    if diag.shape[0] < ((n - 1) >> 6) + mw + 1:
        raise ValueError("diagonal buffer too short")
    acc = np.zeros((64, mw + 1), dtype=np.uint64)
    cdef uint64_t[:, ::1] A = acc
    cdef Py_ssize_t j, s, base, r, w
    cdef uint64_t* row
    cdef const uint64_t* src
    for j in range(n):
        if x[j]:
            s = n - 1 - j
            base = s >> 6
            r = s & 63
            row = &A[r, 0]
            src = &diag[base]
            for w in range(mw + 1):
                row[w] ^= src[w]
    out = np.zeros(mw, dtype=np.uint64)
    cdef uint64_t[::1] Y = out
    for w in range(mw):
        Y[w] = A[0, w]
    for r in range(1, 64):
        for w in range(mw):
            Y[w] ^= (A[r, w] >> r) | (A[r, w + 1] << (64 - r))
    return out
