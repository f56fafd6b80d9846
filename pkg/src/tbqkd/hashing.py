"""Toeplitz hashing over GF(2).

Used for privacy amplification, the error-correction syndrome and the
correctness tag. Bit strings are ``uint8`` arrays of 0/1.

Two interchangeable backends compute the same product:

* ``compiled``: bit-packed XOR accumulation in the Cython module
  ``tbqkd._gf2`` (built at install time when a compiler is available);
* ``numpy``: integer convolution through the FFT, reduced mod 2.

The preferred backend is chosen at import: compiled if it imports, numpy
otherwise. Setting ``TBQKD_PURE_PYTHON=1`` forces the numpy backend. The
packed kernel costs O(n*m/64) against the FFT's O(n log n), so with no
explicit ``backend`` argument outputs longer than ``COMPILED_MAX_OUT`` bits
go through the FFT even when the compiled module is present.
"""
from __future__ import annotations

import os

import numpy as np
from scipy.signal import fftconvolve

try:
    if os.environ.get("TBQKD_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _gf2
except ImportError:
    _gf2 = None

BACKEND = "compiled" if _gf2 is not None else "numpy"

# Measured crossover of the two backends (see benchmarks/bench_toeplitz.py).
COMPILED_MAX_OUT = 1 << 16

# FFT chunk length: partial sums stay far below float64's exact-integer range.
_FFT_CHUNK = 1 << 21


def available_backends() -> tuple[str, ...]:
    return ("compiled", "numpy") if _gf2 is not None else ("numpy",)


def select_backend(out_len: int) -> str:
    """Backend used when the caller does not name one."""
    if BACKEND == "compiled" and out_len <= COMPILED_MAX_OUT:
        return "compiled"
    return "numpy"


def as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if arr.size and arr.max() > 1:
        raise ValueError("bit strings must contain only 0 and 1")
    return np.ascontiguousarray(arr)


def pack_bits(bits) -> bytes:
    """Big-endian-within-byte packing, the on-disk and on-wire convention."""
    return np.packbits(as_bits(bits), bitorder="big").tobytes()


def unpack_bits(data: bytes, nbits: int) -> np.ndarray:
    arr = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
    if arr.size < nbits:
        raise ValueError("not enough bytes for the requested bit count")
    return arr[:nbits].copy()


def expand_seed(seed: int, nbits: int) -> np.ndarray:
    """Deterministically expand a 64-bit public seed into ``nbits`` bits."""
    rng = np.random.Generator(np.random.PCG64(seed))
    raw = rng.bytes((nbits + 7) // 8)
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:nbits].copy()


def _diagonal(seed: np.ndarray, m: int) -> np.ndarray:
    """Seed rearranged so that entry [i, j] of the matrix is diag[i - j + n - 1].

    The first column is ``seed[:m]``, the first row is ``seed[m-1:]``.
    """
    return np.concatenate([seed[m:][::-1], seed[:m]])


def _toeplitz_numpy(x: np.ndarray, diag: np.ndarray, m: int) -> np.ndarray:
    n = x.size
    y = np.zeros(m, dtype=np.uint8)
    d = diag.astype(np.float64)
    for c0 in range(0, n, _FFT_CHUNK):
        c1 = min(n, c0 + _FFT_CHUNK)
        xc = x[c0:c1].astype(np.float64)
        if not xc.any():
            continue
        length = c1 - c0
        seg = d[n - c1: n - c1 + length + m - 1]
        conv = fftconvolve(seg, xc)[length - 1: length - 1 + m]
        y ^= (np.rint(conv).astype(np.int64) & 1).astype(np.uint8)
    return y


def _toeplitz_compiled(x: np.ndarray, diag: np.ndarray, m: int) -> np.ndarray:
    n = x.size
    mw = (m + 63) // 64
    nwords = ((n - 1) >> 6) + mw + 1
    packed = np.zeros(nwords * 8, dtype=np.uint8)
    raw = np.packbits(diag, bitorder="little")
    packed[:raw.size] = raw
    words = _gf2.toeplitz_words(packed.view("<u8"), x, m)
    out = np.unpackbits(words.view(np.uint8), bitorder="little")
    return out[:m].copy()


def toeplitz_hash(bits, seed, out_len: int, backend: str | None = None) -> np.ndarray:
    """``T @ bits`` over GF(2) for the ``out_len x len(bits)`` Toeplitz matrix of ``seed``.

    The matrix's first column is ``seed[:out_len]`` and its first row is
    ``seed[out_len-1:]``, so ``seed`` must hold ``len(bits) + out_len - 1`` bits.
    """
    x = as_bits(bits)
    s = as_bits(seed)
    n = x.size
    if out_len < 0 or out_len > n:
        raise ValueError(f"out_len must lie in [0, {n}], got {out_len}")
    if out_len == 0:
        return np.zeros(0, dtype=np.uint8)
    if s.size != n + out_len - 1:
        raise ValueError(f"seed must hold {n + out_len - 1} bits, got {s.size}")
    backend = backend or select_backend(out_len)
    diag = _diagonal(s, out_len)
    if backend == "compiled":
        if _gf2 is None:
            raise RuntimeError("compiled backend is not available")
        return _toeplitz_compiled(x, diag, out_len)
    if backend == "numpy":
        return _toeplitz_numpy(x, diag, out_len)
    raise ValueError(f"unknown backend {backend!r}")


def seeded_hash(bits, seed: int, out_len: int, backend: str | None = None) -> np.ndarray:
    """Toeplitz hash with the matrix expanded from a 64-bit public seed."""
    x = as_bits(bits)
    if out_len == 0:
        return np.zeros(0, dtype=np.uint8)
    return toeplitz_hash(x, expand_seed(seed, x.size + out_len - 1), out_len, backend)


__all__ = ["BACKEND", "COMPILED_MAX_OUT", "available_backends", "select_backend", "as_bits",
           "pack_bits", "unpack_bits", "expand_seed", "toeplitz_hash", "seeded_hash"]
