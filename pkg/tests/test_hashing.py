import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.linalg import toeplitz

from tbqkd import hashing
from tbqkd.hashing import (COMPILED_MAX_OUT, available_backends, expand_seed, pack_bits,
                           seeded_hash, select_backend, toeplitz_hash, unpack_bits)

BACKENDS = available_backends()


def brute(x, seed, m):
    n = len(x)
    t = toeplitz(c=seed[:m], r=seed[m - 1:m - 1 + n]).astype(np.int64)
    return (t @ np.asarray(x, np.int64)) % 2


@pytest.mark.parametrize("backend", BACKENDS)
def test_hand_example(backend):
    # seed 1,0,1,1,0 and m = 2 give the matrix rows [1 1 1 0] and [0 1 1 1].
    seed = [1, 0, 1, 1, 0]
    assert toeplitz_hash([1, 1, 0, 0], seed, 2, backend).tolist() == [0, 1]
    assert toeplitz_hash([1, 0, 0, 1], seed, 2, backend).tolist() == [1, 1]


def test_matrix_convention():
    seed = np.array([1, 0, 1, 1, 0])
    t = toeplitz(c=seed[:2], r=seed[1:])
    assert t.tolist() == [[1, 1, 1, 0], [0, 1, 1, 1]]


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_input_hashes_to_zero(backend):
    rng = np.random.default_rng(1)
    seed = rng.integers(0, 2, 1000 + 300 - 1)
    assert not toeplitz_hash(np.zeros(1000, np.uint8), seed, 300, backend).any()


@st.composite
def hash_case(draw, max_n=300):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(1, n))
    rng = np.random.default_rng(draw(st.integers(0, 2**32)))
    return (rng.integers(0, 2, n, dtype=np.uint8), rng.integers(0, 2, n, dtype=np.uint8),
            rng.integers(0, 2, n + m - 1, dtype=np.uint8), m)


@pytest.mark.parametrize("backend", BACKENDS)
@given(case=hash_case())
def test_matches_brute_force(backend, case):
    x, _, seed, m = case
    assert np.array_equal(toeplitz_hash(x, seed, m, backend), brute(x, seed, m))


@pytest.mark.parametrize("backend", BACKENDS)
@given(case=hash_case())
def test_linear_over_gf2(backend, case):
    x, y, seed, m = case
    lhs = toeplitz_hash(x ^ y, seed, m, backend)
    rhs = toeplitz_hash(x, seed, m, backend) ^ toeplitz_hash(y, seed, m, backend)
    assert np.array_equal(lhs, rhs)


@pytest.mark.parametrize("n,m", [(64, 64), (65, 63), (1000, 1), (4097, 129), (70_000, 3_000)])
def test_backends_agree_on_word_boundaries(n, m):
    rng = np.random.default_rng(n + m)
    x = rng.integers(0, 2, n, dtype=np.uint8)
    seed = rng.integers(0, 2, n + m - 1, dtype=np.uint8)
    outs = {b: toeplitz_hash(x, seed, m, b) for b in BACKENDS}
    assert len({o.tobytes() for o in outs.values()}) == 1
    if n * m <= 10**7:
        assert np.array_equal(outs["numpy"], brute(x, seed, m))


def test_numpy_fft_chunking(monkeypatch):
    monkeypatch.setattr(hashing, "_FFT_CHUNK", 37)
    rng = np.random.default_rng(5)
    x = rng.integers(0, 2, 500, dtype=np.uint8)
    seed = rng.integers(0, 2, 500 + 90 - 1, dtype=np.uint8)
    assert np.array_equal(toeplitz_hash(x, seed, 90, "numpy"), brute(x, seed, 90))


def test_argument_errors():
    with pytest.raises(ValueError, match="out_len"):
        toeplitz_hash([1, 0], [1, 0, 1], 3)
    with pytest.raises(ValueError, match="seed must hold"):
        toeplitz_hash([1, 0, 1], [1, 0], 2)
    with pytest.raises(ValueError, match="only 0 and 1"):
        toeplitz_hash([2, 0, 1], [1, 0, 1, 1], 2)
    with pytest.raises(ValueError, match="unknown backend"):
        toeplitz_hash([1, 0, 1], [1, 0, 1, 1], 2, backend="gpu")
    assert toeplitz_hash([1, 0, 1], [], 0).size == 0


@given(st.lists(st.integers(0, 1), max_size=200))
def test_pack_round_trip(bits):
    data = pack_bits(bits)
    assert len(data) == (len(bits) + 7) // 8
    assert unpack_bits(data, len(bits)).tolist() == bits


def test_pack_is_big_endian():
    assert pack_bits([1, 0, 0, 0, 0, 0, 0, 0, 1]) == b"\x80\x80"
    with pytest.raises(ValueError):
        unpack_bits(b"\x00", 9)


def test_expand_seed_deterministic_prefix():
    a, b = expand_seed(42, 1000), expand_seed(42, 37)
    assert np.array_equal(a[:37], b)
    assert not np.array_equal(expand_seed(43, 1000), a)
    assert 400 < a.sum() < 600


def test_seeded_hash_uses_expanded_seed():
    x = np.random.default_rng(0).integers(0, 2, 200, dtype=np.uint8)
    assert np.array_equal(seeded_hash(x, 9, 31), toeplitz_hash(x, expand_seed(9, 230), 31))


def test_select_backend():
    if hashing.BACKEND == "compiled":
        assert select_backend(COMPILED_MAX_OUT) == "compiled"
    assert select_backend(COMPILED_MAX_OUT + 1) == "numpy"


def test_pure_python_switch():
    code = "import tbqkd.hashing as h; print(h.BACKEND, h.available_backends())"
    env = dict(os.environ, TBQKD_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                         text=True, check=True).stdout.split()
    assert out[0] == "numpy"


def test_output_bits_are_uniform_for_random_seeds():
    """Advisory: with fresh random seeds the output of a fixed nonzero input
    is uniform; a chi-square over 4-bit output patterns should not reject."""
    rng = np.random.default_rng(2024)
    x = rng.integers(0, 2, 128, dtype=np.uint8)
    weights = 1 << np.arange(4)
    patterns = [int(toeplitz_hash(x, rng.integers(0, 2, 131, dtype=np.uint8), 4) @ weights)
                for _ in range(4000)]
    observed = np.bincount(patterns, minlength=16)
    assert stats.chisquare(observed).pvalue > 1e-4
