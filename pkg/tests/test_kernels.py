import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings, strategies as st

from dynacl import kernels as K


def brute_linf(x, labels, k):
    out = np.full((k, k), np.inf)
    for i in range(len(x)):
        for j in range(len(x)):
            if labels[i] != labels[j]:
                d = np.abs(x[i] - x[j]).max()
                out[labels[i], labels[j]] = min(out[labels[i], labels[j]], d)
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 4), st.integers(4, 40))
def test_min_cross_class_linf_paths_match_brute_force(seed, k, n):
    g = np.random.default_rng(seed)
    x = g.random((n, 3 * 8 * 8), dtype=np.float32)
    labels = g.integers(0, k, n).astype(np.int64)
    labels[:k] = np.arange(k)
    pooled = K.pooled_summary(x, 3, 8, 8)
    means = x.mean(1, dtype=np.float64)
    ref = brute_linf(x, labels, k)
    for fn in (K.min_cross_class_linf_nb, K.min_cross_class_linf_np):
        got = fn(x, pooled, means, labels, k)
        np.testing.assert_array_equal(got, ref)


def test_pooled_summary_is_lower_bound(rng):
    x = rng.random((20, 3 * 16 * 16), dtype=np.float32)
    p = K.pooled_summary(x, 3, 16, 16)
    for i in range(20):
        for j in range(20):
            assert np.abs(p[i] - p[j]).max() <= np.abs(x[i] - x[j]).max() + 1e-6


def test_sq_dists_paths(rng):
    a, b = rng.random((30, 17)), rng.random((11, 17))
    ref = ((a[:, None] - b[None]) ** 2).sum(-1)
    np.testing.assert_allclose(K.sq_dists_np(a, b), ref, atol=1e-12)
    np.testing.assert_allclose(K.sq_dists_nb(a, b), ref, rtol=1e-14, atol=0)


def test_assign_nearest_paths(rng):
    x, c = rng.random((200, 5)), rng.random((7, 5))
    ref = ((x[:, None] - c[None]) ** 2).sum(-1)
    for fn in (K.assign_nearest_nb, K.assign_nearest_np):
        lab, d = fn(x, c)
        np.testing.assert_array_equal(lab, ref.argmin(1))
        np.testing.assert_allclose(d, ref.min(1), atol=1e-12)


def test_env_flag_selects_numpy():
    code = "from dynacl import kernels as K, _accel as A; print(A.USE_NUMBA, K.crop_resize is K.crop_resize_np)"
    env = {**os.environ, "DYNACL_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]



def test_default_uses_numba():
    from dynacl import _accel
    if _accel.USE_NUMBA:
        assert K.crop_resize is K.crop_resize_nb
