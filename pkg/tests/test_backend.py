import os
import random
import subprocess
import sys

import numpy as np
import pytest

from vidpool import _backend, _kernels_np


def have_compiled():
    try:
        from vidpool import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def random_case(rng, t=None, k=None, d=None):
    t = t or rng.randint(1, 40)
    k = k or rng.randint(1, 9)
    d = d or rng.randint(1, 12)
    frames = np.ascontiguousarray(rng_normal(rng, (t, d)))
    means = np.ascontiguousarray(rng_normal(rng, (k, d)))
    inv_var = np.exp(rng_normal(rng, (k, d)) * 0.5)
    log_const = rng_normal(rng, (k,))
    return frames, means, inv_var, log_const


def rng_normal(rng, shape):
    flat = np.array([rng.gauss(0.0, 1.0) for _ in range(int(np.prod(shape)))])
    return flat.reshape(shape)


def test_backend_name_is_known():
    assert _backend.backend_name() in ("c", "python")


@pytest.mark.skipif(not have_compiled(), reason="compiled extension not built")
def test_kernels_agree_with_numpy():
    from vidpool import _kernels

    rng = random.Random(7)
    for _ in range(25):
        frames, means, inv_var, log_const = random_case(rng)
        lj_c = _kernels.diag_log_joint(frames, means, inv_var, log_const)
        lj_np = _kernels_np.diag_log_joint(frames, means, inv_var, log_const)
        np.testing.assert_allclose(lj_c, lj_np, rtol=1e-12, atol=1e-12)

        post_c, lse_c = _kernels.posteriors_from_log_joint(lj_c)
        post_np, lse_np = _kernels_np.posteriors_from_log_joint(lj_c)
        np.testing.assert_allclose(post_c, post_np, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(lse_c, lse_np, rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(post_c.sum(axis=1), 1.0, atol=1e-12)

        for want in (True, False):
            n_c, sx_c, sx2_c = _kernels.accumulate_stats(post_c, frames, want)
            n_np, sx_np, sx2_np = _kernels_np.accumulate_stats(post_c, frames, want)
            np.testing.assert_allclose(n_c, n_np, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(sx_c, sx_np, rtol=1e-12, atol=1e-12)
            if want:
                np.testing.assert_allclose(sx2_c, sx2_np, rtol=1e-12, atol=1e-12)
            else:
                assert sx2_c is None and sx2_np is None


def test_numpy_log_joint_matches_direct_loop():
    rng = random.Random(11)
    frames, means, inv_var, log_const = random_case(rng, t=6, k=3, d=4)
    ref = np.empty((6, 3))
    for t in range(6):
        for k in range(3):
            diff = frames[t] - means[k]
            ref[t, k] = log_const[k] - 0.5 * (diff * diff * inv_var[k]).sum()
    got = _kernels_np.diag_log_joint(frames, means, inv_var, log_const)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_posterior_softmax_handles_large_offsets():
    lj = np.array([[1000.0, 1001.0], [-1000.0, -1000.0]])
    post, lse = _kernels_np.posteriors_from_log_joint(lj)
    e = np.exp(1.0)
    np.testing.assert_allclose(post[0], [1 / (1 + e), e / (1 + e)], atol=1e-14)
    np.testing.assert_allclose(post[1], [0.5, 0.5], atol=1e-14)
    np.testing.assert_allclose(lse[0], 1001.0 + np.log1p(np.exp(-1.0)), atol=1e-12)


def _backend_in_subprocess(env_value):
    env = dict(os.environ, VIDPOOL_BACKEND=env_value)
    out = subprocess.run(
        [sys.executable, "-c", "import vidpool; print(vidpool.backend_name())"],
        capture_output=True,
        text=True,
        env=env,
    )
    return out


def test_env_forces_python_backend():
    out = _backend_in_subprocess("python")
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "python"


@pytest.mark.skipif(not have_compiled(), reason="compiled extension not built")
def test_env_forces_compiled_backend():
    out = _backend_in_subprocess("c")
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "c"


def test_env_rejects_unknown_backend():
    out = _backend_in_subprocess("fortran")
    assert out.returncode != 0
    assert "VIDPOOL_BACKEND" in out.stderr
