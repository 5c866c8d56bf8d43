import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsule import _accel
from capsule.augment import affine_inverse, gaussian_taps

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def _image(seed, h, w):
    rng = np.random.default_rng(seed)
    return (rng.random((h, w, 3)) * 255).astype(np.float32)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 24), st.integers(2, 24), st.sampled_from([3, 5, 7]))
def test_blur_backends_bit_identical(seed, h, w, k):
    img = _image(seed, h, w)
    taps = gaussian_taps(k)
    np.testing.assert_array_equal(_accel.blur_numpy(img, taps), _accel.blur_numba(img, taps))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(2, 24),
    st.integers(2, 24),
    st.floats(-45, 45),
    st.floats(0.9, 1.1),
    st.floats(-2, 2),
    st.floats(-2, 2),
)
def test_warp_backends_bit_identical(seed, h, w, angle, scale, dx, dy):
    img = _image(seed, h, w)
    inv = affine_inverse(h, w, angle, scale, dx, dy)
    np.testing.assert_array_equal(_accel.warp_numpy(img, inv, 0.0), _accel.warp_numba(img, inv, 0.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-0.5, 0.5))
def test_hue_backends_bit_identical(seed, shift):
    img = _image(seed, 9, 7)
    img[0, 0] = 0.0  # black
    img[0, 1] = 128.0  # gray
    np.testing.assert_array_equal(_accel.hue_shift_numpy(img, shift), _accel.hue_shift_numba(img, shift))


def test_hue_roundtrip_without_shift():
    img = _image(3, 8, 8)
    np.testing.assert_allclose(_accel.hue_shift_numpy(img, 0.0), img, atol=1e-3)


def test_identity_warp_is_exact():
    img = _image(4, 10, 12)
    inv = affine_inverse(10, 12, 0.0, 1.0, 0.0, 0.0)
    np.testing.assert_array_equal(_accel.warp(img, inv, 0.0), img)


def test_confusion_backends_agree():
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 5, 500), rng.integers(0, 5, 500)
    np.testing.assert_array_equal(_accel.confusion_numpy(t, p, 5), _accel.confusion_numba(t, p, 5))


@pytest.mark.parametrize("flag,backend", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, backend):
    env = {**os.environ, "CAPSULE_DISABLE_NUMBA": flag}
    out = subprocess.run(
        [sys.executable, "-c", "from capsule import _accel; print(_accel.BACKEND, _accel.blur.__name__)"],
        env=env, capture_output=True, text=True, check=True,
    ).stdout.split()
    assert out == [backend, f"blur_{backend}"]


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")
def test_benchmark_script_runs(tmp_path):
    import importlib.util
    import json
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    out = tmp_path / "bench.json"
    assert bench.main(["--size", "16", "--repeats", "1", "--json", str(out)]) == 0
    assert set(json.loads(out.read_text())["results"]) == {"gaussian_blur", "affine_warp", "hue_shift", "confusion"}
