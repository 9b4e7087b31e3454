from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from delta_lab import container
from delta_lab.errors import CorruptFileError, HashMismatchError
from delta_lab.optim import AdamW


def test_roundtrip_and_header():
    secs = {"a": np.arange(6, dtype="<f4").reshape(2, 3), "b": np.array([1, 2], dtype="<i4")}
    blob = container.encode("thing", {"x": 1}, secs)
    assert blob.startswith(container.MAGIC)
    header, arrays = container.decode(blob, "thing")
    assert header["meta"] == {"x": 1}
    assert np.array_equal(arrays["a"], secs["a"]) and arrays["a"].dtype == np.dtype("<f4")
    assert [s["name"] for s in header["sections"]] == ["a", "b"]


def test_errors_report_offsets():
    blob = container.encode("k", {}, {"a": np.ones(3)})
    with pytest.raises(CorruptFileError, match="offset 0"):
        container.decode(b"nope")
    with pytest.raises(CorruptFileError, match="byte offset"):
        container.decode(blob[:-1])
    with pytest.raises(CorruptFileError):
        container.decode(blob, "other")
    with pytest.raises(HashMismatchError):
        container.decode(blob[:-1] + b"\x01")
    with pytest.raises(TypeError):
        container.encode("k", {}, {"a": np.ones(2, dtype=np.complex128)})


def test_hash_array_is_dtype_normalized():
    assert container.hash_array(np.ones(3, dtype=np.float32)) == container.hash_array(np.ones(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(0, 20), elements=st.floats(allow_nan=False)), st.dictionaries(st.text(max_size=5), st.integers()))
def test_encode_decode_identity(values, meta):
    blob = container.encode("k", meta, {"v": values})
    header, arrays = container.decode(blob)
    assert header["meta"] == meta and np.array_equal(arrays["v"], values)
    assert container.encode("k", header["meta"], arrays) == blob


def test_adamw_first_step_is_sign_times_lr():
    p = np.array([1.0, -2.0, 0.0])
    opt = AdamW(3, lr=0.1)
    opt.step(p, np.array([0.5, -3.0, 0.0]))
    assert np.allclose(p, [0.9, -1.9, 0.0])


def test_adamw_decoupled_decay():
    p = np.array([2.0])
    AdamW(1, lr=0.1, weight_decay=0.5).step(p, np.zeros(1))
    assert p[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_minimizes_quadratic():
    p = np.array([5.0, -3.0])
    opt = AdamW(2, lr=0.05)
    for _ in range(2000):
        opt.step(p, 2 * p)
    assert np.abs(p).max() < 1e-2
