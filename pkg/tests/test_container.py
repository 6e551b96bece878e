import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmrl import container
from mmrl.errors import FormatError, IntegrityError

names = st.text("abcdefgh._0123456789", min_size=1, max_size=8)


@given(st.dictionaries(names, st.integers(0, 5), max_size=4), st.lists(st.text("xyz =", max_size=10), max_size=3))
def test_roundtrip(shapes, records):
    c = container.Container("thing", {"a": "1", "b": "x y"}, [r.strip() for r in records])
    rng = np.random.default_rng(0)
    for name, n in shapes.items():
        c.tensors[name] = rng.normal(size=(n, 2))
    out = container.decode(container.encode(c), expect_kind="thing")
    assert out.header == c.header and out.records == c.records
    assert set(out.tensors) == set(c.tensors)
    for k in c.tensors:
        assert out.tensors[k].tobytes() == c.tensors[k].tobytes()


def test_encoding_is_deterministic():
    c = container.Container("k", {"x": "1"}, tensors={"t": np.arange(3.0)})
    assert container.encode(c) == container.encode(c)


def test_payload_tamper_detected():
    buf = bytearray(container.encode(container.Container("k", tensors={"t": np.arange(3.0)})))
    buf[-1] ^= 1
    with pytest.raises(IntegrityError):
        container.decode(bytes(buf))


def test_garbage_and_truncation():
    with pytest.raises(IntegrityError):
        container.decode(b"hello")
    buf = container.encode(container.Container("k", tensors={"t": np.arange(3.0)}))
    with pytest.raises(IntegrityError):
        container.decode(buf[:20])


def test_kind_check():
    with pytest.raises(FormatError):
        container.decode(container.encode(container.Container("a")), expect_kind="b")


def test_atomic_write_leaves_no_temp(tmp_path):
    container.save(tmp_path / "x.mmrl", container.Container("k"))
    assert os.listdir(tmp_path) == ["x.mmrl"]
