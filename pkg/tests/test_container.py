import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from seqdeobf.container import MAGIC, ContainerError, load_arrays, save_arrays

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text("abcxyz/._", min_size=1, max_size=6), arrays(np.float64, array_shapes(max_dims=3, max_side=4), elements=finite), max_size=4))
def test_round_trip_is_exact(tmp_path_factory, arrays_in):
    path = tmp_path_factory.mktemp("c") / "x.nup"
    save_arrays(path, arrays_in, {"k": 1})
    out, meta = load_arrays(path)
    assert meta == {"k": 1}
    assert list(out) == list(arrays_in)
    for k, a in arrays_in.items():
        assert out[k].shape == a.shape
        assert np.array_equal(out[k], a)


def test_save_is_deterministic(tmp_path):
    a = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(3)}
    save_arrays(tmp_path / "1", a, {"z": 1, "a": 2})
    save_arrays(tmp_path / "2", a, {"a": 2, "z": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()
    assert (tmp_path / "1").read_bytes().startswith(MAGIC)


def test_truncated_payload(tmp_path):
    save_arrays(tmp_path / "x", {"w": np.ones(10)})
    raw = (tmp_path / "x").read_bytes()
    (tmp_path / "y").write_bytes(raw[:-3])
    with pytest.raises(ContainerError, match="payload"):
        load_arrays(tmp_path / "y")


@pytest.mark.parametrize("blob", [b"", b"NUPARAMS2\n", MAGIC + b"\x01"])
def test_bad_headers(tmp_path, blob):
    (tmp_path / "x").write_bytes(blob)
    with pytest.raises(ContainerError):
        load_arrays(tmp_path / "x")
