import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prdarts.dataio import (
    PARALLEL_THRESHOLD,
    DataFormatError,
    Dataset,
    DimensionMismatchError,
    TruncatedDataError,
    dumps_binary,
    generate_synthetic,
    load_binary,
    loads_binary,
    max_abs_cosine,
    save_binary,
)


def test_single_sample_unit_norm():
    ds = generate_synthetic(1, 3, 4, seed=0)
    assert len(ds) == 1
    assert np.linalg.norm(ds.inputs[0]) == pytest.approx(1.0)


def test_no_near_parallel_pairs():
    ds = generate_synthetic(100, 2, 3, seed=1)
    flat = ds.inputs.reshape(100, -1)
    cos = np.abs(flat @ flat.T)
    np.fill_diagonal(cos, 0)
    assert cos.max() < 1 - PARALLEL_THRESHOLD
    assert max_abs_cosine(ds.inputs) == pytest.approx(cos.max())


def test_same_seed_same_data():
    a, b = generate_synthetic(5, 2, 3, seed=9), generate_synthetic(5, 2, 3, seed=9)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)


def test_explicit_targets():
    ds = generate_synthetic(3, 2, 2, targets=[1, 2, 3])
    np.testing.assert_array_equal(ds.targets, [1, 2, 3])
    with pytest.raises(DimensionMismatchError):
        generate_synthetic(3, 2, 2, targets=[1, 2])


def test_parallel_rejection_exhausts():
    with pytest.raises(RuntimeError):
        generate_synthetic(3, 1, 1, seed=0)


@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000))
def test_binary_round_trip(n, m, p, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.standard_normal((n, m, p)), rng.standard_normal(n))
    back = loads_binary(dumps_binary(ds))
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.targets, ds.targets)


def test_file_round_trip(tmp_path):
    ds = generate_synthetic(4, 2, 3, seed=2)
    save_binary(ds, tmp_path / "d.prdk")
    back = load_binary(tmp_path / "d.prdk", expect_shape=(2, 3))
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    assert not list(tmp_path.glob("*.tmp"))


def test_truncated_file_names_offset():
    raw = dumps_binary(generate_synthetic(3, 2, 2, seed=0))
    cut = raw[:-5]
    with pytest.raises(TruncatedDataError) as err:
        loads_binary(cut)
    assert str(len(cut)) in str(err.value)
    with pytest.raises(TruncatedDataError):
        loads_binary(raw[:10])


def test_bad_magic_and_version():
    raw = bytearray(dumps_binary(generate_synthetic(2, 1, 2, seed=0)))
    with pytest.raises(DataFormatError, match="magic"):
        loads_binary(b"XXXX" + bytes(raw[4:]))
    raw[4] = 9
    with pytest.raises(DataFormatError, match="version"):
        loads_binary(bytes(raw))


def test_trailing_bytes_and_shape_mismatch():
    raw = dumps_binary(generate_synthetic(2, 1, 2, seed=0))
    with pytest.raises(DimensionMismatchError):
        loads_binary(raw + b"\0" * 8)
    with pytest.raises(DimensionMismatchError):
        loads_binary(raw, expect_shape=(2, 2))


def test_normalize_on_load():
    ds = Dataset(np.full((2, 1, 2), 3.0), [0.0, 1.0])
    back = loads_binary(dumps_binary(ds), normalize=True)
    np.testing.assert_allclose(np.linalg.norm(back.inputs.reshape(2, -1), axis=1), 1.0)
