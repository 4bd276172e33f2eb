import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from lutforge.data import (DataError, DatasetSpec, check_disjoint, ingest, lftd_dumps, lftd_loads,
                           load_cache, metric_accuracy, metric_separation, separation_from_stats,
                           split_indices)


def write_csv(path, rows, header="a,b,label"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def test_ten_rows_split_nine_one(tmp_path):
    src = write_csv(tmp_path / "d.csv", [f"{k},{k * 2},{k % 2}" for k in range(10)])
    spec = DatasetSpec(str(src), val_fraction=0.1, split_seed=4, standardize=False)
    a, b = ingest(spec), ingest(spec)
    assert (len(a.x_train), len(a.x_val)) == (9, 1)
    assert np.array_equal(a.x_val, b.x_val) and np.array_equal(a.x_train, b.x_train)
    assert a.n_classes == 2


def test_cache_round_trip_and_checksum(tmp_path):
    src = write_csv(tmp_path / "d.csv", [f"{k},{-k},{'xyz'[k % 3]}" for k in range(30)])
    ds = ingest(DatasetSpec(str(src), test_fraction=0.2), cache_dir=tmp_path / "cache")
    back = load_cache(tmp_path / "cache")
    assert np.allclose(back.x_train, ds.x_train, atol=1e-6)
    assert np.array_equal(back.y_val, ds.y_val)
    assert back.n_classes == 3 and len(back.x_test) == 6
    blob = (tmp_path / "cache" / "x_val.lftd").read_bytes()
    (tmp_path / "cache" / "x_val.lftd").write_bytes(blob[:-1] + bytes([blob[-1] ^ 1]))
    with pytest.raises(DataError, match="checksum"):
        load_cache(tmp_path / "cache")


@given(st.lists(st.integers(1, 5), min_size=0, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_lftd_round_trip(shape, seed):
    arr = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    blob = lftd_dumps(arr)
    assert blob[:4] == b"LFTD"
    back = lftd_loads(blob)
    assert back.shape == arr.shape and np.array_equal(back, arr)


def test_lftd_rejects_bad_input():
    with pytest.raises(DataError):
        lftd_loads(b"NOPE" + bytes(8))
    with pytest.raises(DataError):
        lftd_loads(lftd_dumps(np.zeros((2, 3)))[:-4])


def test_overlapping_splits_are_caught():
    splits = split_indices(20, 0.2, 0.1, 0)
    check_disjoint(splits)
    splits["val"] = np.append(splits["val"], splits["train"][0])
    with pytest.raises(DataError, match="share 1 rows"):
        check_disjoint(splits)


def test_malformed_rows_report_line_numbers(tmp_path):
    src = write_csv(tmp_path / "d.csv", ["1,2,0", "3,,1", "5,6,0"])
    with pytest.raises(DataError, match=r"d\.csv:3"):
        ingest(DatasetSpec(str(src)))
    src = write_csv(tmp_path / "e.csv", ["1,2,0", "3,4,1", "5,6"])
    with pytest.raises(DataError, match=r"e\.csv:4"):
        ingest(DatasetSpec(str(src)))


def test_label_cardinality_mismatch(tmp_path):
    src = write_csv(tmp_path / "d.csv", [f"{k},{k},{k % 3}" for k in range(12)])
    with pytest.raises(DataError, match="3 classes"):
        ingest(DatasetSpec(str(src), n_classes=5))


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        ingest(DatasetSpec(str(tmp_path / "absent.csv")))


def test_accuracy_examples():
    assert metric_accuracy(np.eye(3), [0, 1, 2]) == 1.0
    assert metric_accuracy(np.ones((4, 3)), [1, 2, 1, 2]) == 0.0
    assert metric_accuracy(np.eye(4), [0, 1, 0, 0]) == 0.5
    with pytest.raises(ValueError):
        metric_accuracy(np.zeros((0, 3)), [])


def test_separation_examples():
    assert separation_from_stats(20.0, 14.0, 2.0, 2.0) == 3.0
    assert metric_separation([3, 5, 7], [3, 5, 7]) == 0.0
    assert math.isnan(metric_separation([4, 4, 4], [4, 4]))
    with pytest.raises(ValueError):
        metric_separation([], [1, 2])


@given(st.integers(0, 2 ** 32 - 1))
def test_separation_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    ck = rng.poisson(20, int(rng.integers(2, 40))).astype(float)
    cp = rng.poisson(15, int(rng.integers(2, 40))).astype(float)
    want = oracles.separation(ck.tolist(), cp.tolist())
    got = metric_separation(ck, cp)
    if math.isnan(want):
        assert math.isnan(got)
    else:
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))
