import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spacetime_robust.data import (RawSeries, Scaler, chronological_split, fit_scaler, load_csv, make_windows,
                                   save_csv, window_arrays, window_count)
from spacetime_robust.errors import (ColumnNotFound, DegenerateSeries, NonNumericCell, SeriesTooShort,
                                     ValidationError)


def _write(path, text):
    path.write_text(text)
    return path


def test_load_csv_by_name(tmp_path):
    p = _write(tmp_path / "s.csv", "time,load\n0,1.0\n1,2.0\n2,3.0\n")
    s = load_csv(p, "load")
    assert s.values.tolist() == [1.0, 2.0, 3.0]
    assert s.name == "load"


def test_load_csv_by_index(tmp_path):
    p = _write(tmp_path / "s.csv", "time,load\n0,1.5\n1,2.5\n")
    assert load_csv(p, 1).values.tolist() == [1.5, 2.5]


def test_non_numeric_cell_reports_data_row(tmp_path):
    rows = ["load"] + ["1.0", "2.0", "3.0", "4.0", "abc", "6.0"]
    p = _write(tmp_path / "s.csv", "\n".join(rows) + "\n")
    with pytest.raises(NonNumericCell) as err:
        load_csv(p, "load")
    assert err.value.row == 5


def test_missing_cell_is_an_error(tmp_path):
    p = _write(tmp_path / "s.csv", "a,b\n1,2\n3,\n")
    with pytest.raises(NonNumericCell) as err:
        load_csv(p, "b")
    assert err.value.row == 2


def test_missing_column_and_file(tmp_path):
    p = _write(tmp_path / "s.csv", "a\n1\n")
    with pytest.raises(ColumnNotFound):
        load_csv(p, "load")
    with pytest.raises(ColumnNotFound):
        load_csv(p, 3)
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv", 0)


def test_nonfinite_rejected(tmp_path):
    p = _write(tmp_path / "s.csv", "a\n1\nnan\n")
    with pytest.raises(NonNumericCell):
        load_csv(p, "a")
    with pytest.raises(ValidationError):
        RawSeries([1.0, float("inf")])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e12, 1e12, allow_nan=False), min_size=1, max_size=40))
def test_csv_round_trip_is_lossless(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "s.csv"
    save_csv(path, RawSeries(values, name="x"))
    assert load_csv(path, "x").values.tolist() == [float(v) for v in values]


def test_raw_series_is_read_only():
    s = RawSeries([1.0, 2.0])
    with pytest.raises(ValueError):
        s.values[0] = 5.0


def test_make_windows_enumeration():
    w = make_windows(RawSeries([0, 1, 2, 3, 4]), 2, 2)
    assert [(x.input.tolist(), x.target.tolist()) for x in w] == [([0, 1], [2, 3]), ([1, 2], [3, 4])]
    assert [x.origin_index for x in w] == [1, 2]


def test_window_count_electricity_length():
    # 26304 - 12 - 84 + 1
    assert window_count(26304, 84, 12) == 26209
    x, _, _ = window_arrays(np.arange(26304.0), 84, 12)
    assert len(x) == 26209


def test_series_too_short():
    with pytest.raises(SeriesTooShort):
        make_windows(RawSeries(np.arange(90.0)), 84, 12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 30), st.integers(1, 4))
def test_window_count_matches_brute_force(ell, h, extra, stride):
    n = ell + h + extra
    y = np.arange(float(n))
    brute = [(list(y[j - ell + 1:j + 1]), list(y[j + 1:j + h + 1])) for j in range(ell - 1, n - h, stride)]
    x, t, o = window_arrays(y, ell, h, stride)
    assert len(brute) == window_count(n, ell, h, stride) == len(x)
    assert [(list(a), list(b)) for a, b in zip(x, t)] == brute
    if stride == 1 and len(x) > 1:
        # consecutive windows overlap by l - 1 samples
        assert np.array_equal(x[1][:-1], x[0][1:])


def test_fit_scaler_standard():
    sc = fit_scaler([2.0, 4.0, 6.0])
    assert sc.shift == 4.0 and sc.scale == pytest.approx(np.std([2, 4, 6]))
    z = sc.apply(np.random.default_rng(0).normal(3, 2, 1000))
    sc2 = fit_scaler(sc.invert(z))
    t = sc2.apply(sc.invert(z))
    assert abs(t.mean()) < 1e-9 and abs(t.std() - 1) < 1e-9


def test_degenerate_series():
    with pytest.raises(DegenerateSeries):
        fit_scaler([5.0, 5.0, 5.0])
    with pytest.raises(DegenerateSeries):
        fit_scaler([5.0, 5.0, 5.0], "min-max")
    assert fit_scaler([5.0, 5.0], "identity").scale == 1.0


def test_scaler_validation():
    with pytest.raises(ValidationError):
        Scaler(0.0, 0.0)
    with pytest.raises(ValidationError):
        fit_scaler([1.0, 2.0], "robust")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=50),
       st.sampled_from(["standard", "min-max", "identity"]))
def test_scaler_round_trip(values, kind):
    x = np.asarray(values)
    try:
        sc = fit_scaler(x, kind)
    except DegenerateSeries:
        return
    back = sc.invert(sc.apply(x))
    assert np.all(np.abs(back - x) <= 1e-12 * np.maximum(np.abs(x), sc.scale + abs(sc.shift)) + 1e-300)
    assert Scaler.from_dict(sc.to_dict()) == sc


def test_chronological_split():
    s = RawSeries(np.arange(100.0))
    sp = chronological_split(s)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (70, 10, 20)
    assert sp.val.values[0] == 70 and sp.test.values[0] == 80
    with pytest.raises(ValidationError):
        chronological_split(s, (0.5, 0.5, 0.5))
