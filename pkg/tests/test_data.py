import numpy as np
import pytest
from hypothesis import given, strategies as st

from traffic_prgp.data import (Dataset, UnitSpec, INTERNAL_UNITS, REPORT_UNITS, DENSITY,
                               destandardize, export_csv, ingest_csv, inject_bias,
                               standardize, subsample)


def make(n, rng, segments=5):
    X = np.array([(i % segments, i // segments) for i in range(n)])
    Y = np.column_stack([rng.uniform(1000, 6000, n), rng.uniform(20, 110, n), np.full(n, np.nan)])
    return Dataset(X, Y)


def write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_ingest_converts_units(tmp_path):
    p = write(tmp_path, "segment,k,flow,speed\n0,0,400,65\n")
    d = ingest_csv(p, UnitSpec("veh_per_5min", "mph"))
    assert d.Y[0, 0] == 4800.0
    assert d.Y[0, 1] == pytest.approx(104.607, abs=1e-3)
    assert d.Y[0, 1] == 65 * 1.609344
    assert np.isnan(d.Y[0, DENSITY])


@pytest.mark.parametrize("body, msg", [
    ("", "no observations"),
    ("0,0,1,2\n0,0,3,4\n", "duplicate"),
    ("0,0,-1,2\n", "negative"),
    ("0,0,abc,2\n", ":2: malformed"),
    ("0,0,1\n", ":2: expected 4 fields"),
])
def test_ingest_errors(tmp_path, body, msg):
    with pytest.raises(ValueError, match=msg):
        ingest_csv(write(tmp_path, "segment,k,flow,speed\n" + body))


def test_ingest_rejects_bad_header(tmp_path):
    with pytest.raises(ValueError, match="header"):
        ingest_csv(write(tmp_path, "a,b,c,d\n0,0,1,1\n"))


def test_duplicate_error_reports_line(tmp_path):
    with pytest.raises(ValueError, match=r"d\.csv:4: duplicate.*line 2"):
        ingest_csv(write(tmp_path, "segment,k,flow,speed\n0,0,1,2\n1,0,1,2\n0,0,3,4\n"))


@pytest.mark.parametrize("units", [INTERNAL_UNITS, REPORT_UNITS, UnitSpec("veh/h", "mph")])
def test_export_ingest_round_trip(tmp_path, rng, units):
    d = make(37, rng)
    back = ingest_csv(export_csv(d, tmp_path / "x.csv", units), units)
    np.testing.assert_array_equal(back.X, d.X)
    np.testing.assert_allclose(back.Y[:, :2], d.Y[:, :2], rtol=1e-15)


def test_round_trip_internal_is_bitwise(tmp_path, rng):
    d = make(20, rng)
    back = ingest_csv(export_csv(d, tmp_path / "x.csv"))
    assert back.Y[:, :2].tobytes() == d.Y[:, :2].tobytes()


def test_dataset_rejects_duplicates_and_negative_indices():
    with pytest.raises(ValueError):
        Dataset(np.array([[0, 0], [0, 0]]), np.ones((2, 3)))
    with pytest.raises(ValueError):
        Dataset(np.array([[-1, 0]]), np.ones((1, 3)))


def test_standardize_moments_and_round_trip(rng):
    d = make(50, rng)
    s, stats = standardize(d)
    for j in (0, 1):
        assert abs(s.Y[:, j].mean()) <= 1e-12
        assert abs(s.Y[:, j].var() - 1.0) <= 1e-12
    np.testing.assert_allclose(destandardize(s, stats).Y[:, :2], d.Y[:, :2], rtol=0, atol=1e-12 * 6000)


def test_standardize_constant_column_errors():
    d = Dataset(np.array([[0, 0], [0, 1]]), np.array([[5.0, 1, np.nan], [5.0, 2, np.nan]]))
    with pytest.raises(ValueError, match="zero-variance"):
        standardize(d)


def test_inject_bias_zero_fraction_is_identity(rng):
    d = make(30, rng)
    assert inject_bias(d, 0.0, 100, 5, 1).Y.tobytes() == d.Y.tobytes()


def test_inject_bias_half_of_hundred(rng):
    d = make(100, rng)
    out = inject_bias(d, 0.5, 100, 5, 7)
    changed = np.any(out.Y[:, :2] != d.Y[:, :2], axis=1)
    assert changed.sum() == 50
    assert out.Y[~changed].tobytes() == d.Y[~changed].tobytes()


def test_inject_bias_seeded_and_clamped(rng):
    d = make(80, rng)
    a, b = inject_bias(d, 0.5, 100, 5, 3), inject_bias(d, 0.5, 100, 5, 3)
    assert a.Y.tobytes() == b.Y.tobytes()
    heavy = inject_bias(d, 1.0, 1e6, 1e6, 3)
    assert np.all(heavy.Y[:, :2] >= 0)


def test_inject_bias_fraction_range(rng):
    with pytest.raises(ValueError):
        inject_bias(make(5, rng), 1.5, 1, 1, 0)


def test_subsample_counts(rng):
    d = make(8064, rng, segments=28)
    assert subsample(d, 0.357, 0).n == 2878
    assert subsample(d, 1.0, 0) is d
    a, b = subsample(d, 0.5, 1), subsample(d, 0.5, 2)
    assert a.X.tobytes() != b.X.tobytes()
    with pytest.raises(ValueError):
        subsample(make(3, rng), 0.1, 0)


@given(st.floats(0.01, 1.0), st.integers(1, 400), st.integers(0, 2**31))
def test_subsample_floor_property(ratio, n, seed):
    d = make(n, np.random.default_rng(0))
    if int(np.floor(ratio * n)) == 0:
        with pytest.raises(ValueError):
            subsample(d, ratio, seed)
        return
    out = subsample(d, ratio, seed)
    assert out.n == int(np.floor(ratio * n))
    keys = {tuple(x) for x in d.X}
    assert all(tuple(x) in keys for x in out.X)


@given(st.floats(0.0, 1.0), st.integers(2, 200), st.integers(0, 2**31))
def test_inject_bias_touches_floor_rows(fraction, n, seed):
    d = make(n, np.random.default_rng(1))
    out = inject_bias(d, fraction, 100, 5, seed)
    changed = np.any(out.Y[:, :2] != d.Y[:, :2], axis=1).sum()
    assert changed <= int(np.floor(fraction * n))
    assert np.all(out.Y[:, :2] >= 0)


def test_unit_conversion_constants():
    d = Dataset(np.array([[0, 0]]), np.array([[4800.0, 1.609344 * 50, np.nan]]))
    out = d.to_units(REPORT_UNITS)
    assert out.Y[0, 0] == 400.0
    assert out.Y[0, 1] == 50.0
