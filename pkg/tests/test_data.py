import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsl.data import (DataValidationError, Dataset, StepFunction, SubjectRecord, TimeGrid, assign_folds,
                      build_time_grid, kaplan_meier, read_csv, validate_dataset, write_csv)


def _records(rows):
    return [SubjectRecord(u, d, tuple(x), w) for u, d, x, w in rows]


def _km_loop(u, delta, t):
    """Textbook product-limit value at ``t``, one distinct event time at a time."""
    s = 1.0
    for tk in sorted(set(u[delta == 1])):
        if tk > t:
            break
        at_risk = np.sum(u >= tk)
        d = np.sum((u == tk) & (delta == 1))
        s *= 1 - d / at_risk
    return s


# --- validation ---------------------------------------------------------------

def test_validate_three_records():
    data = validate_dataset(_records([(1.0, 1, (0, 1), 0), (2.0, 0, (1, 1), 1), (0.0, 1, (2, 2), 1)]), 2)
    assert (data.n, data.d) == (3, 2)
    assert data.records[1] == SubjectRecord(2.0, 0, (1.0, 1.0), 1)


@pytest.mark.parametrize("row, message", [
    ((-1.0, 1, (0, 0), 0), "negative follow-up at index 1"),
    ((1.0, 1, (0, 0), 2), "treatment not binary at index 1"),
    ((1.0, 3, (0, 0), 1), "event indicator not binary at index 1"),
    ((1.0, 1, (0, 0, 0), 1), "dimension mismatch at index 1"),
    ((np.nan, 1, (0, 0), 1), "non-finite"),
])
def test_validate_rejects_with_index(row, message):
    with pytest.raises(DataValidationError, match=message):
        validate_dataset(_records([(1.0, 0, (0, 0), 0), row]), 2)


def test_validate_empty():
    with pytest.raises(DataValidationError, match="empty"):
        validate_dataset([], 2)


def test_dataset_is_read_only():
    data = Dataset.from_arrays([1.0, 2.0], [1, 0], [[0.0], [1.0]], [0, 1])
    with pytest.raises(ValueError):
        data.u[0] = 5.0


# --- time grid ------------------------------------------------------------------

def test_grid_single_point_is_median():
    data = Dataset.from_arrays([5.0, 1.0, 3.0, 2.0], [1, 1, 0, 1], np.zeros((4, 1)), [0, 1, 0, 1])
    np.testing.assert_array_equal(build_time_grid(data, 1).times, [2.5])


def test_grid_endpoints():
    rng = np.random.default_rng(0)
    u = rng.exponential(size=101)
    data = Dataset.from_arrays(u, np.ones(101), np.zeros((101, 1)), np.arange(101) % 2)
    grid = build_time_grid(data, 2)
    np.testing.assert_allclose(grid.times, np.quantile(u, [0.2, 0.8]))


def test_grid_fifty_equal_spacing():
    rng = np.random.default_rng(1)
    u = rng.exponential(size=300)
    grid = build_time_grid(Dataset.from_arrays(u, np.ones(300), np.zeros((300, 1)), np.arange(300) % 2), 50)
    gaps = np.diff(grid.times)
    assert grid.j == 50
    np.testing.assert_allclose(gaps, gaps[0], rtol=1e-12)


def test_grid_degenerate():
    data = Dataset.from_arrays([2.0] * 5, [1] * 5, np.zeros((5, 1)), [0, 1, 0, 1, 0])
    with pytest.raises(ValueError, match="degenerate"):
        build_time_grid(data, 3)


@pytest.mark.parametrize("times", [[1.0, 1.0], [2.0, 1.0], [0.0, 1.0], [-1.0]])
def test_time_grid_invariants(times):
    with pytest.raises(ValueError):
        TimeGrid(np.array(times))


# --- folds ---------------------------------------------------------------------------

def test_folds_exact_division():
    assert list(assign_folds(10, 5, 0).sizes()) == [2] * 5


def test_folds_remainder():
    assert sorted(assign_folds(11, 5, 3).sizes()) == [2, 2, 2, 2, 3]


def test_folds_deterministic():
    np.testing.assert_array_equal(assign_folds(50, 5, 9).fold_of, assign_folds(50, 5, 9).fold_of)


@pytest.mark.parametrize("n, k", [(4, 5), (10, 1)])
def test_folds_bad_k(n, k):
    with pytest.raises(ValueError):
        assign_folds(n, k, 0)


@given(n=st.integers(2, 300), k=st.integers(2, 12), seed=st.integers(0, 2**32 - 1))
def test_folds_partition(n, k, seed):
    if k > n:
        return
    folds = assign_folds(n, k, seed)
    sizes = folds.sizes()
    assert sizes.max() - sizes.min() <= 1
    members = np.concatenate([folds.members(f) for f in range(k)])
    np.testing.assert_array_equal(np.sort(members), np.arange(n))
    for f in range(k):
        assert np.intersect1d(folds.members(f), folds.complement(f)).size == 0


# --- step functions and Kaplan-Meier ----------------------------------------------------

def test_step_function_right_continuous():
    f = StepFunction(np.array([1.0, 2.0]), np.array([0.5, 0.25]), 1.0)
    np.testing.assert_array_equal(f([0.5, 1.0, 1.5, 2.0, 9.0]), [1.0, 0.5, 0.5, 0.25, 0.25])


def test_km_all_censored():
    data = Dataset.from_arrays([1.0, 2.0, 3.0], [0, 0, 0], np.zeros((3, 1)), [0, 1, 0])
    km = kaplan_meier(data)
    np.testing.assert_array_equal(km([0.0, 2.0, 100.0]), [1.0, 1.0, 1.0])


def test_km_single_event():
    km = kaplan_meier(Dataset.from_arrays([3.0], [1], [[0.0]], [1]))
    np.testing.assert_array_equal(km([2.999, 3.0, 4.0]), [1.0, 0.0, 0.0])


def test_km_five_records_by_hand():
    # risk sets 5, 4 (censoring at 2 still at risk), 2: S = 4/5, 4/5*3/4, 4/5*3/4*1/2
    data = Dataset.from_arrays([1.0, 2.0, 2.0, 3.0, 5.0], [1, 1, 0, 1, 0], np.zeros((5, 1)), [0] * 5)
    km = kaplan_meier(data)
    np.testing.assert_allclose(km([0.5, 1.0, 2.5, 3.0, 10.0]), [1.0, 0.8, 0.6, 0.3, 0.3])


def test_km_by_arm_and_empty_arm():
    data = Dataset.from_arrays([1.0, 2.0, 3.0], [1, 1, 1], np.zeros((3, 1)), [0, 0, 0])
    assert kaplan_meier(data, arm=0)(1.5) == pytest.approx(2 / 3)
    with pytest.raises(ValueError, match="no records"):
        kaplan_meier(data, arm=1)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=1, max_size=40))
def test_km_matches_loop_and_is_a_survival_curve(rows):
    u = np.array([float(r[0]) for r in rows])
    delta = np.array([int(r[1]) for r in rows])
    km = kaplan_meier(Dataset.from_arrays(u, delta, np.zeros((u.size, 1)), np.zeros(u.size, dtype=int)))
    probes = np.arange(-1.0, 10.0, 0.5)
    values = km(probes)
    assert np.all((values >= 0) & (values <= 1))
    assert np.all(np.diff(values) <= 0)
    np.testing.assert_allclose(values, [_km_loop(u, delta, t) for t in probes], atol=1e-12)


# --- CSV --------------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    data = Dataset.from_arrays(rng.exponential(size=7), rng.integers(0, 2, 7), rng.normal(size=(7, 3)),
                               rng.integers(0, 2, 7))
    write_csv(data, tmp_path / "d.csv")
    assert read_csv(tmp_path / "d.csv").to_dataset() == data


def test_csv_mean_imputation(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("time,event,treatment,age,score\n1.5,1,0,40,\n2.0,0,1,,3\n0.5,1,1,60,5\n")
    table = read_csv(path)
    x, means = table.imputed()
    np.testing.assert_allclose(means, [50.0, 4.0])
    np.testing.assert_allclose(x, [[40, 4], [50, 3], [60, 5]])
    assert table.covariate_names == ("age", "score")


@pytest.mark.parametrize("text, message", [
    ("a,b,c,d\n1,1,1,1\n", "header"),
    ("time,event,treatment,x\n1,1,1\n", "fields"),
    ("time,event,treatment,x\n1,2,1,0\n", "event indicator not binary"),
    ("time,event,treatment,x\n1,1,1,abc\n", "malformed"),
    ("time,event,treatment,x\n1,1,0,\n", "no observed values"),
])
def test_csv_errors(tmp_path, text, message):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DataValidationError, match=message):
        read_csv(path).to_dataset()
