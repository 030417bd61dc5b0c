import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsl.data import Dataset, SubjectRecord, TimeGrid, build_time_grid
from dsl.nuisance import EPS_CLIP, NuisanceSet, oracle_nuisance
from dsl.pseudo import (bias_decomposition_check, cross_fit_pseudo_outcomes, pseudo_outcome_bound,
                        pseudo_outcome_single, pseudo_outcomes)
from dsl.simulate import Case1Params, draw_conditional, gen_covariates, generate, true_cate


def _constant_nuisance(s1, s0, g, e1):
    """Nuisances that ignore x and t."""
    return NuisanceSet(
        survival_fn=lambda x, t, arm: np.full((x.shape[0], np.size(t)), s1 if arm == 1 else s0),
        censoring_fn=lambda x, t, arm: np.full((x.shape[0], np.size(t)), g),
        treated_propensity=lambda x: np.full(x.shape[0], e1),
        provenance="constant",
        eps_clip=0.0,
    )


def _cell(u, w, t, s1, s0, g1, g0, e1):
    """Direct evaluation of one cell of the pseudo-outcome, independent of the library."""
    y = float(u > t)
    pi1 = s1 + (w == 1) / e1 * (y / g1 - s1)
    pi0 = s0 + (w == 0) / (1 - e1) * (y / g0 - s0)
    return pi1 - pi0


def test_unit_weights_collapse_treated_term():
    nuis = _constant_nuisance(0.3, 0.6, 1.0, 1.0)
    rec = SubjectRecord(2.0, 0, (0.0,), 1)
    assert pseudo_outcome_single(rec, nuis, 1.0) == pytest.approx(0.4, abs=1e-15)


def test_control_record_uses_treated_survival_exactly():
    nuis = _constant_nuisance(0.3, 0.6, 0.7, 0.4)
    rec = SubjectRecord(0.5, 1, (0.0,), 0)
    pi0 = 0.6 + (0.0 / 0.7 - 0.6) / 0.6
    assert pseudo_outcome_single(rec, nuis, 1.0) == pytest.approx(0.3 - pi0, abs=1e-15)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        pseudo_outcome_single(SubjectRecord(1.0, 1, (0.0,), 1), _constant_nuisance(.5, .5, .5, .5), -1.0)


def test_vectorised_matches_single():
    sim = generate(Case1Params.standard(n=60, d=4), 1)
    nuis = oracle_nuisance(sim.params)
    times = [0.5, 1.5, 4.0]
    phi = pseudo_outcomes(sim.dataset, nuis, times)
    for i, rec in enumerate(sim.dataset.records):
        for j, t in enumerate(times):
            assert phi[i, j] == pytest.approx(pseudo_outcome_single(rec, nuis, t), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(u=st.floats(0.01, 10), w=st.integers(0, 1), t=st.floats(0.01, 10),
       s1=st.floats(0, 1), s0=st.floats(0, 1), g=st.floats(0.05, 1), e1=st.floats(0.05, 0.95))
def test_cell_formula_property(u, w, t, s1, s0, g, e1):
    rec = SubjectRecord(u, 1, (0.0,), w)
    got = pseudo_outcome_single(rec, _constant_nuisance(s1, s0, g, e1), t)
    assert got == pytest.approx(_cell(u, w, t, s1, s0, g, g, e1), abs=1e-12)
    assert abs(got) <= pseudo_outcome_bound(0.05)


def test_worst_case_bound_holds_under_clipping():
    # extreme nuisances, clipped only by the set itself
    nuis = NuisanceSet(lambda x, t, arm: np.full((x.shape[0], np.size(t)), 0.0 if arm else 1.0),
                       lambda x, t, arm: np.zeros((x.shape[0], np.size(t))),
                       lambda x: np.zeros(x.shape[0]), "extreme")
    data = Dataset.from_arrays([5.0, 5.0], [0, 0], np.zeros((2, 1)), [1, 0])
    phi = pseudo_outcomes(data, nuis, [1.0])
    assert np.all(np.abs(phi) <= pseudo_outcome_bound(EPS_CLIP))
    assert phi.max() == pytest.approx(1 / EPS_CLIP / EPS_CLIP - 1)


def test_identification_at_fixed_covariate():
    params = Case1Params.standard()
    x = gen_covariates(1, 30, 21)[0] * 0.3
    t = 1.5
    w, ev, c = draw_conditional(params, x, 100_000, np.random.default_rng(4))
    sample = Dataset.from_arrays(np.minimum(ev, c), (ev <= c).astype(int), np.broadcast_to(x, (w.size, 30)), w)
    phi = pseudo_outcomes(sample, oracle_nuisance(params), [t])[:, 0]
    se = phi.std(ddof=1) / np.sqrt(phi.size)
    assert abs(phi.mean() - true_cate(params, x, [t])[0, 0]) <= 3 * se


# --- cross-fitting ----------------------------------------------------------------

@pytest.fixture(scope="module")
def case1_800():
    sim = generate(Case1Params.standard(n=800), 12)
    return sim, build_time_grid(sim.dataset, 5)


def test_fold_arithmetic_and_hygiene(case1_800):
    sim, grid = case1_800
    phi = cross_fit_pseudo_outcomes(sim.dataset, grid, k=5, seed=3)
    assert phi.values.shape == (800, 5)
    np.testing.assert_array_equal(phi.fold_assignment.sizes(), [160] * 5)
    phi.check_hygiene()
    for prov in phi.provenance:
        assert prov.nuisance == "fitted"
        assert not np.isin(prov.eval_index, prov.train_index).any()
    assert np.all(np.abs(phi.values) <= pseudo_outcome_bound(EPS_CLIP))


def test_hygiene_detects_leak(case1_800):
    sim, grid = case1_800
    phi = cross_fit_pseudo_outcomes(sim.dataset, grid, k=5, seed=3)
    bad = phi.provenance[0].__class__(0, np.arange(800), phi.provenance[0].eval_index)
    leaky = type(phi)(np.array(phi.values), grid, phi.fold_assignment, (bad,) + phi.provenance[1:])
    with pytest.raises(AssertionError, match="overlaps"):
        leaky.check_hygiene()


def test_each_fold_uses_its_own_fit(case1_800):
    sim, grid = case1_800
    from dsl.nuisance import fit_nuisance_set
    phi = cross_fit_pseudo_outcomes(sim.dataset, grid, k=5, seed=3)
    prov = phi.provenance[2]
    nuis = fit_nuisance_set(sim.dataset.subset(prov.train_index))
    direct = pseudo_outcomes(sim.dataset.subset(prov.eval_index), nuis, grid.times)
    np.testing.assert_allclose(phi.values[prov.eval_index], direct, rtol=1e-12, atol=1e-12)


def test_early_exit_rows_recomputed_cell_by_cell(case1_800):
    sim, grid = case1_800
    phi = cross_fit_pseudo_outcomes(sim.dataset, grid, k=5, seed=3)
    from dsl.nuisance import fit_nuisance_set
    for prov in phi.provenance[:2]:
        nuis = fit_nuisance_set(sim.dataset.subset(prov.train_index))
        rows = [i for i in prov.eval_index if sim.dataset.u[i] < grid.t_min][:5]
        assert rows
        for i in rows:
            xi = sim.dataset.x[i:i + 1]
            for j, t in enumerate(grid.times):
                s1, s0 = nuis.survival(xi, [t], 1)[0, 0], nuis.survival(xi, [t], 0)[0, 0]
                g1, g0 = nuis.censoring(xi, [t], 1)[0, 0], nuis.censoring(xi, [t], 0)[0, 0]
                e1 = nuis.propensity(xi, 1)[0]
                w = sim.dataset.w[i]
                # Y = 0 at every grid time, so only the S terms remain
                expected = s1 - s0 - (w == 1) * s1 / e1 + (w == 0) * s0 / (1 - e1)
                assert phi.values[i, j] == pytest.approx(expected, abs=1e-12)


def test_oracle_ignores_folds(case1_800):
    sim, grid = case1_800
    nuis = oracle_nuisance(sim.params)
    a = cross_fit_pseudo_outcomes(sim.dataset, grid, k=5, seed=1, nuisance_spec=nuis)
    b = cross_fit_pseudo_outcomes(sim.dataset, grid, k=3, seed=99, nuisance_spec=nuis)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.fold_assignment is None
    a.check_hygiene()


def test_fold_error_names_fold():
    rng = np.random.default_rng(0)
    n = 20
    w = np.zeros(n, dtype=int)
    w[0] = 1
    data = Dataset.from_arrays(rng.exponential(size=n), rng.integers(0, 2, n), rng.normal(size=(n, 2)), w)
    with pytest.raises(ValueError, match=r"fold \d+: arm 1"):
        cross_fit_pseudo_outcomes(data, TimeGrid([0.5]), k=2, seed=0)


def test_unknown_nuisance_source():
    data = Dataset.from_arrays([1.0, 2.0], [1, 0], np.zeros((2, 1)), [0, 1])
    with pytest.raises(ValueError):
        cross_fit_pseudo_outcomes(data, TimeGrid([1.0]), nuisance_spec="nope")


def test_matrix_is_read_only(case1_800):
    sim, grid = case1_800
    phi = cross_fit_pseudo_outcomes(sim.dataset, grid, nuisance_spec=oracle_nuisance(sim.params))
    with pytest.raises(ValueError):
        phi.values[0, 0] = 1.0


# --- bias decomposition -------------------------------------------------------------

PROBE = gen_covariates(1, 30, 5)[0] * 0.3


def test_no_misspecification_gives_zero():
    params = Case1Params.standard()
    check = bias_decomposition_check(params, oracle_nuisance(params), PROBE, 1.5, 20_000)
    assert check.rhs == 0.0
    assert abs(check.lhs) <= 3 * check.lhs_se + 1e-12


def test_wrong_survival_is_unbiased():
    params = Case1Params.standard()
    check = bias_decomposition_check(params, oracle_nuisance(params, "wrong_S", median_u=2.0), PROBE, 1.5,
                                     100_000, seed=1)
    assert check.rhs == 0.0
    assert abs(check.lhs) <= 3 * check.lhs_se


def test_wrong_censoring_matches_formula():
    params = Case1Params.standard()
    check = bias_decomposition_check(params, oracle_nuisance(params, "wrong_G", median_u=2.0), PROBE, 1.5,
                                     100_000, seed=2)
    assert check.rhs != 0.0
    assert abs(check.lhs - check.rhs) <= 3 * check.lhs_se
