"""Doubly robust pseudo-outcomes and their cross-fitted construction over a time grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .data import Dataset, FoldAssignment, SubjectRecord, TimeGrid, assign_folds
from .nuisance import EPS_CLIP, NuisanceSet, fit_nuisance_set, oracle_nuisance
from .simulate import draw_conditional


def pseudo_outcome_single(record: SubjectRecord, nuisance: NuisanceSet, t: float) -> float:
    """Pseudo-outcome of one subject at one time, written out term by term."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    x = np.asarray(record.x, dtype=float)[None, :]
    y = 1.0 if record.u > t else 0.0
    phi = 0.0
    for arm, sign in ((1, 1.0), (0, -1.0)):
        s = float(nuisance.survival(x, [t], arm)[0, 0])
        g = float(nuisance.censoring(x, [t], arm)[0, 0])
        e = float(nuisance.propensity(x, arm)[0])
        correction = (y / g - s) / e if record.w == arm else 0.0
        phi += sign * (s + correction)
    return phi


def pseudo_outcomes(data: Dataset, nuisance: NuisanceSet, times) -> np.ndarray:
    """Pseudo-outcome matrix ``(n, len(times))`` for every subject under one nuisance set."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    y = (data.u[:, None] > times[None, :]).astype(float)
    phi = np.zeros((data.n, times.size))
    for arm, sign in ((1, 1.0), (0, -1.0)):
        s = nuisance.survival(data.x, times, arm)
        g = nuisance.censoring(data.x, times, arm)
        e = nuisance.propensity(data.x, arm)[:, None]
        treated = (data.w == arm)[:, None]
        phi += sign * (s + treated / e * (y / g - s))
    return phi


def pseudo_outcome_bound(eps_clip: float) -> float:
    return 1.0 + 2.0 / eps_clip ** 2


@dataclass(frozen=True)
class FoldProvenance:
    fold: int
    train_index: np.ndarray = field(repr=False)
    eval_index: np.ndarray = field(repr=False)
    nuisance: str = "fitted"
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class PseudoOutcomeMatrix:
    values: np.ndarray
    grid: TimeGrid
    fold_assignment: FoldAssignment | None
    provenance: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("non-finite pseudo-outcome")
        self.values.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def check_hygiene(self) -> None:
        """Every subject's nuisances came from a training split that excludes it."""
        seen = np.zeros(self.n, dtype=int)
        for prov in self.provenance:
            if np.intersect1d(prov.train_index, prov.eval_index).size:
                raise AssertionError(f"fold {prov.fold}: training split overlaps evaluated subjects")
            seen[prov.eval_index] += 1
        if np.any(seen != 1):
            raise AssertionError("each subject must be evaluated exactly once")


NuisanceSpec = Union[str, NuisanceSet, Callable[[Dataset], NuisanceSet]]


def cross_fit_pseudo_outcomes(data: Dataset, grid: TimeGrid, k: int = 5, seed: int = 0,
                              nuisance_spec: NuisanceSpec = "fitted",
                              eps_clip: float = EPS_CLIP) -> PseudoOutcomeMatrix:
    """Cross-fitted pseudo-outcomes on ``grid``.

    ``nuisance_spec`` is ``"fitted"`` (Cox/logistic fits on each training
    split), a callable ``train -> NuisanceSet`` for other learners, or a fixed
    :class:`NuisanceSet` such as an oracle, in which case no folds are used.
    """
    if isinstance(nuisance_spec, NuisanceSet):
        values = pseudo_outcomes(data, nuisance_spec, grid.times)
        prov = FoldProvenance(-1, np.empty(0, dtype=np.int64), np.arange(data.n), nuisance_spec.provenance)
        return PseudoOutcomeMatrix(values, grid, None, (prov,))

    if nuisance_spec == "fitted":
        fitter = lambda train: fit_nuisance_set(train, eps_clip=eps_clip)
    elif callable(nuisance_spec):
        fitter = nuisance_spec
    else:
        raise ValueError(f"unknown nuisance specification {nuisance_spec!r}")

    folds = assign_folds(data.n, k, seed)
    values = np.empty((data.n, grid.j))
    provenance = []
    for fold in range(k):
        train_idx = folds.complement(fold)
        eval_idx = folds.members(fold)
        try:
            nuisance = fitter(data.subset(train_idx))
        except ValueError as exc:
            raise ValueError(f"fold {fold}: {exc}") from exc
        values[eval_idx] = pseudo_outcomes(data.subset(eval_idx), nuisance, grid.times)
        provenance.append(FoldProvenance(fold, train_idx, eval_idx, nuisance.provenance,
                                         dict(nuisance.diagnostics)))
    return PseudoOutcomeMatrix(values, grid, folds, tuple(provenance))


@dataclass(frozen=True)
class BiasCheck:
    lhs: float
    rhs: float
    lhs_se: float


def bias_decomposition_check(params, nuisance: NuisanceSet, x, t: float, draws: int,
                             seed: int = 0) -> BiasCheck:
    """Conditional bias of the pseudo-outcome at ``(x, t)``: Monte Carlo versus the analytic decomposition.

    ``lhs`` averages ``phi_hat - phi_true`` over ``draws`` fresh ``(W, T, C)``
    samples at ``x``, holding both nuisance sets fixed. ``rhs`` is

        sum_w (-1)^(w+1) [ (e_hat - e)/e_hat (S_hat - S) + (e/e_hat)(S/G_hat)(G - G_hat) ]

    evaluated with the nuisance values exactly as ``nuisance`` returns them
    (clipped) and the unclipped truths.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    w, t_event, c = draw_conditional(params, x, draws, rng)
    u = np.minimum(t_event, c)
    sample = Dataset.from_arrays(u, (t_event <= c).astype(int), np.broadcast_to(x, (draws, x.size)), w)
    truth = oracle_nuisance(params, eps_clip=0.0)
    diff = (pseudo_outcomes(sample, nuisance, [t]) - pseudo_outcomes(sample, truth, [t]))[:, 0]

    xr = x[None, :]
    rhs = 0.0
    for arm, sign in ((1, 1.0), (0, -1.0)):
        e_hat = nuisance.propensity(xr, arm)[0]
        s_hat = nuisance.survival(xr, [t], arm)[0, 0]
        g_hat = nuisance.censoring(xr, [t], arm)[0, 0]
        p1 = float(params.propensity(xr)[0])
        e0 = p1 if arm == 1 else 1.0 - p1
        s0 = float(params.survival(xr, [t], np.array([arm]))[0, 0])
        g0 = float(params.censoring_survival(xr, [t], arm)[0, 0])
        rhs += sign * ((e_hat - e0) / e_hat * (s_hat - s0) + (e0 / e_hat) * (s0 / g_hat) * (g0 - g_hat))
    return BiasCheck(float(diff.mean()), float(rhs), float(diff.std(ddof=1) / np.sqrt(draws)))
