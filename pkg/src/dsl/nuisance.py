"""Nuisance models: conditional event survival, censoring survival and propensity.

Fitted nuisances are Cox proportional hazards models (Breslow ties, Breslow
baseline) per treatment arm and a pooled logistic propensity model. Oracle
nuisances evaluate the true functions of a simulation case, optionally with
one component replaced by a deliberately wrong function.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .data import Dataset, StepFunction
from .simulate import generate

log = logging.getLogger(__name__)

EPS_CLIP = 0.025
GRAD_TOL = 1e-8
MAX_ITER = 100
_MAX_HALVINGS = 60
# log-likelihood comparisons tolerate this much relative rounding
_LL_RTOL = 1e-12


class ConvergenceWarning(UserWarning):
    pass


# --- Cox ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoxModel:
    coefficients: np.ndarray
    baseline_cumhaz: StepFunction
    iterations: int
    grad_norm: float
    converged: bool
    loglik_path: tuple = field(default=(), repr=False)

    @property
    def loglik(self) -> float:
        return self.loglik_path[-1] if self.loglik_path else float("nan")


class _CoxProblem:
    """Sorted data and risk-set bookkeeping for the Breslow partial likelihood."""

    def __init__(self, x, time, event):
        order = np.argsort(time, kind="stable")
        self.x = np.asarray(x, dtype=float)[order]
        self.time = np.asarray(time, dtype=float)[order]
        self.event = np.asarray(event, dtype=float)[order]
        # risk set of position p starts at the first tied time
        self.first = np.searchsorted(self.time, self.time, side="left")
        self.ev = np.flatnonzero(self.event == 1)

    @staticmethod
    def _revcumsum(a):
        return np.cumsum(a[::-1], axis=0)[::-1]

    def evaluate(self, beta, order: int = 2):
        eta = self.x @ beta
        shift = eta.max()
        r = np.exp(eta - shift)
        s0 = self._revcumsum(r)[self.first][self.ev]
        ll = float(np.sum(eta[self.ev]) - np.sum(np.log(s0) + shift))
        if order == 0:
            return ll, None, None
        rx = r[:, None] * self.x
        s1 = self._revcumsum(rx)[self.first][self.ev]
        mean = s1 / s0[:, None]
        grad = self.x[self.ev].sum(axis=0) - mean.sum(axis=0)
        rxx = rx[:, :, None] * self.x[:, None, :]
        s2 = self._revcumsum(rxx)[self.first][self.ev]
        info = (s2 / s0[:, None, None]).sum(axis=0) - mean.T @ mean
        return ll, grad, info

    def breslow(self, beta) -> StepFunction:
        eta = self.x @ beta
        shift = eta.max()
        s0 = self._revcumsum(np.exp(eta - shift))
        times = np.unique(self.time[self.ev])
        if times.size == 0:
            return StepFunction(np.empty(0), np.empty(0), 0.0)
        first = np.searchsorted(self.time, times, side="left")
        deaths = np.bincount(np.searchsorted(times, self.time[self.ev]), minlength=times.size)
        increments = deaths / (s0[first] * np.exp(shift))
        return StepFunction(times, np.cumsum(increments), 0.0)


def _monotone(path) -> bool:
    path = np.asarray(path)
    return bool(np.all(np.diff(path) >= -_LL_RTOL * np.maximum(1.0, np.abs(path[:-1]))))


def _newton(evaluate, p, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Damped Newton ascent. Returns ``beta, iterations, grad_norm, converged, loglik_path``.

    Each accepted step does not decrease the objective (up to rounding at
    relative level ``_LL_RTOL``); steps are halved until that holds.
    """
    beta = np.zeros(p)
    ll, grad, info = evaluate(beta)
    path = [ll]
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gnorm <= tol:
            return beta, it - 1, gnorm, True, tuple(path)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = beta + scale * step
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                ll_new = evaluate(cand, 0)[0]
            if np.isfinite(ll_new) and ll_new >= ll - _LL_RTOL * max(1.0, abs(ll)):
                break
            scale *= 0.5
        else:
            return beta, it, gnorm, False, tuple(path)
        beta = cand
        ll, grad, info = evaluate(beta)
        path.append(ll)
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    return beta, max_iter, gnorm, gnorm <= tol, tuple(path)


def fit_cox_arrays(x, time, event, coefficients: Optional[np.ndarray] = None,
                   tol: float = GRAD_TOL, max_iter: int = MAX_ITER) -> CoxModel:
    """Cox model by Newton-Raphson on the Breslow partial likelihood.

    Passing ``coefficients`` skips the optimisation and only computes the
    Breslow baseline at those coefficients.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    event = np.asarray(event)
    if not np.any(event == 1):
        raise ValueError("Cox fit needs at least one event")
    problem = _CoxProblem(x, time, event)
    if coefficients is not None:
        beta = np.asarray(coefficients, dtype=float)
        ll, grad, _ = problem.evaluate(beta)
        return CoxModel(beta, problem.breslow(beta), 0, float(np.max(np.abs(grad))), True, (ll,))
    beta, iters, gnorm, converged, path = _newton(problem.evaluate, x.shape[1], tol, max_iter)
    if not _monotone(path):
        raise RuntimeError("partial log-likelihood decreased during Newton iterations")
    if not converged:
        warnings.warn(f"Cox fit did not converge (gradient norm {gnorm:.3g} after {iters} iterations)",
                      ConvergenceWarning, stacklevel=2)
    return CoxModel(beta, problem.breslow(beta), iters, gnorm, converged, path)


def fit_cox(data: Dataset, outcome: str = "event", **kwargs) -> CoxModel:
    """Fit a Cox model to one arm; ``outcome="censoring"`` models the censoring time (indicator ``1 - delta``)."""
    if outcome == "event":
        event = data.delta
    elif outcome == "censoring":
        event = 1 - data.delta
    else:
        raise ValueError(f"outcome must be 'event' or 'censoring', got {outcome!r}")
    return fit_cox_arrays(data.x, data.u, event, **kwargs)


def cox_survival(model: CoxModel, x, t) -> np.ndarray:
    """``exp(-Lambda0(t) exp(beta.x))`` for rows of ``x`` and times ``t``; shape ``(rows, len(t))``.

    The baseline is held at its last value beyond the final event time.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    cumhaz = model.baseline_cumhaz(t)
    return np.exp(-np.exp(x @ model.coefficients)[:, None] * cumhaz[None, :])


# --- logistic ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LogisticModel:
    intercept: float
    coefficients: np.ndarray
    converged: bool
    iterations: int = 0
    ridge: float = 0.0
    loglik_path: tuple = field(default=(), repr=False)

    def linear_predictor(self, x) -> np.ndarray:
        return self.intercept + np.atleast_2d(np.asarray(x, dtype=float)) @ self.coefficients


def _logistic_problem(x1, w, ridge):
    penalty = np.full(x1.shape[1], ridge)
    penalty[0] = 0.0

    def evaluate(theta, order=2):
        lp = x1 @ theta
        ll = float(np.sum(w * lp - np.logaddexp(0.0, lp)) - 0.5 * np.sum(penalty * theta ** 2))
        if order == 0:
            return ll, None, None
        p = expit(lp)
        grad = x1.T @ (w - p) - penalty * theta
        info = (x1 * (p * (1 - p))[:, None]).T @ x1 + np.diag(penalty)
        return ll, grad, info

    return evaluate


def fit_logistic(x_matrix, w, tol: float = GRAD_TOL, max_iter: int = MAX_ITER,
                 ridge_fallback: float = 1e-6) -> LogisticModel:
    """Maximum-likelihood logistic regression by Newton/IRLS.

    If the unpenalised fit fails to converge (the usual symptom of separation)
    it is refitted with a ridge penalty of ``ridge_fallback`` on the slopes.
    """
    x = np.atleast_2d(np.asarray(x_matrix, dtype=float))
    w = np.asarray(w, dtype=float)
    if x.shape[0] != w.shape[0]:
        raise ValueError("x and w lengths differ")
    if np.all(w == w[0]):
        raise ValueError("logistic fit needs both classes present")
    x1 = np.column_stack([np.ones(x.shape[0]), x])
    ridge = 0.0
    theta, iters, gnorm, converged, path = _newton(_logistic_problem(x1, w, 0.0), x1.shape[1], tol, max_iter)
    if not converged or np.max(np.abs(x1 @ theta)) > 35:
        ridge = ridge_fallback
        theta, iters, gnorm, converged, path = _newton(_logistic_problem(x1, w, ridge), x1.shape[1], tol, max_iter)
    if not _monotone(path):
        raise RuntimeError("log-likelihood decreased during Newton iterations")
    if not converged:
        warnings.warn(f"logistic fit did not converge (gradient norm {gnorm:.3g})", ConvergenceWarning, stacklevel=2)
    return LogisticModel(float(theta[0]), theta[1:], converged, iters, ridge, path)


def predict_propensity(model: LogisticModel, x, w, eps_clip: float = EPS_CLIP) -> np.ndarray:
    """``P(W = w | x)`` clipped into ``[eps_clip, 1 - eps_clip]``."""
    p1 = expit(model.linear_predictor(x))
    p = np.where(np.asarray(w) == 1, p1, 1.0 - p1)
    return np.clip(p, eps_clip, 1.0 - eps_clip)


# --- nuisance sets -----------------------------------------------------------


def _by_arm(fn, x, t, w):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = np.broadcast_to(np.asarray(w), (x.shape[0],))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((x.shape[0], t.size))
    for arm in (0, 1):
        rows = np.flatnonzero(w == arm)
        if rows.size:
            out[rows] = fn(x[rows], t, arm)
    return out


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Evaluators for ``S^w(x;t)``, ``G^w(x;t)`` and ``e^w(x)``, with clipping applied.

    The raw callables take ``(x_rows, t_vector, arm)`` for the survival-type
    functions and ``x_rows`` for ``treated_propensity``. Censoring survival is
    floored at ``eps_clip`` and propensities are clipped into
    ``[eps_clip, 1 - eps_clip]``; the event survival is only clipped to
    ``[0, 1]`` because it never appears in a denominator.
    """

    survival_fn: Callable
    censoring_fn: Callable
    treated_propensity: Callable
    provenance: str
    eps_clip: float = EPS_CLIP
    diagnostics: dict = field(default_factory=dict)

    def survival(self, x, t, w) -> np.ndarray:
        return np.clip(_by_arm(self.survival_fn, x, t, w), 0.0, 1.0)

    def censoring(self, x, t, w) -> np.ndarray:
        return np.clip(_by_arm(self.censoring_fn, x, t, w), self.eps_clip, 1.0)

    def propensity(self, x, w) -> np.ndarray:
        p1 = np.asarray(self.treated_propensity(np.atleast_2d(np.asarray(x, dtype=float))), dtype=float)
        p = np.where(np.asarray(w) == 1, p1, 1.0 - p1)
        return np.clip(p, self.eps_clip, 1.0 - self.eps_clip)


def fit_nuisance_set(train: Dataset, eps_clip: float = EPS_CLIP) -> NuisanceSet:
    """Per-arm Cox fits for event and censoring times plus a pooled logistic propensity."""
    for arm in (0, 1):
        sub = train.delta[train.w == arm]
        if sub.size == 0:
            raise ValueError(f"arm {arm} is empty")
        if not np.any(sub == 1):
            raise ValueError(f"arm {arm} has no events (all censored)")
        if not np.any(sub == 0):
            raise ValueError(f"arm {arm} has no censorings")
    diagnostics = {"nonconverged": []}
    event_models, censor_models = {}, {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        for arm in (0, 1):
            data = train.arm(arm)
            event_models[arm] = fit_cox(data, "event")
            censor_models[arm] = fit_cox(data, "censoring")
        logit = fit_logistic(train.x, train.w)
    for arm in (0, 1):
        for name, m in (("event", event_models[arm]), ("censoring", censor_models[arm])):
            if not m.converged:
                diagnostics["nonconverged"].append(f"cox-{name}-arm{arm}")
    if not logit.converged:
        diagnostics["nonconverged"].append("logistic")
    diagnostics["logistic_ridge"] = logit.ridge
    for w in caught:
        log.warning("%s", w.message)

    return NuisanceSet(
        survival_fn=lambda x, t, arm: cox_survival(event_models[arm], x, t),
        censoring_fn=lambda x, t, arm: cox_survival(censor_models[arm], x, t),
        treated_propensity=lambda x: expit(logit.linear_predictor(x)),
        provenance="fitted",
        eps_clip=eps_clip,
        diagnostics=diagnostics,
    )


MISSPEC_TAGS = (None, "wrong_S", "wrong_e", "wrong_G")


def reference_median_u(params, n: int = 10_000, seed: int = 0) -> float:
    """Median observed time of a large reference sample from ``params``."""
    return float(np.median(generate(params.with_n(n), seed).dataset.u))


def oracle_nuisance(params, misspec: Optional[str] = None, median_u: Optional[float] = None,
                    eps_clip: float = EPS_CLIP) -> NuisanceSet:
    """True nuisance functions of a simulation case, optionally with one component replaced.

    ``wrong_S`` and ``wrong_G`` substitute ``max(eps_clip, exp(-t / median_u))``;
    ``wrong_e`` substitutes a constant propensity of one half.
    """
    if misspec not in MISSPEC_TAGS:
        raise ValueError(f"unknown misspecification {misspec!r}")
    survival_fn = lambda x, t, arm: params.survival(x, t, np.full(x.shape[0], arm))
    censoring_fn = lambda x, t, arm: params.censoring_survival(x, t, arm)
    treated = params.propensity
    if misspec in ("wrong_S", "wrong_G"):
        if median_u is None:
            median_u = reference_median_u(params)
        scale = float(median_u)

        def wrong(x, t, arm):
            col = np.maximum(eps_clip, np.exp(-np.atleast_1d(t) / scale))
            return np.broadcast_to(col, (np.atleast_2d(x).shape[0], col.size)).copy()

        if misspec == "wrong_S":
            survival_fn = wrong
        else:
            censoring_fn = wrong
    elif misspec == "wrong_e":
        treated = lambda x: np.full(np.atleast_2d(x).shape[0], 0.5)
    tag = f"oracle(case{params.case})" if misspec is None else f"misspecified({misspec})"
    return NuisanceSet(survival_fn, censoring_fn, treated, tag, eps_clip)
