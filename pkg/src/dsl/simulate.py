"""Data-generating processes for the three simulation cases and the low-dimensional preset.

Every generator is a pure function of ``(params, seed)``. The true treatment
effect on the survival probability is available in closed form for Cases 1
and 2 and through a one-dimensional integral for Case 3.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import ClassVar, Union

import numpy as np
from scipy import integrate
from scipy.special import expit

from .data import Dataset

SeedLike = Union[int, np.random.SeedSequence]

T_CAP = 1.0e3
BISECTION_TOL = 1.0e-10
PANEL_CAP = 0.25
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


def linspace_coeffs(lo: float, hi: float, d: int) -> np.ndarray:
    """``d`` evenly spaced values from ``lo`` to ``hi`` inclusive (decreasing allowed)."""
    if d < 2:
        raise ValueError("need d >= 2 for an evenly spaced coefficient vector")
    return np.linspace(lo, hi, d)


def derive_seed(master: int, r: int) -> int:
    """Replicate seed: ``master XOR blake2b(r)`` truncated to 63 bits."""
    digest = hashlib.blake2b(str(int(r)).encode(), digest_size=8).digest()
    return (int(master) ^ int.from_bytes(digest, "little")) & ((1 << 63) - 1)


def gen_covariates(n: int, d: int, seed: SeedLike) -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    return np.random.default_rng(seed).uniform(-3.0, 3.0, size=(n, d))


def sample_weibull_cox(lam, nu, eta, uniform_draw):
    """Inverse-transform draw from the Weibull-Cox model with cumulative hazard ``lam * t**nu * exp(eta)``."""
    u = np.asarray(uniform_draw, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("uniform draw must lie strictly inside (0, 1)")
    if lam <= 0 or nu <= 0:
        raise ValueError("lam and nu must be positive")
    t = (-np.log(u) / (lam * np.exp(eta))) ** (1.0 / nu)
    return t if t.ndim else float(t)


def child_seeds(seed: SeedLike, k: int) -> list[np.random.SeedSequence]:
    """``k`` independent child sequences; unlike ``SeedSequence.spawn`` this never mutates ``seed``."""
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return [np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + (i,)) for i in range(k)]


def _open_uniform(rng, size):
    return rng.uniform(np.finfo(float).tiny, 1.0, size)


# --- parameter sets ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Case1Params:
    """Weibull-Cox event times, exponential-Cox censoring, logistic treatment."""

    n: int
    d: int
    lam: float
    nu: float
    lambda_c: float
    alpha: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    tag: str = "case1"

    case: ClassVar[int] = 1

    def __post_init__(self):
        if self.lam <= 0 or self.nu <= 0 or self.lambda_c <= 0:
            raise ValueError("lam, nu and lambda_c must be positive")
        for name in ("alpha", "beta", "theta", "gamma"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (self.d,):
                raise ValueError(f"{name} must have length d={self.d}")
            object.__setattr__(self, name, vec)

    @classmethod
    def standard(cls, n: int = 800, d: int = 30, **overrides):
        kw = dict(
            lam=0.1, nu=1.2, lambda_c=0.2,
            alpha=linspace_coeffs(-1.0, 1.0, d),
            beta=linspace_coeffs(0.4, -0.2, d),
            theta=linspace_coeffs(0.3, -0.1, d),
            gamma=linspace_coeffs(0.3, -0.3, d),
        )
        kw.update(overrides)
        return cls(n=n, d=d, **kw)

    def with_n(self, n: int):
        return replace(self, n=n)

    # nuisance truths -- x is (m, d), t broadcast against the trailing axis
    def propensity(self, x) -> np.ndarray:
        return expit(np.atleast_2d(x) @ self.alpha)

    def survival(self, x, t, w) -> np.ndarray:
        x = np.atleast_2d(x)
        eta = x @ self.beta + np.asarray(w) * (x @ self.theta)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.exp(-self.lam * t[None, :] ** self.nu * np.exp(eta)[:, None])

    def censoring_survival(self, x, t, w=None) -> np.ndarray:
        x = np.atleast_2d(x)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.exp(-self.lambda_c * t[None, :] * np.exp(x @ self.gamma)[:, None])

    def sample_event_times(self, x, w, rng) -> tuple[np.ndarray, int]:
        eta = x @ self.beta + w * (x @ self.theta)
        return sample_weibull_cox(self.lam, self.nu, eta, _open_uniform(rng, x.shape[0])), 0

    def sample_censoring_times(self, x, rng) -> np.ndarray:
        return rng.exponential(1.0 / (self.lambda_c * np.exp(x @ self.gamma)))


@dataclass(frozen=True, eq=False)
class Case2Params(Case1Params):
    """Case 1 survival and censoring with a nonlinear treatment-assignment index."""

    tag: str = "case2"
    case: ClassVar[int] = 2

    def propensity(self, x) -> np.ndarray:
        eta = np.atleast_2d(x) @ self.alpha
        logit = (0.5 + 0.45 * np.tanh(eta / 1.2) + 0.25 * (eta > 0)
                 - 0.15 * (eta < 1) + 0.1 * np.sin(eta ** 2 / 3.0))
        return expit(logit)


@dataclass(frozen=True, eq=False)
class Case3Params:
    """Non-proportional hazards with an oscillating treatment effect.

    The hazard is ``lambda0 * exp(g + w * h * sin(v * t))`` with ``g = beta.x``,
    ``v = theta.x`` and ``h = 0.5 cos(u) + 0.2 u**2`` for ``u = gamma.x``.
    ``gamma_cens`` is the censoring coefficient vector shared with Case 1; it is
    kept apart from ``gamma`` even though both are written with the same symbol
    in the original description.
    """

    n: int
    d: int
    lambda0: float
    lambda_c: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    gamma_cens: np.ndarray
    tag: str = "case3"

    case: ClassVar[int] = 3

    def __post_init__(self):
        if self.lambda0 <= 0 or self.lambda_c <= 0:
            raise ValueError("lambda0 and lambda_c must be positive")
        for name in ("alpha", "beta", "gamma", "theta", "gamma_cens"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (self.d,):
                raise ValueError(f"{name} must have length d={self.d}")
            object.__setattr__(self, name, vec)

    @classmethod
    def standard(cls, n: int = 800, d: int = 30, **overrides):
        kw = dict(
            lambda0=0.05, lambda_c=0.05,
            alpha=linspace_coeffs(-1.0, 1.0, d),
            beta=linspace_coeffs(-0.3, 0.5, d),
            gamma=linspace_coeffs(-0.2, 0.3, d),
            theta=linspace_coeffs(-0.2, 0.4, d),
            gamma_cens=linspace_coeffs(0.3, -0.3, d),
        )
        kw.update(overrides)
        return cls(n=n, d=d, **kw)

    def with_n(self, n: int):
        return replace(self, n=n)

    def indices(self, x):
        x = np.atleast_2d(x)
        g = x @ self.beta
        u = x @ self.gamma
        v = x @ self.theta
        h = 0.5 * np.cos(u) + 0.2 * u ** 2
        return g, h, v

    def propensity(self, x) -> np.ndarray:
        return expit(np.atleast_2d(x) @ self.alpha)

    def survival(self, x, t, w, method: str = "gl") -> np.ndarray:
        g, h, v = self.indices(x)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        rate = self.lambda0 * np.exp(g)[:, None]
        w = np.broadcast_to(np.asarray(w), g.shape)
        out = np.exp(-rate * t[None, :])
        treated = np.flatnonzero(w == 1)
        if treated.size:
            hh = np.broadcast_to(h[treated, None], (treated.size, t.size))
            vv = np.broadcast_to(v[treated, None], (treated.size, t.size))
            tt = np.broadcast_to(t[None, :], (treated.size, t.size))
            integral = oscillatory_integral(hh, vv, tt, method=method)
            out[treated] = np.exp(-rate[treated] * integral)
        return out

    def censoring_survival(self, x, t, w=None) -> np.ndarray:
        x = np.atleast_2d(x)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.exp(-self.lambda_c * t[None, :] * np.exp(x @ self.gamma_cens)[:, None])

    def sample_event_times(self, x, w, rng) -> tuple[np.ndarray, int]:
        g, h, v = self.indices(x)
        e = rng.standard_exponential(x.shape[0])
        rate = self.lambda0 * np.exp(g)
        t = e / rate
        treated = np.flatnonzero(w == 1)
        breaches = 0
        if treated.size:
            t_treated, breached = invert_oscillatory_cumhaz(e[treated] / rate[treated], h[treated], v[treated])
            t[treated] = t_treated
            breaches = int(breached.sum())
        return t, breaches

    def sample_censoring_times(self, x, rng) -> np.ndarray:
        return rng.exponential(1.0 / (self.lambda_c * np.exp(x @ self.gamma_cens)))


CaseParams = Union[Case1Params, Case2Params, Case3Params]


def appendix_params(n: int = 2000, d: int = 10) -> Case1Params:
    """Low-dimensional Case 1 preset: same coefficient intervals re-spaced to length ``d``."""
    return replace(Case1Params.standard(n=n, d=d), tag="appendix")


def params_for(case, n: int, d: int | None = None) -> CaseParams:
    """Standard simulation parameters for a case tag: ``1``, ``2``, ``3`` or ``"appendix"``."""
    key = str(case).lower()
    if key == "appendix":
        return appendix_params(n=n, d=d or 10)
    builders = {"1": Case1Params.standard, "2": Case2Params.standard, "3": Case3Params.standard}
    if key not in builders:
        raise ValueError(f"unknown case {case!r}")
    return builders[key](n=n, d=d or 30)


# --- Case 3 cumulative hazard --------------------------------------------------


def _panel_width(v):
    absv = np.abs(v)
    with np.errstate(divide="ignore"):
        return np.where(absv > 0, np.minimum(np.pi / absv, PANEL_CAP), PANEL_CAP)


def oscillatory_integral(h, v, t, method: str = "gl") -> np.ndarray:
    """Elementwise ``int_0^t exp(h sin(v s)) ds``.

    ``method="gl"`` uses composite 10-point Gauss-Legendre on panels no wider
    than ``min(pi/|v|, 0.25)``; ``method="quad"`` uses adaptive quadrature with
    absolute tolerance 1e-8, one call per element.
    """
    h, v, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (h, v, t)))
    if np.any(t < 0):
        raise ValueError("integration limit must be nonnegative")
    if method == "quad":
        out = np.empty(h.shape)
        for idx in np.ndindex(h.shape):
            hi, vi, ti = h[idx], v[idx], t[idx]
            limit = int(min(max(50, 4 * ti / _panel_width(vi)), 5000))
            out[idx] = integrate.quad(lambda s: np.exp(hi * np.sin(vi * s)), 0.0, ti,
                                      epsabs=1e-8, epsrel=1e-10, limit=limit)[0]
        return out
    if method != "gl":
        raise ValueError(f"unknown method {method!r}")
    hf, vf, tf = h.ravel(), v.ravel(), t.ravel()
    npan = np.maximum(np.ceil(tf / _panel_width(vf)), 1).astype(np.int64)
    width = tf / npan
    out = np.empty(hf.size)
    budget = 200_000
    start = 0
    cum = np.cumsum(npan)
    while start < hf.size:
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + budget, side="right"))
        stop = max(stop, start + 1)
        idx = np.arange(start, stop)
        owner = np.repeat(np.arange(idx.size), npan[idx])
        first = np.concatenate([[0], np.cumsum(npan[idx])[:-1]])
        panel = np.arange(owner.size) - first[owner]
        wdt = width[idx][owner]
        s = (panel * wdt)[:, None] + wdt[:, None] * (_GL_NODES + 1.0) / 2.0
        f = np.exp(hf[idx][owner][:, None] * np.sin(vf[idx][owner][:, None] * s))
        out[idx] = np.bincount(owner, weights=(f @ _GL_WEIGHTS) * wdt / 2.0, minlength=idx.size)
        start = stop
    return out.reshape(h.shape)


def _gl_partial(h, v, a, s):
    """Vectorised GL integral of ``exp(h sin(v .))`` over ``[a, a + s]`` (single panel)."""
    nodes = a[:, None] + s[:, None] * (_GL_NODES + 1.0) / 2.0
    return (np.exp(h[:, None] * np.sin(v[:, None] * nodes)) @ _GL_WEIGHTS) * s / 2.0


def invert_oscillatory_cumhaz(target, h, v, t_cap: float = T_CAP, tol: float = BISECTION_TOL):
    """Solve ``int_0^T exp(h sin(v s)) ds = target`` for each element.

    The bracketing panel is found by accumulating Gauss-Legendre panels from
    zero; the root is then bisected inside that panel down to ``tol``. Elements
    whose root lies beyond ``t_cap`` are returned as ``t_cap`` and flagged.
    """
    target = np.asarray(target, dtype=float)
    h = np.asarray(h, dtype=float)
    v = np.asarray(v, dtype=float)
    m = target.size
    lo = np.zeros(m)
    width = np.zeros(m)
    resid = np.zeros(m)
    breached = np.zeros(m, dtype=bool)
    block = 256
    for i in range(m):
        wdt = float(_panel_width(v[i]))
        acc = 0.0
        edge = 0.0
        found = False
        while edge < t_cap:
            k = min(block, int(np.ceil((t_cap - edge) / wdt)))
            starts = edge + wdt * np.arange(k)
            widths = np.minimum(wdt, t_cap - starts)
            vals = _gl_partial(np.full(k, h[i]), np.full(k, v[i]), starts, widths)
            run = acc + np.cumsum(vals)
            hit = np.searchsorted(run, target[i], side="left")
            if hit < k:
                lo[i] = starts[hit]
                width[i] = widths[hit]
                resid[i] = target[i] - (run[hit - 1] if hit else acc)
                found = True
                break
            acc = run[-1]
            edge = starts[-1] + widths[-1]
        if not found:
            breached[i] = True
    a = np.zeros(m)
    b = width.copy()
    live = ~breached
    while live.any() and np.max(b[live] - a[live]) > tol:
        mid = 0.5 * (a + b)
        below = _gl_partial(h[live], v[live], lo[live], mid[live]) < resid[live]
        idx = np.flatnonzero(live)
        a[idx[below]] = mid[idx[below]]
        b[idx[~below]] = mid[idx[~below]]
    t = lo + 0.5 * (a + b)
    t[breached] = t_cap
    return t, breached


# --- generation ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    """Observed data plus the generating parameters and latent times for diagnostics."""

    dataset: Dataset
    params: CaseParams
    event_time: np.ndarray
    censor_time: np.ndarray
    cap_breaches: int = 0
    seed: object = field(default=None, repr=False)

    @property
    def case(self) -> int:
        return self.params.case


def _generate(params, seed: SeedLike) -> SimulatedDataset:
    cov_seed, rest_seed = child_seeds(seed, 2)
    x = gen_covariates(params.n, params.d, cov_seed)
    rng = np.random.default_rng(rest_seed)
    w = (rng.random(params.n) < params.propensity(x)).astype(np.int8)
    t, breaches = params.sample_event_times(x, w, rng)
    c = params.sample_censoring_times(x, rng)
    u = np.minimum(t, c)
    delta = (t <= c).astype(np.int8)
    return SimulatedDataset(Dataset.from_arrays(u, delta, x, w), params, t, c, breaches, seed)


def gen_case1(params: Case1Params, seed: SeedLike) -> SimulatedDataset:
    return _generate(params, seed)


def gen_case2(params: Case2Params, seed: SeedLike) -> SimulatedDataset:
    return _generate(params, seed)


def gen_case3(params: Case3Params, seed: SeedLike) -> SimulatedDataset:
    """Case 3 data; treated event times come from bisection on the cumulative hazard.

    Roots beyond ``T_CAP`` are recorded at the cap (the subject is then
    censored by any censoring time below the cap) and counted in
    ``cap_breaches``.
    """
    return _generate(params, seed)


def generate(params: CaseParams, seed: SeedLike) -> SimulatedDataset:
    return _generate(params, seed)


def draw_conditional(params: CaseParams, x, draws: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``draws`` independent ``(W, T, C)`` triples at a fixed covariate vector."""
    xx = np.broadcast_to(np.asarray(x, dtype=float), (draws, params.d))
    w = (rng.random(draws) < params.propensity(xx)).astype(np.int8)
    t, _ = params.sample_event_times(xx, w, rng)
    c = params.sample_censoring_times(xx, rng)
    return w, t, c


def true_cate(params: CaseParams, x, t, method: str = "quad") -> np.ndarray:
    """True effect on survival at ``t``: ``S1(x;t) - S0(x;t)``.

    ``x`` may be one covariate vector or a matrix of rows; ``t`` a scalar or
    a vector of times. Returns an array of shape ``(rows, len(t))``. For Case 3
    ``method`` selects adaptive quadrature (``"quad"``) or composite
    Gauss-Legendre (``"gl"``) for the treated-arm integral.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ones = np.ones(x.shape[0], dtype=np.int8)
    if isinstance(params, Case3Params):
        s1 = params.survival(x, t, ones, method=method)
    else:
        s1 = params.survival(x, t, ones)
    return s1 - params.survival(x, t, 0 * ones)
