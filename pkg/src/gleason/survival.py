"""Censoring-aware risk stratification.

Harrell's concordance index, the Kaplan-Meier product-limit estimator and
Cox proportional-hazards regression (Breslow ties, Newton-Raphson with step
halving), plus the hazard ratio of a binary high-risk split.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

GRADIENT_TOL = 1e-8
MAX_ITER = 100
BETA_CAP = 50.0


class NonIdentifiableError(ValueError):
    """Covariates are constant or collinear, so beta is not identifiable."""


@dataclass(frozen=True)
class SurvivalDataset:
    time: np.ndarray
    event: np.ndarray
    covariates: Optional[np.ndarray] = None
    ids: Optional[list[str]] = None

    def __post_init__(self):
        t = np.asarray(self.time, dtype=np.float64)
        e = np.asarray(self.event).astype(bool)
        if t.ndim != 1 or e.shape != t.shape:
            raise ValueError("time and event must be equal-length 1-d arrays")
        if not (np.isfinite(t).all() and (t > 0).all()):
            raise ValueError("times must be positive and finite")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", e)
        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=np.float64)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != t.size:
                raise ValueError("one covariate row per subject is required")
            object.__setattr__(self, "covariates", x)

    def __len__(self) -> int:
        return self.time.size

    def with_covariates(self, covariates) -> "SurvivalDataset":
        return SurvivalDataset(self.time, self.event, covariates, self.ids)


# --------------------------------------------------------------------------
# concordance


def concordance_counts(scores, time, event, block: int = 2048) -> tuple[int, int, int]:
    """(concordant, tied, comparable) pair counts.

    A pair is comparable when the earlier time is an observed event; it is
    concordant when that subject also has the higher score.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(time, dtype=np.float64)
    e = np.asarray(event).astype(bool)
    if not (s.shape == t.shape == e.shape) or s.ndim != 1:
        raise ValueError("scores, times and events must be aligned")
    conc = ties = comp = 0
    idx = np.flatnonzero(e)
    for start in range(0, idx.size, block):
        i = idx[start:start + block]
        later = t[i, None] < t[None, :]
        comp += int(later.sum())
        conc += int((later & (s[i, None] > s[None, :])).sum())
        ties += int((later & (s[i, None] == s[None, :])).sum())
    return conc, ties, comp


def concordance_index(scores, time, event=None) -> float:
    """Harrell's c with tied scores counted as one half.

    ``time`` may be a `SurvivalDataset`, in which case ``event`` is omitted.
    Higher scores mean higher risk.
    """
    if isinstance(time, SurvivalDataset):
        time, event = time.time, time.event
    conc, ties, comp = concordance_counts(scores, time, event)
    if comp == 0:
        raise ValueError("no comparable pairs")
    return (conc + 0.5 * ties) / comp


# --------------------------------------------------------------------------
# Kaplan-Meier


@dataclass(frozen=True)
class KaplanMeierCurve:
    """Product-limit estimate tabulated at every distinct observed time."""

    time: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    censored: np.ndarray
    survival: np.ndarray

    def survival_at(self, t) -> np.ndarray | float:
        k = np.searchsorted(self.time, np.asarray(t, dtype=np.float64), side="right")
        out = np.r_[1.0, self.survival][k]
        return float(out) if np.ndim(out) == 0 else out

    def event_steps(self) -> list[tuple[float, float]]:
        sel = self.events > 0
        return list(zip(self.time[sel].tolist(), self.survival[sel].tolist()))


def kaplan_meier(time, event=None) -> KaplanMeierCurve:
    if isinstance(time, SurvivalDataset):
        time, event = time.time, time.event
    t = np.asarray(time, dtype=np.float64)
    e = np.asarray(event).astype(bool)
    if t.size == 0:
        raise ValueError("no subjects")
    uniq, inv = np.unique(t, return_inverse=True)
    d = np.bincount(inv, weights=e, minlength=uniq.size).astype(np.int64)
    total = np.bincount(inv, minlength=uniq.size)
    # subjects observed at or after each time
    n = np.cumsum(total[::-1])[::-1]
    surv = np.cumprod((n - d) / n)  # (n - d) / n rounds once, 1 - d / n twice
    return KaplanMeierCurve(uniq, n, d, total - d, surv)


# --------------------------------------------------------------------------
# Cox proportional hazards


@dataclass(frozen=True)
class CoxFit:
    beta: np.ndarray
    standard_errors: np.ndarray
    log_partial_likelihood: float
    iterations: int
    converged: bool
    gradient: np.ndarray
    loglik_history: tuple = ()
    covariate_names: Optional[tuple[str, ...]] = None

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.beta)

    def confidence_intervals(self, level: float = 0.95) -> np.ndarray:
        """Wald intervals for beta, shape (d, 2)."""
        z = stats.norm.ppf(0.5 + level / 2)
        return np.stack([self.beta - z * self.standard_errors,
                         self.beta + z * self.standard_errors], axis=1)


class _BreslowTerms:
    """Partial-likelihood value, gradient and Hessian for fixed data."""

    def __init__(self, time: np.ndarray, event: np.ndarray, x: np.ndarray):
        order = np.argsort(time, kind="stable")
        self.t = time[order]
        self.e = event[order]
        self.x = x[order]
        # risk set of position i starts at the first index sharing its time
        self.start = np.searchsorted(self.t, self.t, side="left")

    def _revcum(self, a: np.ndarray) -> np.ndarray:
        return np.cumsum(a[::-1], axis=0)[::-1]

    def _risk_sums(self, eta: np.ndarray):
        """log S0 and the weighted first and second moments of x over each
        suffix, accumulated with a running max so no risk set underflows."""
        n, d = self.x.shape
        log_s0 = np.empty(n)
        m1 = np.empty((n, d))
        m2 = np.empty((n, d, d))
        top, s0, s1, s2 = -np.inf, 0.0, np.zeros(d), np.zeros((d, d))
        for i in range(n - 1, -1, -1):
            new_top = max(top, eta[i])
            scale = np.exp(top - new_top) if np.isfinite(top) else 0.0
            w = np.exp(eta[i] - new_top)
            xi = self.x[i]
            s0 = s0 * scale + w
            s1 = s1 * scale + w * xi
            s2 = s2 * scale + w * np.outer(xi, xi)
            top = new_top
            log_s0[i] = top + np.log(s0)
            m1[i] = s1 / s0
            m2[i] = s2 / s0
        return log_s0, m1, m2

    def evaluate(self, beta: np.ndarray, derivatives: bool = True):
        eta = self.x @ beta
        ev = self.e
        shift = eta.max()
        w = np.exp(eta - shift)
        s0 = self._revcum(w)[self.start]
        if s0[ev].min() < 1e-200:
            # some risk set is far below the global maximum; use the slow exact path
            log_s0, m1, m2 = self._risk_sums(eta)
            loglik = float(np.sum(eta[ev] - log_s0[self.start][ev]))
            if not derivatives:
                return loglik, None, None
            mean = m1[self.start][ev]
            s2 = m2[self.start][ev]
        else:
            loglik = float(np.sum(eta[ev] - shift - np.log(s0[ev])))
            if not derivatives:
                return loglik, None, None
            wx = w[:, None] * self.x
            mean = self._revcum(wx)[self.start][ev] / s0[ev, None]
            wxx = wx[:, :, None] * self.x[:, None, :]
            s2 = self._revcum(wxx)[self.start][ev] / s0[ev, None, None]
        grad = (self.x[ev] - mean).sum(axis=0)
        info = (s2 - mean[:, :, None] * mean[:, None, :]).sum(axis=0)
        return loglik, grad, -info


def log_partial_likelihood(beta, time, event, covariates) -> float:
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    terms = _BreslowTerms(np.asarray(time, float), np.asarray(event, bool), x)
    return terms.evaluate(np.atleast_1d(np.asarray(beta, dtype=np.float64)), derivatives=False)[0]


def _check_identifiable(x: np.ndarray) -> None:
    centered = x - x.mean(axis=0)
    if (np.ptp(x, axis=0) == 0).any():
        raise NonIdentifiableError("a covariate is constant")
    if np.linalg.matrix_rank(centered) < x.shape[1]:
        raise NonIdentifiableError("covariates are collinear")


def _solve(hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(-hess, grad)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(-hess, grad, rcond=None)[0]


def cox_fit(dataset: SurvivalDataset, max_iter: int = MAX_ITER, tol: float = GRADIENT_TOL,
            beta_cap: float = BETA_CAP, covariate_names: Optional[Sequence[str]] = None) -> CoxFit:
    """Maximise the Breslow partial likelihood by Newton-Raphson.

    Steps are halved until the log-likelihood does not decrease. Iteration
    stops once the gradient max-norm drops below ``tol``. Fits whose
    coefficients run past ``beta_cap`` (monotone likelihood) are returned
    clipped and flagged as not converged.
    """
    if dataset.covariates is None:
        raise ValueError("dataset has no covariates")
    if not dataset.event.any():
        raise ValueError("at least one event is required")
    x = dataset.covariates
    _check_identifiable(x)
    terms = _BreslowTerms(dataset.time, dataset.event, x)
    beta = np.zeros(x.shape[1])
    loglik, grad, hess = terms.evaluate(beta)
    history = [loglik]
    capped = False
    iterations = 0
    while np.max(np.abs(grad)) >= tol and iterations < max_iter:
        step = _solve(hess, grad)
        # near the optimum the likelihood gain drops below float resolution,
        # so a level step is taken when it shrinks the gradient
        slack = 64 * np.finfo(float).eps * max(1.0, abs(loglik))
        cand_terms = None
        for _ in range(60):
            cand = beta + step
            new_ll = terms.evaluate(cand, derivatives=False)[0]
            if new_ll >= loglik:
                break
            if new_ll >= loglik - slack:
                cand_terms = terms.evaluate(cand)
                if np.max(np.abs(cand_terms[1])) < np.max(np.abs(grad)):
                    break
                cand_terms = None
            step = step / 2
        else:
            break  # no ascent direction left at float precision
        iterations += 1
        beta = cand
        if np.max(np.abs(beta)) > beta_cap:
            beta = np.clip(beta, -beta_cap, beta_cap)
            capped = True
            cand_terms = None
        loglik, grad, hess = cand_terms if cand_terms is not None else terms.evaluate(beta)
        history.append(loglik)
        if capped:
            break
    if not capped:
        # under separation the gradient decays exponentially, so a small
        # gradient alone does not prove a finite maximum
        for k in np.flatnonzero(beta):
            far = beta.copy()
            far[k] = np.sign(beta[k]) * beta_cap
            far_ll = terms.evaluate(far, derivatives=False)[0]
            if far_ll >= loglik:
                beta, capped = far, True
                loglik, grad, hess = terms.evaluate(beta)
                history.append(loglik)
    converged = not capped and bool(np.max(np.abs(grad)) < tol)
    info = -hess
    try:
        cov = np.linalg.inv(info)
        se = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        se = np.full(beta.shape, np.inf)
    return CoxFit(beta, se, loglik, iterations, converged, grad, tuple(history),
                  tuple(covariate_names) if covariate_names is not None else None)


def hazard_ratio_gg3(groups, time, event, level: float = 0.95) -> tuple[float, float, float]:
    """Hazard ratio (with Wald interval) of a binary high-risk indicator,
    e.g. ``grade_group >= 3``."""
    g = np.asarray(groups).astype(np.float64)
    if not set(np.unique(g).tolist()) <= {0.0, 1.0}:
        raise ValueError("groups must be a binary indicator")
    if g.min() == g.max():
        raise ValueError("both groups must be non-empty")
    fit = cox_fit(SurvivalDataset(time, event, g[:, None]))
    lo, hi = fit.confidence_intervals(level)[0]
    return float(np.exp(fit.beta[0])), float(np.exp(lo)), float(np.exp(hi))


def cox_cindex_of_fit(fit: CoxFit, dataset: SurvivalDataset) -> float:
    if dataset.covariates is None:
        raise ValueError("dataset has no covariates")
    return concordance_index(dataset.covariates @ fit.beta, dataset.time, dataset.event)
