"""Gradient-guided, bounds-respecting perturbation of covariate windows.

For every iteration, horizon step ``t`` and history row ``s`` the feature
with the largest ``|d theta[p, t] / d X[s, i]|`` is moved by
``d * sign(gradient) * eps``, provided the moved value stays inside that
feature's historical range. Blocked features are skipped in order of
decreasing gradient magnitude; a cell whose candidates are all blocked is
skipped, and the run stops early once a whole iteration applies nothing.
Gradients are recomputed after every applied step.

Any object with ``forecast(z, X) -> ForecastDistribution`` and
``input_gradient(z, X, p, t) -> ndarray[k, N]`` can be stressed; the trained
:class:`~finstress.forecaster.Forecaster` and :class:`LinearSurrogate` both
qualify.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import DataError, NumericError
from .forecaster import PARAM_NAMES, ForecastDistribution, param_index
from .timeseries import FeatureStats, Window

DIRECTIONS = {"up": 1, "down": -1}


class StressableModel(Protocol):
    def forecast(self, z_history, X_window) -> ForecastDistribution: ...

    def input_gradient(self, z_history, X_window, p, t) -> np.ndarray: ...


@dataclass(frozen=True)
class PerturbationSpec:
    p: int
    d: int
    epsilon: float
    iterations: int = 1

    def __post_init__(self):
        object.__setattr__(self, "p", param_index(self.p))
        d = DIRECTIONS.get(self.d, self.d) if isinstance(self.d, str) else self.d
        if d not in (1, -1):
            raise ValueError(f"direction must be up/down or +1/-1, got {self.d!r}")
        object.__setattr__(self, "d", d)
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def param_name(self) -> str:
        return PARAM_NAMES[self.p]

    @property
    def direction_name(self) -> str:
        return "up" if self.d > 0 else "down"

    def to_dict(self) -> dict:
        return {"param": self.param_name, "direction": self.direction_name, "epsilon": self.epsilon, "iterations": self.iterations}


@dataclass(frozen=True)
class FeatureBounds:
    lower: np.ndarray
    upper: np.ndarray
    candidates: np.ndarray | None = None  # features eligible for perturbation

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        cand = np.ones(lo.shape, dtype=bool) if self.candidates is None else np.array(self.candidates, dtype=bool)
        for name, arr in (("lower", lo), ("upper", hi), ("candidates", cand)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_stats(cls, stats: FeatureStats, override: tuple[float, float] | None = None) -> "FeatureBounds":
        lo, hi = stats.lower, stats.upper
        if override is not None:
            lo = np.full_like(lo, override[0])
            hi = np.full_like(hi, override[1])
        return cls(lo, hi, ~stats.zero_variance)

    @classmethod
    def unbounded(cls, n: int) -> "FeatureBounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def __len__(self):
        return len(self.lower)


@dataclass(frozen=True)
class LogEntry:
    iteration: int
    horizon_step: int
    history_step: int
    feature: int
    delta: float


@dataclass(frozen=True)
class StressResult:
    spec: PerturbationSpec | None
    x_original: np.ndarray
    x_perturbed: np.ndarray
    theta: ForecastDistribution
    theta_perturbed: ForecastDistribution
    log: tuple[LogEntry, ...] = ()
    terminated_early: bool = False
    anchor: int | None = None

    @property
    def delta(self) -> np.ndarray:
        return self.x_perturbed - self.x_original

    def to_dict(self) -> dict:
        norms = perturbation_norms(self)
        return {
            "anchor": self.anchor,
            "spec": None if self.spec is None else self.spec.to_dict(),
            "norms": {"l1": norms[0], "linf": norms[1], "modified": norms[2]},
            "terminated_early": self.terminated_early,
            "theta": self.theta.theta.tolist(),
            "theta_perturbed": self.theta_perturbed.theta.tolist(),
            "log": [
                {"iteration": e.iteration, "t": e.horizon_step, "s": e.history_step, "feature": e.feature, "delta": e.delta}
                for e in self.log
            ],
        }


def checkbounds(i: int, s: int, proposed: float, bounds: FeatureBounds) -> bool:
    """Closed-interval range check for feature ``i`` (``s`` is accepted for interface symmetry)."""
    return bool(bounds.lower[i] <= proposed <= bounds.upper[i])


def _ranked_features(grad_row: np.ndarray, candidates: np.ndarray) -> list[int]:
    # descending |gradient|, ties broken by lowest index
    idx = [i for i in range(len(grad_row)) if candidates[i]]
    return sorted(idx, key=lambda i: (-abs(grad_row[i]), i))


def step_once(model, z_history, X_hat: np.ndarray, spec: PerturbationSpec, t: int, s: int, bounds: FeatureBounds, iteration: int = 0):
    """One (t, s) cell of the algorithm. Returns the updated window and the log entry (or None)."""
    grad = model.input_gradient(z_history, X_hat, spec.p, t)
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient at iteration {iteration}, t={t}, s={s}")
    row = grad[s]
    for i in _ranked_features(row, bounds.candidates):
        sign = np.sign(row[i])
        if sign == 0:
            # remaining candidates have zero gradient as well: nothing to follow
            return X_hat, None
        delta = spec.d * sign * spec.epsilon
        proposed = X_hat[s, i] + delta
        if checkbounds(i, s, proposed, bounds):
            out = X_hat.copy()
            out[s, i] = proposed
            return out, LogEntry(iteration, t, s, int(i), float(delta))
    return X_hat, None


def perturb(model: StressableModel, z_history, X_window, spec: PerturbationSpec, bounds: FeatureBounds, anchor: int | None = None) -> StressResult:
    X = np.array(X_window, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"covariate window must be k x N, got shape {X.shape}")
    k, N = X.shape
    if len(bounds) != N:
        raise DataError(f"bounds cover {len(bounds)} features, window has {N}")
    if len(np.asarray(z_history)) != k:
        raise DataError("target history and covariate window lengths differ")
    theta = model.forecast(z_history, X)
    horizon = theta.horizon
    X_hat = X.copy()
    log: list[LogEntry] = []
    terminated = False
    for j in range(spec.iterations):
        applied = 0
        for t in range(horizon):
            for s in range(k):
                X_hat, entry = step_once(model, z_history, X_hat, spec, t, s, bounds, j)
                if entry is not None:
                    log.append(entry)
                    applied += 1
        if applied == 0:
            terminated = True
            break
    theta_hat = model.forecast(z_history, X_hat)
    return StressResult(spec, X, X_hat, theta, theta_hat, tuple(log), terminated, anchor)


def perturbation_norms(result: StressResult) -> tuple[float, float, int]:
    """(L1 total, L-inf max, count of modified entries) of the perturbation."""
    delta = np.abs(result.delta)
    return float(delta.sum()), float(delta.max(initial=0.0)), int(np.count_nonzero(delta))


def unperturbed(model: StressableModel, z_history, X_window, spec=None, anchor=None) -> StressResult:
    X = np.array(X_window, dtype=np.float64)
    theta = model.forecast(z_history, X)
    return StressResult(spec, X, X.copy(), theta, theta, (), False, anchor)


def sweep(
    model: StressableModel,
    windows: Sequence[Window],
    template: PerturbationSpec | dict,
    epsilons: Sequence[float],
    bounds: FeatureBounds,
) -> dict[float, list[StressResult]]:
    """Run ``perturb`` on every window for each epsilon; epsilon 0 yields the plain forecast."""
    eps = [float(e) for e in epsilons]
    if not eps:
        raise ValueError("epsilon list is empty")
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon list must be ascending")
    if any(e < 0 for e in eps):
        raise ValueError("epsilon must be non-negative")
    if isinstance(template, PerturbationSpec):
        base = {"p": template.p, "d": template.d, "iterations": template.iterations}
    else:
        base = dict(template)
        base.pop("epsilon", None)
    out: dict[float, list[StressResult]] = {}
    for e in eps:
        if e == 0:
            out[e] = [unperturbed(model, w.z_history, w.x_history, anchor=w.anchor) for w in windows]
            continue
        spec = PerturbationSpec(epsilon=e, **base)
        out[e] = [perturb(model, w.z_history, w.x_history, spec, bounds, w.anchor) for w in windows]
    return out


@dataclass(frozen=True)
class LinearSurrogate:
    """Exactly linear stand-in model: ``theta[t, p] = offset[t, p] + sum(weights[p, t] * X)``.

    ``weights`` has shape 3 x horizon x k x N. Offsets for sigma and nu must
    keep those parameters valid over the region being explored.
    """

    weights: np.ndarray
    offset: np.ndarray

    def forecast(self, z_history, X_window) -> ForecastDistribution:
        X = np.asarray(X_window, dtype=float)
        theta = self.offset + np.einsum("ptsn,sn->tp", self.weights, X)
        return ForecastDistribution(theta)

    def input_gradient(self, z_history, X_window, p, t) -> np.ndarray:
        return np.array(self.weights[param_index(p), t], dtype=float)


def results_to_json(results: Sequence[StressResult]) -> str:
    return json.dumps([r.to_dict() for r in results], sort_keys=True)
