"""Autoregressive recurrent forecaster with a student-T output head.

The cell is a single tanh RNN layer. Step ``j`` of the unroll consumes the
previous target and one covariate row; after the last history row the head
emits the first horizon distribution, and every further horizon step feeds
the previous step's location back in as the lagged target (the covariates
of the last history row are held for those steps).

Raw head outputs ``(a, b, c)`` map to ``mu = a``,
``sigma = softplus(b) + 1e-6`` and ``nu = 2 + softplus(c)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .errors import DataError, NumericError
from .timeseries import Window

PARAM_NAMES = ("mu", "sigma", "nu")
SIGMA_FLOOR = 1e-6
NU_FLOOR = 1e-12  # keeps nu > 2 once softplus underflows
CHECKPOINT_VERSION = 1

_WEIGHTS = ("w_ih", "w_hh", "b_h", "w_out", "b_out")


def param_index(p: int | str) -> int:
    if isinstance(p, str):
        try:
            return PARAM_NAMES.index(p)
        except ValueError:
            raise ValueError(f"unknown distribution parameter {p!r}") from None
    if p not in (0, 1, 2):
        raise ValueError(f"parameter index must be 0, 1 or 2, got {p}")
    return p


@dataclass(frozen=True)
class ModelParams:
    w_ih: np.ndarray  # H x (1 + N); column 0 is the lagged target
    w_hh: np.ndarray  # H x H
    b_h: np.ndarray  # H
    w_out: np.ndarray  # 3 x H
    b_out: np.ndarray  # 3

    def __post_init__(self):
        for name in _WEIGHTS:
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite entries in {name}")
        H = self.w_hh.shape[0]
        if (
            self.w_ih.ndim != 2
            or self.w_ih.shape[0] != H
            or self.w_hh.shape != (H, H)
            or self.b_h.shape != (H,)
            or self.w_out.shape != (3, H)
            or self.b_out.shape != (3,)
        ):
            raise ValueError("inconsistent parameter shapes")

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[0]

    @property
    def n_features(self) -> int:
        return self.w_ih.shape[1] - 1

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _WEIGHTS}

    def replace(self, **arrays) -> "ModelParams":
        d = self.arrays()
        d.update(arrays)
        return ModelParams(**d)


@dataclass(frozen=True)
class StudentTParams:
    mu: float
    sigma: float
    nu: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.nu > 2 and math.isfinite(self.mu)):
            raise ValueError(f"invalid student-T parameters {self}")


@dataclass(frozen=True)
class ForecastDistribution:
    """Horizon x 3 matrix of (mu, sigma, nu)."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True)
        if theta.ndim != 2 or theta.shape[1] != 3 or theta.shape[0] < 1:
            raise ValueError("theta must be horizon x 3")
        if not (np.all(np.isfinite(theta)) and np.all(theta[:, 1] > 0) and np.all(theta[:, 2] > 2)):
            raise ValueError("theta violates sigma > 0 / nu > 2")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def horizon(self) -> int:
        return self.theta.shape[0]

    @property
    def mu(self) -> np.ndarray:
        return self.theta[:, 0]

    @property
    def sigma(self) -> np.ndarray:
        return self.theta[:, 1]

    @property
    def nu(self) -> np.ndarray:
        return self.theta[:, 2]

    @property
    def steps(self) -> list[StudentTParams]:
        return [StudentTParams(*map(float, row)) for row in self.theta]


@dataclass(frozen=True)
class TrainConfig:
    hidden_size: int = 32
    learning_rate: float = 0.05
    epochs: int = 200
    patience: int = 20
    weight_decay: float = 1e-4
    dropout: float = 0.0
    seed: int = 0
    batch_size: int = 0  # 0 = full batch
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.hidden_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("hidden_size, epochs and patience must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive, weight_decay non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def init_params(seed: int, H: int, N: int) -> ModelParams:
    if H < 1 or N < 1:
        raise ValueError("H and N must be >= 1")
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModelParams(
        w_ih=uniform((H, 1 + N), 1 + N),
        w_hh=uniform((H, H), H),
        b_h=np.zeros(H),
        w_out=uniform((3, H), H),
        b_out=np.zeros(3),
    )


# graph construction ----------------------------------------------------------


def _head(P: dict[str, ad.Node], h: ad.Node):
    raw = h @ P["w_out"].T + P["b_out"]  # B x 3
    mu = raw[:, 0]
    sigma = ad.softplus(raw[:, 1]) + SIGMA_FLOOR
    nu = ad.softplus(raw[:, 2]) + (2.0 + NU_FLOOR)
    return mu, sigma, nu


def _cell(P, h, z_prev: ad.Node, x_row: ad.Node):
    inp = ad.concat([ad.reshape(z_prev, (-1, 1)), x_row], axis=1)
    pre = inp @ P["w_ih"].T + P["b_h"]
    if h is not None:
        pre = pre + h @ P["w_hh"].T
    return ad.tanh(pre)


def unroll(P: dict[str, ad.Node], z_hist: ad.Node, X: ad.Node, horizon: int, x_mask=None):
    """Graph for a batch: ``z_hist`` is B x k, ``X`` is B x k x N.

    Returns three B x horizon nodes (mu, sigma, nu).
    """
    B, k, N = X.shape
    if z_hist.shape != (B, k):
        raise DataError(f"z history shape {z_hist.shape} does not match covariates {X.shape}")
    if x_mask is not None:
        X = X * x_mask
    h = None
    for j in range(k):
        h = _cell(P, h, z_hist[:, j], X[:, j, :])
        if not np.all(np.isfinite(h.value)):
            raise NumericError(f"non-finite activation at history step {j}")
    mus, sigmas, nus = [], [], []
    x_last = X[:, k - 1, :]
    for t in range(horizon):
        if t > 0:
            h = _cell(P, h, mus[-1], x_last)
        mu, sigma, nu = _head(P, h)
        mus.append(mu)
        sigmas.append(sigma)
        nus.append(nu)
    return ad.stack(mus, axis=1), ad.stack(sigmas, axis=1), ad.stack(nus, axis=1)


def _param_nodes(params: ModelParams) -> dict[str, ad.Node]:
    return {name: ad.Node(arr) for name, arr in params.arrays().items()}


def _as_batch(z_history, X_window):
    z = np.asarray(z_history, dtype=np.float64)
    X = np.asarray(X_window, dtype=np.float64)
    if z.ndim == 1:
        z, X = z[None, :], X[None, :, :]
    if X.ndim != 3 or X.shape[:2] != z.shape:
        raise DataError(f"window shapes disagree: z {z.shape}, X {X.shape}")
    return z, X


def forward(params: ModelParams, z_history, X_window, horizon: int = 1) -> ForecastDistribution:
    """Forecast for one window (``z_history`` length k, ``X_window`` k x N)."""
    z, X = _as_batch(z_history, X_window)
    if z.shape[0] != 1:
        raise DataError("forward takes a single window; use forward_batch")
    if X.shape[2] != params.n_features:
        raise DataError(f"model expects {params.n_features} features, got {X.shape[2]}")
    mu, sigma, nu = unroll(_param_nodes(params), ad.Node(z), ad.Node(X), horizon)
    return ForecastDistribution(np.stack([mu.value[0], sigma.value[0], nu.value[0]], axis=1))


def forward_batch(params: ModelParams, z_history, X_window, horizon: int = 1) -> np.ndarray:
    """B x horizon x 3 parameter array for stacked windows."""
    z, X = _as_batch(z_history, X_window)
    mu, sigma, nu = unroll(_param_nodes(params), ad.Node(z), ad.Node(X), horizon)
    return np.stack([mu.value, sigma.value, nu.value], axis=2)


def input_gradient(params: ModelParams, z_history, X_window, p: int | str, t: int, horizon: int | None = None) -> np.ndarray:
    """k x N matrix of d theta[p, t] / d X[s, i] through the mean-feedback unroll."""
    p = param_index(p)
    horizon = t + 1 if horizon is None else horizon
    if not 0 <= t < horizon:
        raise ValueError(f"horizon step {t} outside [0, {horizon})")
    z, X = _as_batch(z_history, X_window)
    Xn = ad.Node(X)
    outs = unroll(_param_nodes(params), ad.Node(z), Xn, horizon)
    target = outs[p][0, t]
    g = ad.backward(target, [Xn])[Xn][0]
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite input gradient for parameter {PARAM_NAMES[p]} at step {t}")
    return g


# likelihood ------------------------------------------------------------------


def _check_dist(mu, sigma, nu):
    if not (np.all(np.asarray(sigma) > 0) and np.all(np.asarray(nu) > 0) and np.all(np.isfinite(mu))):
        raise ValueError("student-T parameters need sigma > 0 and nu > 0")


def nll(dist: StudentTParams | ForecastDistribution | Sequence, z) -> float | np.ndarray:
    """Negative log-density (nats) of ``z`` under a location-scale student-T."""
    if isinstance(dist, StudentTParams):
        mu, sigma, nu = dist.mu, dist.sigma, dist.nu
    elif isinstance(dist, ForecastDistribution):
        mu, sigma, nu = dist.mu, dist.sigma, dist.nu
    else:
        mu, sigma, nu = dist
    mu, sigma, nu, z = (np.asarray(v, dtype=np.float64) for v in (mu, sigma, nu, z))
    _check_dist(mu, sigma, nu)
    r = (z - mu) / sigma
    out = (
        gammaln(nu / 2)
        - gammaln((nu + 1) / 2)
        + 0.5 * np.log(nu * np.pi * sigma**2)
        + (nu + 1) / 2 * np.log1p(r * r / nu)
    )
    return float(out) if out.ndim == 0 else out


def nll_node(mu: ad.Node, sigma: ad.Node, nu: ad.Node, z) -> ad.Node:
    r = (ad.as_node(z) - mu) / sigma
    half_nu = nu * 0.5
    return (
        ad.lgamma(half_nu)
        - ad.lgamma(half_nu + 0.5)
        + 0.5 * ad.log(nu * math.pi)
        + ad.log(sigma)
        + (half_nu + 0.5) * ad.log(1.0 + ad.square(r) / nu)
    )


# training --------------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    initial_valid_nll: float = float("nan")
    best_valid_nll: float = float("nan")
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def stack_windows(windows: Sequence[Window]):
    z = np.stack([w.z_history for w in windows])
    X = np.stack([w.x_history for w in windows])
    y = np.stack([w.z_future for w in windows])
    return z, X, y


def mean_nll(params: ModelParams, windows: Sequence[Window]) -> float:
    z, X, y = stack_windows(windows)
    theta = forward_batch(params, z, X, y.shape[1])
    return float(np.mean(nll((theta[..., 0], theta[..., 1], theta[..., 2]), y)))


def _loss_and_grads(params: ModelParams, z, X, y, x_mask=None):
    P = _param_nodes(params)
    mu, sigma, nu = unroll(P, ad.Node(z), ad.Node(X), y.shape[1], x_mask)
    loss = ad.mean(nll_node(mu, sigma, nu, y))
    gm = ad.backward(loss, list(P.values()))
    return float(loss.value), {name: gm[node] for name, node in P.items()}


def train(
    windows: Sequence[Window],
    valid_windows: Sequence[Window],
    cfg: TrainConfig,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Gradient descent on mean horizon NLL with weight decay, covariate dropout and early stopping."""
    if not windows or not valid_windows:
        raise DataError("training and validation window sets must be non-empty")
    z, X, y = stack_windows(windows)
    N = X.shape[2]
    rng = np.random.default_rng(cfg.seed)
    params = init if init is not None else init_params(cfg.seed, cfg.hidden_size, N)
    batch = cfg.batch_size or len(windows)
    log = TrainLog()

    best = params
    best_valid = mean_nll(params, valid_windows)
    log.initial_valid_nll = log.best_valid_nll = best_valid
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(windows))
        losses = []
        for lo in range(0, len(order), batch):
            idx = order[lo : lo + batch]
            mask = None
            if cfg.dropout > 0:
                keep = rng.random(X[idx].shape) >= cfg.dropout
                mask = keep / (1.0 - cfg.dropout)
            try:
                loss, grads = _loss_and_grads(params, z[idx], X[idx], y[idx], mask)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}: loss {loss}")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = min(1.0, cfg.clip_norm / norm) if norm > 0 else 1.0
            updated = {}
            for name, w in params.arrays().items():
                step = grads[name] * scale
                if name.startswith("w_"):
                    step = step + cfg.weight_decay * w
                updated[name] = w - cfg.learning_rate * step
            try:
                params = ModelParams(**updated)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
            losses.append(loss * len(idx))
        train_nll = sum(losses) / len(windows)
        try:
            valid_nll = mean_nll(params, valid_windows)
        except NumericError as exc:
            raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
        if not math.isfinite(valid_nll):
            raise NumericError(f"training diverged at epoch {epoch}: validation NLL {valid_nll}")
        log.epochs.append({"epoch": epoch, "train_nll": train_nll, "valid_nll": valid_nll})
        if valid_nll < best_valid:
            best, best_valid, stale = params, valid_nll, 0
            log.best_epoch, log.best_valid_nll = epoch, valid_nll
        else:
            stale += 1
            if stale >= cfg.patience:
                log.stopped_early = True
                break
    return best, log


# sampling --------------------------------------------------------------------


def sample_paths(params: ModelParams, z_history, X_window, n_samples: int, seed: int, horizon: int = 1) -> np.ndarray:
    """n_samples x horizon trajectories with sampled values fed back as the lagged target."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    z, X = _as_batch(z_history, X_window)
    if z.shape[0] != 1:
        raise DataError("sample_paths takes a single window")
    rng = np.random.default_rng(seed)
    P = _param_nodes(params)
    k = z.shape[1]
    # history is shared by every path
    h = None
    for j in range(k):
        h = _cell(P, h, ad.Node(z[:, j]), ad.Node(X[:, j, :]))
    h = ad.Node(np.repeat(h.value, n_samples, axis=0))
    x_last = ad.Node(np.repeat(X[:, k - 1, :], n_samples, axis=0))
    out = np.empty((n_samples, horizon))
    for t in range(horizon):
        if t > 0:
            h = _cell(P, h, ad.Node(out[:, t - 1]), x_last)
        mu, sigma, nu = _head(P, h)
        out[:, t] = mu.value + sigma.value * rng.standard_t(nu.value)
    return out


def sample_student_t(dist: StudentTParams, n: int, rng: np.random.Generator) -> np.ndarray:
    return dist.mu + dist.sigma * rng.standard_t(dist.nu, size=n)


# model wrapper and checkpoints -----------------------------------------------


@dataclass(frozen=True)
class Forecaster:
    """Trained parameters plus the window geometry and target scaling they were trained with.

    The network sees targets as ``(z - target_loc) / target_scale``; forecasts
    and input gradients are reported in raw log-return units.
    """

    params: ModelParams
    history_len: int
    horizon: int = 1
    seed: int = 0
    target_loc: float = 0.0
    target_scale: float = 1.0

    def _scaled(self, z_history):
        return (np.asarray(z_history, dtype=np.float64) - self.target_loc) / self.target_scale

    def _unscale(self, theta: np.ndarray) -> np.ndarray:
        theta = np.array(theta, copy=True)
        theta[..., 0] = self.target_loc + self.target_scale * theta[..., 0]
        theta[..., 1] = self.target_scale * theta[..., 1]
        return theta

    def forecast(self, z_history, X_window) -> ForecastDistribution:
        dist = forward(self.params, self._scaled(z_history), X_window, self.horizon)
        return ForecastDistribution(self._unscale(dist.theta))

    def input_gradient(self, z_history, X_window, p, t) -> np.ndarray:
        p = param_index(p)
        g = input_gradient(self.params, self._scaled(z_history), X_window, p, t, self.horizon)
        return g * self.target_scale if p < 2 else g

    def forecast_windows(self, windows: Sequence[Window]) -> np.ndarray:
        z, X, _ = stack_windows(windows)
        return self._unscale(forward_batch(self.params, self._scaled(z), X, self.horizon))

    def sample_paths(self, z_history, X_window, n_samples: int, seed: int) -> np.ndarray:
        paths = sample_paths(self.params, self._scaled(z_history), X_window, n_samples, seed, self.horizon)
        return self.target_loc + self.target_scale * paths

    def scale_windows(self, windows: Sequence[Window]) -> list[Window]:
        return [
            Window(w.anchor, self._scaled(w.z_history), w.x_history, self._scaled(w.z_future))
            for w in windows
        ]


def fit_forecaster(
    windows: Sequence[Window],
    valid_windows: Sequence[Window],
    cfg: TrainConfig,
    scale_targets: bool = True,
) -> tuple[Forecaster, TrainLog]:
    """Standardize targets on the training windows, train, and wrap the result."""
    if not windows:
        raise DataError("no training windows")
    k, horizon = len(windows[0].z_history), len(windows[0].z_future)
    loc, scale = 0.0, 1.0
    if scale_targets:
        values = np.concatenate([windows[0].z_history] + [w.z_future for w in windows])
        loc, scale = float(values.mean()), float(values.std())
        if not scale > 0:
            loc, scale = 0.0, 1.0
    shell = Forecaster(init_params(cfg.seed, cfg.hidden_size, windows[0].x_history.shape[1]), k, horizon, cfg.seed, loc, scale)
    params, log = train(shell.scale_windows(windows), shell.scale_windows(valid_windows), cfg)
    return Forecaster(params, k, horizon, cfg.seed, loc, scale), log


def save_checkpoint(model: Forecaster, path: str | Path, extra: dict | None = None) -> None:
    record = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "hidden_size": model.params.hidden_size,
        "n_features": model.params.n_features,
        "history_len": model.history_len,
        "horizon": model.horizon,
        "seed": model.seed,
        "target_loc": float(model.target_loc).hex(),
        "target_scale": float(model.target_scale).hex(),
        "weights": {
            name: {"shape": list(arr.shape), "values": [float(v).hex() for v in arr.ravel()]}
            for name, arr in model.params.arrays().items()
        },
    }
    if extra:
        record["extra"] = extra
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[Forecaster, dict]:
    record = json.loads(Path(path).read_text())
    if record.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {record.get('checkpoint_version')}")
    arrays = {
        name: np.array([float.fromhex(v) for v in w["values"]]).reshape(w["shape"])
        for name, w in record["weights"].items()
    }
    model = Forecaster(
        ModelParams(**arrays),
        record["history_len"],
        record["horizon"],
        record["seed"],
        float.fromhex(record["target_loc"]),
        float.fromhex(record["target_scale"]),
    )
    return model, record.get("extra", {})
