"""Traditional volume forecasters and the trained global linear model.

All rule-based predictors read only the log-volume entries of the raw
(un-normalized) feature vector, so they work on single vectors or batches.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .diff_core import NonFiniteError, adam, linear_grad, linear_params, linear_predict, make_rng, \
    mse_and_grad, opt_step
from .market_data import DAY_VOLUME_COLS, SLOT_VOLUME_COLS, VOLUME_COLS, InstanceSet

log = logging.getLogger(__name__)


class BaselineKind(str, enum.Enum):
    yesterday = "yesterday"
    last_slot = "last_slot"
    sma_20day = "sma_20day"
    sma_12slot = "sma_12slot"
    sma_combined = "sma_combined"
    ema_20day = "ema_20day"
    ema_12slot = "ema_12slot"
    linear_trained = "linear_trained"


TRADITIONAL = (BaselineKind.yesterday, BaselineKind.sma_20day, BaselineKind.ema_20day,
               BaselineKind.last_slot, BaselineKind.sma_12slot, BaselineKind.ema_12slot,
               BaselineKind.sma_combined)

DISPLAY_NAMES = {
    BaselineKind.yesterday: "Yesterday",
    BaselineKind.sma_20day: "20-day Average",
    BaselineKind.ema_20day: "20-day EMA",
    BaselineKind.last_slot: "Last Time Slot",
    BaselineKind.sma_12slot: "12-slot Average",
    BaselineKind.ema_12slot: "12-slot EMA",
    BaselineKind.sma_combined: "20-day and 12-slot Average",
    BaselineKind.linear_trained: "Linear",
}


def _x(instance_or_x) -> np.ndarray:
    if isinstance(instance_or_x, InstanceSet):
        return instance_or_x.x
    x = getattr(instance_or_x, "x", instance_or_x)
    return np.asarray(x, dtype=np.float64)


def predict_naive(kind, instance) -> np.ndarray:
    kind = BaselineKind(kind)
    x = _x(instance)
    if kind is BaselineKind.yesterday:
        return x[..., DAY_VOLUME_COLS[-1]]
    if kind is BaselineKind.last_slot:
        return x[..., SLOT_VOLUME_COLS[-1]]
    raise ValueError(f"{kind.value} is not a naive forecaster")


def predict_sma(kind, instance) -> np.ndarray:
    kind = BaselineKind(kind)
    x = _x(instance)
    cols = {BaselineKind.sma_12slot: SLOT_VOLUME_COLS, BaselineKind.sma_20day: DAY_VOLUME_COLS,
            BaselineKind.sma_combined: VOLUME_COLS}.get(kind)
    if cols is None:
        raise ValueError(f"{kind.value} is not an SMA forecaster")
    return x[..., cols].mean(axis=-1)


def ema(series) -> np.ndarray:
    """Final value of y_n = (2 x_n + (n-1) y_{n-1}) / (n+1), y_1 = x_1, over the last axis."""
    s = np.asarray(series, dtype=np.float64)
    y = s[..., 0]
    for n in range(2, s.shape[-1] + 1):
        y = (2.0 * s[..., n - 1] + (n - 1) * y) / (n + 1)
    return y


def predict_ema(kind, instance) -> np.ndarray:
    kind = BaselineKind(kind)
    x = _x(instance)
    cols = {BaselineKind.ema_12slot: SLOT_VOLUME_COLS, BaselineKind.ema_20day: DAY_VOLUME_COLS}.get(kind)
    if cols is None:
        raise ValueError(f"{kind.value} is not an EMA forecaster")
    return ema(x[..., cols])


def predict_traditional(kind, instance) -> np.ndarray:
    kind = BaselineKind(kind)
    if kind in (BaselineKind.yesterday, BaselineKind.last_slot):
        return predict_naive(kind, instance)
    if kind.value.startswith("sma"):
        return predict_sma(kind, instance)
    if kind.value.startswith("ema"):
        return predict_ema(kind, instance)
    raise ValueError(f"{kind.value} needs a trained parameter vector")


@dataclass
class LinearFitConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0


def fit_linear_baseline(train: InstanceSet, cfg: LinearFitConfig | None = None,
                        dev: InstanceSet | None = None):
    """One global (w, b) fit with mini-batch Adam on MSE.

    With a dev set the epoch with the lowest dev MSE is kept, otherwise the
    last epoch. Returns ``(theta, history)``.
    """
    cfg = cfg or LinearFitConfig()
    if len(train) == 0:
        raise ValueError("linear baseline needs a non-empty train set")
    x, y = train.x, train.y
    rng = make_rng(cfg.seed)
    theta = linear_params(x.shape[1])
    theta["b"][...] = y.mean()   # targets sit far from zero; start at their mean
    state = adam(cfg.lr)
    best, best_dev, history = theta.copy(), np.inf, []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = mse_and_grad(linear_predict(theta, x[idx]), y[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"linear baseline diverged at epoch {epoch}")
            grads, _ = linear_grad(theta, x[idx], g)
            theta = opt_step(state, theta, grads)
        train_mse = float(np.mean((linear_predict(theta, x) - y) ** 2))
        row = {"epoch": epoch, "train_mse": train_mse}
        if dev is not None and len(dev):
            dev_mse = float(np.mean((linear_predict(theta, dev.x) - dev.y) ** 2))
            row["dev_mse"] = dev_mse
            if dev_mse < best_dev:
                best, best_dev = theta.copy(), dev_mse
        history.append(row)
    if dev is None or not len(dev):
        best = theta
    return best, history


def least_squares_linear(x, y):
    """Closed-form minimum-norm least squares (w, b) as a parameter vector."""
    x = np.asarray(x, dtype=np.float64)
    a = np.hstack([x, np.ones((x.shape[0], 1))])
    sol, *_ = np.linalg.lstsq(a, y, rcond=None)
    return linear_params(x.shape[1], sol)
