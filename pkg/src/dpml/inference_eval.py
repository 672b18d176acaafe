"""Test-time decoder tuning, the MSE/MAE/ACC metrics and report assembly."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .baselines import DISPLAY_NAMES, TRADITIONAL, BaselineKind, predict_traditional
from .diff_core import ParamVector, linear_predict, make_rng
from .market_data import InstanceSet, StockTask, apply_norm
from .meta_engine import MetaModel, decode, extract_features, predictor_loss, sample_span, decode_vjp

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


class ReportValidationError(ValueError):
    pass


def compute_metrics(y_hat, y, v_last) -> dict:
    """MSE, MAE and direction accuracy against the last slot; ties score 0.5."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    v_last = np.asarray(v_last, dtype=np.float64)
    if y.size == 0:
        raise ValueError("no predictions to score")
    err = y_hat - y
    prod = (y_hat - v_last) * (y - v_last)
    score = np.where(prod > 0, 1.0, np.where(prod < 0, 0.0, 0.5))
    return {"mse": float(np.mean(err * err)), "mae": float(np.mean(np.abs(err))),
            "acc": float(np.mean(score)), "n": int(y.size)}


def aggregate(per_stock: dict[str, dict]) -> dict:
    """Instance-weighted mean of per-stock metrics."""
    rows = [m for m in per_stock.values() if m["n"] > 0]
    n = sum(m["n"] for m in rows)
    if n == 0:
        return {"mse": float("nan"), "mae": float("nan"), "acc": float("nan"), "n": 0}
    return {k: float(sum(m[k] * m["n"] for m in rows) / n) for k in ("mse", "mae", "acc")} | {"n": n}


def adapt_for_stock(model: MetaModel, task: StockTask, steps: int | None = None, lr: float | None = None,
                    rng: np.random.Generator | None = None, normalized: bool = True) -> ParamVector:
    """Tune a copy of the global decoder on the stock's train split; the
    latent is left untouched. A model trained with one universal decoder
    keeps it as is."""
    cfg = model.config
    steps = cfg.infer_steps if steps is None else steps
    lr = cfg.infer_lr if lr is None else lr
    phi = model.phi_d.copy()
    if cfg.shared_decoder:
        return phi
    if len(task.train) == 0:
        log.warning("stock %s: empty train split, using the global decoder", task.stock_id)
        return phi
    if not normalized and model.norm is not None:
        task = StockTask(task.stock_id, apply_norm(task.train, model.norm), task.dev, task.test)
    rng = rng if rng is not None else make_rng(cfg.seed)
    z = model.latent(task.stock_id)
    for _ in range(steps):
        span = sample_span(task, "train", cfg.batch_size, rng)
        feats = extract_features(model, span.instances.x)
        theta = decode(model, phi, z)
        _, g_theta, _ = predictor_loss(theta, feats, span.instances.y)
        g_phi, _ = decode_vjp(model, phi, z, g_theta)
        g_phi.check_finite("inference gradient")
        phi = phi.like(phi.values - lr * g_phi.values)
    return phi


def predict_stock(model: MetaModel, phi_di: ParamVector, task_or_set, split: str | None = None,
                  normalized: bool = True) -> np.ndarray:
    data = task_or_set.split(split) if isinstance(task_or_set, StockTask) else task_or_set
    sid = task_or_set.stock_id if isinstance(task_or_set, StockTask) else str(data.stock_id[0])
    x = data.x
    if not normalized and model.norm is not None:
        x = apply_norm(x, model.norm)
    theta = decode(model, phi_di, model.latent(sid))
    return linear_predict(theta, extract_features(model, x))


def support_loss(model: MetaModel, phi: ParamVector, task: StockTask) -> float:
    theta = decode(model, phi, model.latent(task.stock_id))
    loss, _, _ = predictor_loss(theta, extract_features(model, task.train.x), task.train.y)
    return loss


def evaluate_model(model: MetaModel, tasks: Sequence[StockTask], split: str, seed=None,
                   normalized: bool = True, steps: int | None = None, lr: float | None = None,
                   keep_predictions: bool = False) -> dict:
    """Adapt per stock then score ``split``. Returns ``{"aggregate", "per_stock"}``."""
    if normalized is False and model.norm is not None:
        tasks = [StockTask(t.stock_id, apply_norm(t.train, model.norm), apply_norm(t.dev, model.norm),
                           apply_norm(t.test, model.norm)) for t in tasks]
    rng = make_rng(model.config.seed if seed is None else seed)
    per_stock, preds = {}, {}
    for task in tasks:
        data = task.split(split)
        if len(data) == 0:
            continue
        phi = adapt_for_stock(model, task, steps, lr, rng)
        y_hat = predict_stock(model, phi, task, split)
        per_stock[task.stock_id] = compute_metrics(y_hat, data.y, data.v_last)
        if keep_predictions:
            preds[task.stock_id] = y_hat
    out = {"aggregate": aggregate(per_stock), "per_stock": per_stock}
    if keep_predictions:
        out["predictions"] = preds
    return out


def evaluate_baseline(kind, tasks: Sequence[StockTask], split: str, theta: ParamVector | None = None,
                      norm=None, keep_predictions: bool = False) -> dict:
    """Score a baseline on raw (un-normalized) tasks; the trained linear
    model applies ``norm`` to its inputs."""
    kind = BaselineKind(kind)
    per_stock, preds = {}, {}
    for task in tasks:
        data = task.split(split)
        if len(data) == 0:
            continue
        if kind is BaselineKind.linear_trained:
            if theta is None:
                raise ValueError("linear baseline needs fitted parameters")
            x = data.x if norm is None else apply_norm(data.x, norm)
            y_hat = linear_predict(theta, x)
        else:
            y_hat = predict_traditional(kind, data)
        per_stock[task.stock_id] = compute_metrics(y_hat, data.y, data.v_last)
        if keep_predictions:
            preds[task.stock_id] = y_hat
    out = {"aggregate": aggregate(per_stock), "per_stock": per_stock}
    if keep_predictions:
        out["predictions"] = preds
    return out


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    split: str
    rows: dict[str, dict] = field(default_factory=dict)     # name -> {"aggregate", "per_stock"}
    counts: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    seed: int | None = None
    manifest_hash: str = ""

    def add(self, name: str, result: dict) -> None:
        self.rows[name] = {"aggregate": result["aggregate"], "per_stock": result["per_stock"]}

    def validate(self) -> "EvalReport":
        for name, row in self.rows.items():
            for scope, m in [("aggregate", row["aggregate"])] + list(row["per_stock"].items()):
                if m["n"] == 0:
                    continue
                if not (m["mse"] >= 0 and m["mae"] >= 0 and 0.0 <= m["acc"] <= 1.0):
                    raise ReportValidationError(f"{name}/{scope}: metric out of range {m}")
                if m["mae"] ** 2 > m["mse"] * (1 + 1e-12) + 1e-300:
                    raise ReportValidationError(f"{name}/{scope}: mae^2 > mse ({m})")
            n_expect = sum(self.counts.values())
            if self.counts and row["aggregate"]["n"] != n_expect:
                raise ReportValidationError(
                    f"{name}: {row['aggregate']['n']} scored instances, split has {n_expect}")
        return self

    def to_dict(self) -> dict:
        return {"split": self.split, "config_hash": self.config_hash, "seed": self.seed,
                "manifest_hash": self.manifest_hash, "counts": self.counts, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["split"], d["rows"], d["counts"], d["config_hash"], d["seed"], d.get("manifest_hash", ""))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def table(self, order: Sequence[str] | None = None) -> str:
        names = list(order) if order else list(self.rows)
        width = max([len("Model")] + [len(n) for n in names])
        lines = [f"split: {self.split}", f"{'Model':<{width}}  {'MSE':>7}  {'MAE':>7}  {'ACC':>7}",
                 "-" * (width + 27)]
        for name in names:
            a = self.rows[name]["aggregate"]
            lines.append(f"{name:<{width}}  {a['mse']:7.3f}  {a['mae']:7.3f}  {a['acc']:7.3f}")
        if self.manifest_hash:
            lines.append(f"manifest: {self.manifest_hash}")
        return "\n".join(lines) + "\n"


def evaluate_all(model: MetaModel | None, tasks: Sequence[StockTask], split: str,
                 linear_theta: ParamVector | None = None, linear_norm=None, model_name: str = "Linear+ours",
                 seed=None) -> EvalReport:
    """All traditional baselines, the optional trained linear model and the
    optional meta-learned model on raw ``tasks``."""
    report = EvalReport(split, counts={t.stock_id: len(t.split(split)) for t in tasks if len(t.split(split))})
    for kind in TRADITIONAL:
        report.add(DISPLAY_NAMES[kind], evaluate_baseline(kind, tasks, split))
    if linear_theta is not None:
        report.add(DISPLAY_NAMES[BaselineKind.linear_trained],
                   evaluate_baseline(BaselineKind.linear_trained, tasks, split, linear_theta, linear_norm))
    if model is not None:
        report.add(model_name, evaluate_model(model, tasks, split, seed=seed, normalized=False))
        report.config_hash = model.config.hash()
        report.seed = model.config.seed
    return report.validate()


def dump_predictions(path, model: MetaModel, tasks: Sequence[StockTask], split: str, seed=None) -> None:
    """CSV ``stock_id,day,slot,y,y_hat,v_last`` for the meta-learned model on raw tasks."""
    res = evaluate_model(model, tasks, split, seed=seed, normalized=False, keep_predictions=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stock_id", "day", "slot", "y", "y_hat", "v_last"])
        for task in tasks:
            data: InstanceSet = task.split(split)
            if task.stock_id not in res["predictions"]:
                continue
            for i, yh in enumerate(res["predictions"][task.stock_id]):
                w.writerow([task.stock_id, int(data.day[i]), int(data.slot[i]), repr(float(data.y[i])),
                            repr(float(yh)), repr(float(data.v_last[i]))])
