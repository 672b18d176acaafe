"""Dual-process meta-learning over stocks.

An encoder maps a contiguous span of one stock's instances to a latent
vector, a decoder (hypernetwork) maps latents to the weights of a linear
predictor. Training alternates two layers per stock:

* inner layer: latent gradient steps on a span ``t1`` (encoder and decoder
  frozen), folded into the stock latent by interpolation with rate ``beta``;
* outer layer: one SGD step on a stock-specific decoder copy and the encoder
  using a fresh span ``t2``; after all spans the global decoder moves toward
  the stock copy with rate ``gamma``.

The encoder gradient is first order: it flows through the interpolation and
the initial encoding only, the inner latent steps are treated as constants.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diff_core import MlpSpec, NonFiniteError, ParamVector, adam, linear_grad, linear_params, \
    linear_predict, make_rng, mlp_forward, mlp_grad, mlp_hidden, mlp_init, mse_and_grad, opt_step, \
    pack_params, read_container, unpack_params, write_container
from .market_data import InstanceSet, NormStats, StockTask

log = logging.getLogger(__name__)

ABLATIONS = ("no_tasks", "no_encoder", "no_latent", "no_decoder", "no_inner_meta", "shared_decoder")
POOLED_ID = "__all__"
MODEL_FORMAT = "dpml-model"


@dataclass
class RunConfig:
    alpha: float = 1e-4             # inner latent step size
    beta: float = 1e-4              # latent interpolation rate
    gamma: float = 1.0              # global decoder interpolation rate
    lr: float = 1e-5                # encoder / decoder SGD learning rate
    batch_size: int = 32
    inner_steps: int = 5
    spans_per_stock: int = 4
    epochs: int = 10
    latent_dim: int = 16
    hidden: int = 64
    seed: int = 0
    no_tasks: bool = False
    no_encoder: bool = False
    no_latent: bool = False
    no_decoder: bool = False
    no_inner_meta: bool = False
    shared_decoder: bool = False
    extractor: str = "identity"
    extractor_hidden: int = 32
    extractor_epochs: int = 3
    extractor_lr: float = 1e-4
    infer_steps: int = 10
    infer_lr: float = 1e-6
    n_features: int = 160

    def validate(self) -> "RunConfig":
        if not (self.alpha > 0 and self.beta > 0 and self.lr > 0):
            raise ValueError("alpha, beta and lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.inner_steps < 1 or self.spans_per_stock < 1:
            raise ValueError("inner_steps and spans_per_stock must be >= 1")
        if self.batch_size < 1 or self.latent_dim < 1 or self.hidden < 1 or self.epochs < 0:
            raise ValueError("batch_size, latent_dim, hidden must be >= 1 and epochs >= 0")
        if self.extractor not in ("identity", "mlp"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        return self

    @property
    def ablations(self) -> list[str]:
        return [a for a in ABLATIONS if getattr(self, a)]

    @property
    def feature_dim(self) -> int:
        return self.extractor_hidden if self.extractor == "mlp" else self.n_features

    @property
    def uses_latent(self) -> bool:
        """Whether a per-stock latent is adapted and fed to a decoder."""
        return not (self.no_decoder or self.no_latent)

    @property
    def uses_encoder(self) -> bool:
        return self.uses_latent and not self.no_encoder

    def encoder_spec(self) -> MlpSpec:
        return MlpSpec((self.feature_dim, self.hidden, self.hidden, self.latent_dim))

    def decoder_spec(self) -> MlpSpec:
        d_in = self.feature_dim if self.no_latent else self.latent_dim
        return MlpSpec((d_in, self.hidden, self.hidden, self.feature_dim + 1))

    def extractor_spec(self) -> MlpSpec:
        return MlpSpec((self.n_features, self.extractor_hidden, self.extractor_hidden, 1))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class MetaModel:
    config: RunConfig
    phi_e: ParamVector | None
    phi_d: ParamVector
    latents: dict[str, np.ndarray] = field(default_factory=dict)
    extractor: ParamVector | None = None
    norm: NormStats | None = None
    meta: dict = field(default_factory=dict)

    def copy(self) -> "MetaModel":
        return MetaModel(self.config, None if self.phi_e is None else self.phi_e.copy(), self.phi_d.copy(),
                         {k: v.copy() for k, v in self.latents.items()},
                         None if self.extractor is None else self.extractor.copy(), self.norm,
                         copy.deepcopy(self.meta))

    def latent(self, stock_id: str) -> np.ndarray:
        if stock_id in self.latents:
            return self.latents[stock_id]
        if POOLED_ID in self.latents:
            return self.latents[POOLED_ID]
        raise KeyError(f"no latent for stock {stock_id!r}")


@dataclass
class SpanBatch:
    stock_id: str
    instances: InstanceSet
    start: int


# ---------------------------------------------------------------- building blocks

def init_model(cfg: RunConfig, rng: np.random.Generator, norm: NormStats | None = None) -> MetaModel:
    """Fresh model: encoder then decoder drawn from ``rng``; latents start at zero."""
    cfg.validate()
    phi_e = mlp_init(cfg.encoder_spec(), rng) if cfg.uses_encoder else None
    if cfg.no_decoder:
        phi_d = linear_params(cfg.feature_dim)
    else:
        phi_d = mlp_init(cfg.decoder_spec(), rng)
    return MetaModel(cfg, phi_e, phi_d, {}, None, norm)


def _set_intercept(model: MetaModel, value: float) -> None:
    """Start the generated intercept at ``value`` (targets are raw log volumes)."""
    if model.config.no_decoder:
        model.phi_d["b"][0] = value
    else:
        model.phi_d["b3"][-1] = value


def extract_features(model_or_params, x) -> np.ndarray:
    """Identity, or the second hidden layer of the pre-trained extractor MLP."""
    params = model_or_params.extractor if isinstance(model_or_params, MetaModel) else model_or_params
    x = np.asarray(x, dtype=np.float64)
    if params is None:
        return x
    spec = MlpSpec((params["W1"].shape[1], params["W1"].shape[0], params["W2"].shape[0], 1))
    return mlp_hidden(params, spec, x)


def _extractor_backward(params: ParamVector, x: np.ndarray, d_feat: np.ndarray) -> ParamVector:
    spec = MlpSpec((params["W1"].shape[1], params["W1"].shape[0], params["W2"].shape[0], 1))
    grads, _ = mlp_grad(params, spec, x, np.zeros((x.shape[0], 1)), upstream_hidden=d_feat)
    return grads


def pretrain_extractor(train_x: np.ndarray, train_y: np.ndarray, cfg: RunConfig,
                       rng: np.random.Generator) -> ParamVector:
    """Fit the extractor MLP as a plain regressor with mini-batch Adam."""
    spec = cfg.extractor_spec()
    params = mlp_init(spec, rng)
    params["b3"][0] = float(np.mean(train_y))
    state = adam(cfg.extractor_lr)
    for _ in range(cfg.extractor_epochs):
        order = rng.permutation(train_x.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out = mlp_forward(params, spec, train_x[idx])[:, 0]
            loss, g = mse_and_grad(out, train_y[idx])
            if not np.isfinite(loss):
                raise NonFiniteError("extractor pre-training diverged")
            grads, _ = mlp_grad(params, spec, train_x[idx], g[:, None])
            params = opt_step(state, params, grads)
    return params


def _project(v: np.ndarray, dim: int) -> np.ndarray:
    """Truncate or zero-pad a vector to ``dim`` entries."""
    out = np.zeros(dim)
    k = min(dim, v.size)
    out[:k] = v[:k]
    return out


def _encode_features(model: MetaModel, feats: np.ndarray) -> np.ndarray:
    cfg = model.config
    if feats.shape[0] == 0:
        raise ValueError("cannot encode an empty batch")
    if model.phi_e is None:
        return _project(feats.mean(axis=0), cfg.latent_dim)
    return mlp_forward(model.phi_e, cfg.encoder_spec(), feats).mean(axis=0)


def encode(model: MetaModel, batch) -> np.ndarray:
    """Latent of a batch: mean over instances of the per-instance encoding."""
    x = batch.instances.x if isinstance(batch, SpanBatch) else getattr(batch, "x", batch)
    return _encode_features(model, extract_features(model, np.atleast_2d(x)))


def decode(model: MetaModel, phi: ParamVector, z) -> ParamVector:
    """Predictor parameters (w, b) generated from ``z``; with no_decoder the
    parameters are ``phi`` itself."""
    cfg = model.config
    if cfg.no_decoder:
        return phi
    out = mlp_forward(phi, cfg.decoder_spec(), np.asarray(z, dtype=np.float64))
    return linear_params(cfg.feature_dim, out)


def decode_vjp(model: MetaModel, phi: ParamVector, z, g_theta: ParamVector):
    cfg = model.config
    if cfg.no_decoder:
        return g_theta, np.zeros_like(np.asarray(z, dtype=np.float64))
    return mlp_grad(phi, cfg.decoder_spec(), np.asarray(z, dtype=np.float64), g_theta.values)


def predictor_loss(theta: ParamVector, feats: np.ndarray, y: np.ndarray):
    """MSE of the linear predictor with gradients w.r.t. theta and features."""
    loss, g = mse_and_grad(linear_predict(theta, feats), y)
    g_theta, g_feats = linear_grad(theta, feats, g)
    return loss, g_theta, g_feats


def sample_span(task: StockTask, split: str, batch_size: int, rng: np.random.Generator) -> SpanBatch:
    """Contiguous window of ``batch_size`` instances at a uniform random offset."""
    data = task.split(split)
    n = len(data)
    if n == 0:
        raise ValueError(f"stock {task.stock_id}: empty {split} split")
    if n <= batch_size:
        return SpanBatch(task.stock_id, data, 0)
    start = int(rng.integers(0, n - batch_size + 1))
    return SpanBatch(task.stock_id, data.take(slice(start, start + batch_size)), start)


def latent_loss(model: MetaModel, phi_d: ParamVector, z, feats: np.ndarray, y: np.ndarray):
    """Loss of the generated predictor and its gradient w.r.t. the latent."""
    theta = decode(model, phi_d, z)
    loss, g_theta, _ = predictor_loss(theta, feats, y)
    _, g_z = decode_vjp(model, phi_d, z, g_theta)
    return loss, g_z


def inner_adapt(model: MetaModel, phi_di: ParamVector, feats: np.ndarray, y: np.ndarray,
                cfg: RunConfig | None = None, z0=None):
    """K latent gradient steps on one span, everything else frozen.

    Returns ``(z_adapted, z0, first_loss)``.
    """
    cfg = cfg or model.config
    if z0 is None:
        z0 = _encode_features(model, feats)
    z = np.array(z0, dtype=np.float64)
    first = None
    for _ in range(cfg.inner_steps):
        loss, g_z = latent_loss(model, phi_di, z, feats, y)
        if not (np.isfinite(loss) and np.all(np.isfinite(g_z))):
            raise NonFiniteError(f"inner loss not finite (L1={loss})")
        if first is None:
            first = loss
        z = z - cfg.alpha * g_z
    return z, np.asarray(z0), first


def update_latent(z_i, z_adapted, beta: float) -> np.ndarray:
    z_i = np.asarray(z_i, dtype=np.float64)
    return z_i + beta * (np.asarray(z_adapted, dtype=np.float64) - z_i)


def sync_global(phi_d: ParamVector, phi_di: ParamVector, gamma: float) -> ParamVector:
    if gamma == 1.0:
        return phi_di.copy()
    return phi_d.like(phi_d.values + gamma * (phi_di.values - phi_d.values))


@dataclass
class OuterGrads:
    loss: float
    phi_di: ParamVector
    z_i: np.ndarray
    phi_e: ParamVector | None
    extractor: ParamVector | None


def outer_grads(model: MetaModel, phi_di: ParamVector, z_i, x_t2: np.ndarray, y_t2: np.ndarray,
                x_t1: np.ndarray | None = None, cfg: RunConfig | None = None) -> OuterGrads:
    """Gradients of the outer loss on span ``t2``.

    ``x_t1`` holds the raw rows whose encoding initialised the adapted latent;
    the encoder gradient is ``beta * dL2/dz_i`` pushed back through that
    encoding.
    """
    cfg = cfg or model.config
    f2 = extract_features(model, x_t2)
    theta = decode(model, phi_di, z_i)
    loss, g_theta, g_f2 = predictor_loss(theta, f2, y_t2)
    g_phi, g_z = decode_vjp(model, phi_di, z_i, g_theta)

    g_e = None
    g_f1 = None
    if x_t1 is not None and cfg.uses_latent:
        f1 = extract_features(model, x_t1)
        n1 = f1.shape[0]
        up = cfg.beta * g_z
        if model.phi_e is not None:
            g_e, g_f1 = mlp_grad(model.phi_e, cfg.encoder_spec(), f1, np.tile(up / n1, (n1, 1)))
        else:
            g_f1 = np.tile(_project(up, f1.shape[1]) / n1, (n1, 1))

    g_x = None
    if model.extractor is not None:
        g_x = _extractor_backward(model.extractor, np.asarray(x_t2, dtype=np.float64), g_f2)
        if g_f1 is not None:
            g_x = g_x.like(g_x.values + _extractor_backward(model.extractor, x_t1, g_f1).values)
    return OuterGrads(loss, g_phi, g_z, g_e, g_x)


def outer_step(model: MetaModel, phi_di: ParamVector, z_i, x_t2, y_t2, x_t1=None,
               cfg: RunConfig | None = None):
    """One SGD step on the stock decoder, the encoder and the extractor.

    Updates ``model.phi_e`` / ``model.extractor`` in place (new containers) and
    returns ``(phi_di_new, loss)``; ``z_i`` is not touched.
    """
    cfg = cfg or model.config
    g = outer_grads(model, phi_di, z_i, x_t2, y_t2, x_t1, cfg)
    if not np.isfinite(g.loss):
        raise NonFiniteError(f"outer loss not finite (L2={g.loss})")
    new_phi = phi_di.like(phi_di.values - cfg.lr * _finite(g.phi_di, "decoder gradient").values)
    if g.phi_e is not None:
        model.phi_e = model.phi_e.like(model.phi_e.values - cfg.lr * _finite(g.phi_e, "encoder gradient").values)
    if g.extractor is not None:
        model.extractor = model.extractor.like(
            model.extractor.values - cfg.lr * _finite(g.extractor, "extractor gradient").values)
    return new_phi, g.loss


def _finite(p: ParamVector, what: str) -> ParamVector:
    p.check_finite(what)
    return p


# ---------------------------------------------------------------- training

def pooled_task(tasks: Sequence[StockTask]) -> StockTask:
    """All stocks merged into one chronologically ordered task."""
    def merge(split):
        s = InstanceSet.concat([t.split(split) for t in tasks])
        if not len(s):
            return s
        order = np.lexsort((s.stock_id.astype(str), s.slot, s.day))
        return s.take(order)
    return StockTask(POOLED_ID, merge("train"), merge("dev"), merge("test"))


EpochCallback = Callable[["MetaTrainer", dict], None]


class MetaTrainer:
    """Stateful driver of the nested schedule; one ``run_epoch`` per epoch.

    ``tasks`` must already be normalized. Per-epoch dev evaluation uses its
    own random stream so it never perturbs the training stream.
    """

    def __init__(self, tasks: Sequence[StockTask], cfg: RunConfig, norm: NormStats | None = None,
                 evaluate_dev: bool = True):
        cfg.validate()
        if not tasks or not any(len(t.train) for t in tasks):
            raise ValueError("meta-training needs at least one task with training data")
        n_feat = tasks[0].train.x.shape[1]
        if n_feat != cfg.n_features:
            cfg = dataclasses.replace(cfg, n_features=n_feat)
        self.cfg = cfg
        self.tasks = [t for t in tasks if len(t.train)]
        self.train_tasks = [pooled_task(self.tasks)] if cfg.no_tasks else self.tasks
        self.evaluate_dev = evaluate_dev
        self.rng = make_rng(cfg.seed)
        self.model = init_model(cfg, self.rng, norm)
        pool_y = np.concatenate([t.train.y for t in self.tasks])
        _set_intercept(self.model, float(pool_y.mean()))
        # the pooled task is visited once per epoch; keep the per-epoch update count
        self.spans = cfg.spans_per_stock * (len(self.tasks) if cfg.no_tasks else 1)
        if cfg.extractor == "mlp":
            pool = pooled_task(self.tasks).train
            self.model.extractor = pretrain_extractor(pool.x, pool.y, cfg, self.rng)
        dim = cfg.feature_dim if cfg.no_latent else cfg.latent_dim
        for t in self.train_tasks:
            self.model.latents[t.stock_id] = np.zeros(dim)
        self.epoch = 0
        self.history: list[dict] = []
        self.best_model: MetaModel | None = None
        self.best_dev = np.inf

    # -- one stock -------------------------------------------------------

    def _visit(self, task: StockTask, stats: dict) -> None:
        cfg, model = self.cfg, self.model
        sid = task.stock_id
        phi_di = model.phi_d if cfg.shared_decoder else model.phi_d.copy()
        for _ in range(self.spans):
            x_t1 = None
            if cfg.no_latent:
                model.latents[sid] = extract_features(model, task.train.x).mean(axis=0)
            elif cfg.uses_latent:
                if cfg.no_inner_meta:
                    x_t1 = task.train.x
                    z_new = _encode_features(model, extract_features(model, x_t1))
                else:
                    span1 = sample_span(task, "train", cfg.batch_size, self.rng)
                    x_t1 = span1.instances.x
                    z_new, _, l1 = inner_adapt(model, phi_di, extract_features(model, x_t1),
                                               span1.instances.y, cfg)
                    stats["l1"].append(l1)
                model.latents[sid] = update_latent(model.latents[sid], z_new, cfg.beta)
            span2 = sample_span(task, "train", cfg.batch_size, self.rng)
            phi_di, l2 = outer_step(model, phi_di, model.latents[sid], span2.instances.x,
                                    span2.instances.y, x_t1, cfg)
            stats["l2"].append(l2)
            if cfg.shared_decoder:
                model.phi_d = phi_di
        if not cfg.shared_decoder:
            model.phi_d = sync_global(model.phi_d, phi_di, cfg.gamma)

    def finalized(self) -> MetaModel:
        """Copy of the current model with latents keyed by real stock ids."""
        m = self.model.copy()
        if self.cfg.no_tasks:
            shared = m.latents.pop(POOLED_ID)
            m.latents = {t.stock_id: shared.copy() for t in self.tasks}
        m.config = self.cfg
        return m

    def run_epoch(self) -> dict:
        stats = {"l1": [], "l2": []}
        order = self.rng.permutation(len(self.train_tasks))
        for i in order:
            self._visit(self.train_tasks[int(i)], stats)
        self.epoch += 1
        row = {"epoch": self.epoch, "stocks": len(self.train_tasks),
               "mean_l1": float(np.mean(stats["l1"])) if stats["l1"] else None,
               "mean_l2": float(np.mean(stats["l2"]))}
        if self.evaluate_dev:
            from .inference_eval import evaluate_model
            current = self.finalized()
            rep = evaluate_model(current, self.tasks, "dev", seed=[self.cfg.seed, 1, self.epoch])
            row["dev"] = rep["aggregate"]
            dev_mse = rep["aggregate"]["mse"]
            if dev_mse < self.best_dev or self.best_model is None:
                self.best_dev = dev_mse
                current.meta.update(epoch=self.epoch, dev_mse=dev_mse)
                self.best_model = current
        self.history.append(row)
        log.info("epoch %d: L2=%.5f%s", self.epoch, row["mean_l2"],
                 f" dev_mse={row['dev']['mse']:.5f}" if "dev" in row else "")
        return row

    def fit(self, epochs: int | None = None, callback: EpochCallback | None = None) -> MetaModel:
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            row = self.run_epoch()
            if callback is not None:
                callback(self, row)
        return self.result()

    def result(self) -> MetaModel:
        if self.best_model is not None:
            return self.best_model
        m = self.finalized()
        m.meta.update(epoch=self.epoch)
        return m

    # -- resume support --------------------------------------------------

    def save_state(self, path, extra: dict | None = None) -> None:
        """Write a resumable checkpoint of the in-progress model."""
        meta = {"trainer_epoch": self.epoch, "rng_state": self.rng.bit_generator.state,
                "best_dev": None if not np.isfinite(self.best_dev) else self.best_dev,
                "history": self.history}
        meta.update(extra or {})
        save_model(self.model, path, extra_meta=meta)

    def load_state(self, path, best_path=None) -> None:
        m = load_model(path)
        self.model.phi_e, self.model.phi_d = m.phi_e, m.phi_d
        self.model.extractor = m.extractor
        self.model.latents = m.latents
        self.epoch = int(m.meta["trainer_epoch"])
        self.rng.bit_generator.state = m.meta["rng_state"]
        self.history = m.meta["history"]
        self.best_dev = np.inf if m.meta["best_dev"] is None else float(m.meta["best_dev"])
        if best_path is not None:
            self.best_model = load_model(best_path)


def meta_train(tasks: Sequence[StockTask], cfg: RunConfig, norm: NormStats | None = None,
               callback: EpochCallback | None = None, evaluate_dev: bool = True) -> MetaModel:
    """Run the full schedule; returns the checkpoint with the lowest dev MSE."""
    return MetaTrainer(tasks, cfg, norm, evaluate_dev).fit(callback=callback)


# ---------------------------------------------------------------- checkpoints

def save_model(model: MetaModel, path, extra_meta: dict | None = None) -> None:
    segments = {}
    if model.phi_e is not None:
        segments.update(pack_params("encoder", model.phi_e))
    segments.update(pack_params("decoder", model.phi_d))
    if model.extractor is not None:
        segments.update(pack_params("extractor", model.extractor))
    for sid in sorted(model.latents):
        segments[f"latent/{sid}"] = model.latents[sid]
    if model.norm is not None:
        segments["norm/mean"] = model.norm.mean
        segments["norm/std"] = model.norm.std
    meta = {"format": MODEL_FORMAT, "config": model.config.to_dict(), "config_hash": model.config.hash(),
            "decoder_segments": model.phi_d.names(), "info": model.meta}
    if model.norm is not None:
        meta["norm_eps"] = model.norm.eps_std
    meta.update(extra_meta or {})
    write_container(path, segments, meta)


def load_model(path) -> MetaModel:
    segments, meta = read_container(path)
    if meta.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    dec = unpack_params("decoder", segments)
    order = meta["decoder_segments"]
    dec = ParamVector.from_arrays({k: dec[k] for k in order})
    norm = None
    if "norm/mean" in segments:
        norm = NormStats(segments["norm/mean"], segments["norm/std"], meta.get("norm_eps", 1e-8))
    latents = {k[len("latent/"):]: v for k, v in segments.items() if k.startswith("latent/")}
    extra = {k: v for k, v in meta.items() if k not in ("format", "config", "decoder_segments", "info")}
    info = dict(meta.get("info", {}))
    info.update(extra)
    return MetaModel(cfg, unpack_params("encoder", segments), dec, latents,
                     unpack_params("extractor", segments), norm, info)
