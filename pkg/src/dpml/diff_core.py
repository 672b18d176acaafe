"""Small differentiable kernel: flat parameter containers, a 3-layer tanh MLP
and a linear predictor with hand-written backprop, SGD/Adam, a finite
difference checker and the text checkpoint container.

Everything is float64. Inputs may be a single vector ``(d,)`` or a batch
``(n, d)``; parameter gradients of a batch are summed over rows.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_MAGIC = "DPML-CHECKPOINT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A loss or gradient contains NaN/inf."""


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator. The bit stream is stable across platforms for a seed."""
    return np.random.Generator(np.random.PCG64(seed))


class ParamVector:
    """Flat float64 array plus a table of named segments ``name -> (offset, dims)``."""

    __slots__ = ("values", "segments", "_slices")

    def __init__(self, values, segments: dict[str, tuple[int, tuple[int, ...]]]):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        offset = 0
        slices = {}
        for name, (off, dims) in segments.items():
            if off != offset:
                raise ValueError(f"segment {name!r} at offset {off}, expected {offset}")
            n = math.prod(dims)
            slices[name] = (off, off + n, tuple(dims))
            offset += n
        if offset != values.size:
            raise ValueError(f"segments cover {offset} values, array has {values.size}")
        self.values = values
        self.segments = segments
        self._slices = slices

    @classmethod
    def from_shapes(cls, shapes: Iterable[tuple[str, tuple[int, ...]]], values=None):
        segments = {}
        offset = 0
        for name, dims in shapes:
            dims = tuple(int(d) for d in dims)
            segments[name] = (offset, dims)
            offset += math.prod(dims)
        if values is None:
            values = np.zeros(offset)
        return cls(values, segments)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]):
        shapes = [(k, np.shape(v)) for k, v in arrays.items()]
        flat = np.concatenate([np.ravel(np.asarray(v, dtype=np.float64)) for v in arrays.values()]) \
            if arrays else np.zeros(0)
        return cls.from_shapes(shapes, flat)

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop, dims = self._slices[name]
        return self.values[start:stop].reshape(dims)

    def __len__(self) -> int:
        return self.values.size

    @property
    def size(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return list(self.segments)

    def copy(self) -> "ParamVector":
        return self.like(self.values)

    def like(self, values) -> "ParamVector":
        """New container with the same segment table and the given values."""
        out = object.__new__(ParamVector)
        out.values = np.array(values, dtype=np.float64)
        if out.values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.size} values, got shape {out.values.shape}")
        out.segments = self.segments
        out._slices = self._slices
        return out

    def same_layout(self, other: "ParamVector") -> bool:
        return self.segments == other.segments

    def check_finite(self, what: str = "parameters") -> None:
        if np.all(np.isfinite(self.values)):
            return
        for name in self.segments:
            if not np.all(np.isfinite(self[name])):
                raise NonFiniteError(f"non-finite {what} in segment {name!r}")

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParamVector) and self.segments == other.segments
                and np.array_equal(self.values, other.values))

    def __repr__(self) -> str:
        segs = ", ".join(f"{k}{d}" for k, (_, d) in self.segments.items())
        return f"ParamVector(size={self.size}, [{segs}])"


# ---------------------------------------------------------------- MLP

@dataclass(frozen=True)
class MlpSpec:
    """3 weight layers, tanh on the two hidden layers, identity output."""

    widths: tuple[int, int, int, int]

    def __post_init__(self):
        w = tuple(int(v) for v in self.widths)
        if len(w) != 4:
            raise ValueError(f"MLP needs exactly 4 widths (3 layers), got {len(w)}")
        if min(w) < 1:
            raise ValueError(f"MLP widths must be >= 1, got {w}")
        object.__setattr__(self, "widths", w)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for k in range(3):
            fan_in, fan_out = self.widths[k], self.widths[k + 1]
            out.append((f"W{k + 1}", (fan_out, fan_in)))
            out.append((f"b{k + 1}", (fan_out,)))
        return out

    def n_params(self) -> int:
        w = self.widths
        return sum(w[k] * w[k + 1] + w[k + 1] for k in range(3))


def mlp_init(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    params = ParamVector.from_shapes(spec.shapes())
    for k in range(3):
        fan_in, fan_out = spec.widths[k], spec.widths[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{k + 1}"][...] = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return params


def _check_input(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.n_in or x.ndim > 2:
        raise ValueError(f"MLP expects input width {spec.n_in}, got shape {x.shape}")
    return x


def _mlp_forward_cache(params: ParamVector, spec: MlpSpec, x: np.ndarray):
    h1 = np.tanh(x @ params["W1"].T + params["b1"])
    h2 = np.tanh(h1 @ params["W2"].T + params["b2"])
    out = h2 @ params["W3"].T + params["b3"]
    return h1, h2, out


def mlp_forward(params: ParamVector, spec: MlpSpec, x) -> np.ndarray:
    x = _check_input(spec, x)
    return _mlp_forward_cache(params, spec, x)[2]


def mlp_hidden(params: ParamVector, spec: MlpSpec, x) -> np.ndarray:
    """Second hidden layer activations (the representation fed to W3)."""
    x = _check_input(spec, x)
    return _mlp_forward_cache(params, spec, x)[1]


def mlp_grad(params: ParamVector, spec: MlpSpec, x, upstream,
             *, upstream_hidden=None) -> tuple[ParamVector, np.ndarray]:
    """Reverse pass. Returns (dL/dparams, dL/dx) for upstream dL/dout.

    ``upstream_hidden`` optionally adds a gradient arriving directly at the
    second hidden layer (used when the MLP body serves as a feature extractor).
    """
    x = _check_input(spec, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    G = upstream.reshape(X.shape[0], spec.n_out)
    h1, h2, _ = _mlp_forward_cache(params, spec, X)

    grads = params.like(np.empty(params.size))
    grads["W3"][...] = G.T @ h2
    grads["b3"][...] = G.sum(axis=0)
    dh2 = G @ params["W3"]
    if upstream_hidden is not None:
        dh2 = dh2 + np.asarray(upstream_hidden, dtype=np.float64).reshape(dh2.shape)
    da2 = dh2 * (1.0 - h2 * h2)
    grads["W2"][...] = da2.T @ h1
    grads["b2"][...] = da2.sum(axis=0)
    da1 = (da2 @ params["W2"]) * (1.0 - h1 * h1)
    grads["W1"][...] = da1.T @ X
    grads["b1"][...] = da1.sum(axis=0)
    dx = da1 @ params["W1"]
    return grads, (dx[0] if single else dx)


# ---------------------------------------------------------------- linear predictor

def linear_params(n_features: int, values=None) -> ParamVector:
    return ParamVector.from_shapes([("w", (n_features,)), ("b", (1,))], values)


def linear_predict(theta: ParamVector, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = theta["w"]
    if x.shape[-1] != w.size:
        raise ValueError(f"linear predictor has {w.size} weights, input width {x.shape[-1]}")
    return x @ w + theta["b"][0]


def linear_grad(theta: ParamVector, x, upstream) -> tuple[ParamVector, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    w = theta["w"]
    if x.shape[-1] != w.size:
        raise ValueError(f"linear predictor has {w.size} weights, input width {x.shape[-1]}")
    g = np.asarray(upstream, dtype=np.float64)
    grads = theta.like(np.empty(theta.size))
    if x.ndim == 1:
        g = float(g)
        grads["w"][...] = g * x
        grads["b"][0] = g
        return grads, g * w
    grads["w"][...] = g @ x
    grads["b"][0] = g.sum()
    return grads, np.outer(g, w)


def mse_and_grad(pred: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``."""
    r = pred - y
    n = r.size
    return float(r @ r / n), (2.0 / n) * r


# ---------------------------------------------------------------- optimizers

@dataclass
class OptState:
    kind: str = "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def sgd(lr: float) -> OptState:
    return OptState("sgd", lr)


def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptState:
    return OptState("adam", lr, beta1, beta2, eps)


def opt_step(state: OptState, params: ParamVector, grads) -> ParamVector:
    """Return updated parameters; ``state`` moments advance in place for Adam."""
    g = grads.values if isinstance(grads, ParamVector) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape:
        raise ValueError(f"gradient length {g.size} != parameter length {params.size}")
    if not np.all(np.isfinite(g)):
        params.like(g).check_finite("gradient")
    if state.kind == "sgd":
        return params.like(params.values - state.lr * g)
    if state.m is None:
        state.m = np.zeros_like(params.values)
        state.v = np.zeros_like(params.values)
    if state.m.shape != g.shape:
        raise ValueError("Adam moment arrays do not match parameter length")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    with np.errstate(over="ignore"):
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    if not np.all(np.isfinite(state.v)):
        params.like(np.where(np.isfinite(state.v), 0.0, np.inf)).check_finite("Adam second moment")
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params.like(params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float
    flagged: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def numeric_grad(f: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    p = np.array(point, dtype=np.float64)
    out = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        fp = f(p)
        p[i] = orig - step
        fm = f(p)
        p[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out


def grad_check(f: Callable[[np.ndarray], float], point, grad, tol: float = 1e-4,
               step: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``grad`` (array or callable) against central differences of ``f``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(grad(point) if callable(grad) else grad, dtype=np.float64).ravel()
    numeric = numeric_grad(f, point, step).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else -1
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        worst_index=worst,
        analytic=analytic,
        numeric=numeric,
        tol=tol,
        flagged=[int(i) for i in np.flatnonzero(rel >= tol)],
    )


# ---------------------------------------------------------------- checkpoint container

def _fmt_value(v: float) -> str:
    return f"{float(v).hex()} {float(v)!r}"


def write_container(path, segments: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays in the versioned text format.

    Layout::

        DPML-CHECKPOINT 1
        meta "<key>" <json value>
        segment "<name>" <count> <d1,d2,...>
        <hex float> <decimal>          (count lines)
        end
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for key, value in (meta or {}).items():
        lines.append(f"meta {json.dumps(key)} {json.dumps(value, sort_keys=True)}")
    for name, arr in segments.items():
        arr = np.asarray(arr, dtype=np.float64)
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"segment {json.dumps(name)} {arr.size} {dims}")
        lines.extend(_fmt_value(v) for v in arr.ravel())
    lines.append("end")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    decoder = json.JSONDecoder()
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {head[1]}")
    meta, segments = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line == "end":
            return segments, meta
        kind, _, rest = line.partition(" ")
        name, end = decoder.raw_decode(rest)
        rest = rest[end:].strip()
        if kind == "meta":
            meta[name] = json.loads(rest)
            i += 1
        elif kind == "segment":
            count_s, _, dims_s = rest.partition(" ")
            count = int(count_s)
            dims = tuple(int(d) for d in dims_s.split(",") if d) if dims_s else ()
            vals = np.array([float.fromhex(lines[i + 1 + k].split(" ", 1)[0]) for k in range(count)])
            segments[name] = vals.reshape(dims)
            i += 1 + count
        else:
            raise ValueError(f"{path}:{i + 1}: unexpected record {kind!r}")
    raise ValueError(f"{path}: truncated checkpoint (no end marker)")


def pack_params(prefix: str, params: ParamVector) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": params[name] for name in params.names()}


def unpack_params(prefix: str, segments: dict[str, np.ndarray]) -> ParamVector | None:
    tag = prefix + "/"
    arrays = {k[len(tag):]: v for k, v in segments.items() if k.startswith(tag)}
    return ParamVector.from_arrays(arrays) if arrays else None
