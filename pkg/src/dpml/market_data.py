"""Panels of intraday OHLCV bars, regression instances and chronological splits.

Feature layout of an instance (160 values): 32 history slots, 12 earlier slots
of the same day (oldest first) followed by the same slot on the 20 previous
trading days (oldest first). Each slot contributes
``[log volume, log open, log close, log high, log low]``.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import lfilter

log = logging.getLogger(__name__)

N_SLOT_LAGS = 12
N_DAY_LAGS = 20
N_HISTORY = N_SLOT_LAGS + N_DAY_LAGS
SLOT_FIELDS = ("volume", "open", "close", "high", "low")
N_SLOT_FEATURES = len(SLOT_FIELDS)
N_FEATURES = N_SLOT_FEATURES * N_HISTORY

CSV_COLUMNS = ("stock_id", "day", "slot", "open", "high", "low", "close", "volume")

# column positions of the log-volume entries in x
VOLUME_COLS = np.arange(N_HISTORY) * N_SLOT_FEATURES
SLOT_VOLUME_COLS = VOLUME_COLS[:N_SLOT_LAGS]
DAY_VOLUME_COLS = VOLUME_COLS[N_SLOT_LAGS:]


class PanelError(ValueError):
    """Malformed panel input."""


class SplitError(ValueError):
    pass


# ---------------------------------------------------------------- panel

@dataclass(frozen=True)
class PanelRecord:
    stock_id: str
    day_index: int
    slot_index: int
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass
class MarketPanel:
    """Column-oriented panel, sorted by (stock, day, slot)."""

    stock_id: np.ndarray
    day: np.ndarray
    slot: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    slots_per_day: int
    dropped: int = 0

    def __post_init__(self):
        self.stock_id = np.asarray(self.stock_id, dtype=object)
        self.day = np.asarray(self.day, dtype=np.int64)
        self.slot = np.asarray(self.slot, dtype=np.int64)
        for name in ("open", "high", "low", "close", "volume"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.slots_per_day < 1:
            raise PanelError("slots_per_day must be positive")
        if len(self) and (self.slot.min() < 0 or self.slot.max() >= self.slots_per_day):
            raise PanelError(f"slot index outside [0, {self.slots_per_day})")
        order = np.lexsort((self.slot, self.day, self.stock_id.astype(str)))
        for name in ("stock_id", "day", "slot", "open", "high", "low", "close", "volume"):
            setattr(self, name, getattr(self, name)[order])
        if len(self) > 1:
            same = ((self.stock_id[1:] == self.stock_id[:-1]) & (self.day[1:] == self.day[:-1])
                    & (self.slot[1:] == self.slot[:-1]))
            if same.any():
                i = int(np.flatnonzero(same)[0])
                raise PanelError(
                    f"duplicate record (stock={self.stock_id[i]}, day={self.day[i]}, slot={self.slot[i]})")

    def __len__(self) -> int:
        return self.day.size

    @property
    def stocks(self) -> list[str]:
        return sorted(set(self.stock_id.tolist()))

    def records(self):
        for i in range(len(self)):
            yield PanelRecord(str(self.stock_id[i]), int(self.day[i]), int(self.slot[i]),
                              float(self.open[i]), float(self.high[i]), float(self.low[i]),
                              float(self.close[i]), float(self.volume[i]))

    @classmethod
    def from_records(cls, records: Sequence[PanelRecord], slots_per_day: int | None = None):
        records = list(records)
        if slots_per_day is None:
            slots_per_day = max(r.slot_index for r in records) + 1 if records else 1
        cols = {k: [getattr(r, k) for r in records] for k in
                ("stock_id", "day_index", "slot_index", "open", "high", "low", "close", "volume")}
        return cls(cols["stock_id"], cols["day_index"], cols["slot_index"], cols["open"], cols["high"],
                   cols["low"], cols["close"], cols["volume"], slots_per_day)


def _valid_bar(o, h, lo, c, v) -> bool:
    if not all(math.isfinite(t) for t in (o, h, lo, c, v)):
        return False
    return lo > 0 and o > 0 and c > 0 and h > 0 and v >= 0 and h >= max(o, c) and lo <= min(o, c)


def load_panel(path, slots_per_day: int | None = None) -> MarketPanel:
    """Read a panel CSV. Rows with empty fields or invalid prices are dropped
    and counted in ``panel.dropped``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        if tuple(header) != CSV_COLUMNS:
            missing = [c for c in CSV_COLUMNS if c not in header]
            extra = [c for c in header if c not in CSV_COLUMNS]
            raise PanelError(f"{path}: bad header {header}; expected {list(CSV_COLUMNS)}"
                             f" (missing={missing}, unexpected={extra})")
        records, dropped = [], 0
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS) or any(not cell.strip() for cell in row):
                dropped += 1
                continue
            try:
                sid = row[0].strip()
                day, slot = int(row[1]), int(row[2])
                o, h, lo, c, v = (float(t) for t in row[3:8])
            except ValueError:
                dropped += 1
                continue
            key = (sid, day, slot)
            if key in seen:
                raise PanelError(f"{path}:{lineno}: duplicate record (stock={sid}, day={day}, slot={slot})")
            seen.add(key)
            if day < 0 or slot < 0 or not _valid_bar(o, h, lo, c, v):
                dropped += 1
                continue
            records.append(PanelRecord(sid, day, slot, o, h, lo, c, v))
    if dropped:
        log.info("%s: dropped %d malformed rows", path, dropped)
    panel = MarketPanel.from_records(records, slots_per_day)
    panel.dropped = dropped
    return panel


def write_panel(panel: MarketPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(len(panel)):
            w.writerow([panel.stock_id[i], int(panel.day[i]), int(panel.slot[i]),
                        repr(float(panel.open[i])), repr(float(panel.high[i])),
                        repr(float(panel.low[i])), repr(float(panel.close[i])),
                        repr(float(panel.volume[i]))])


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- instances

class Instance(NamedTuple):
    stock_id: str
    day_index: int
    slot_index: int
    x: np.ndarray
    y: float
    v_last: float


@dataclass
class InstanceSet:
    """Column-oriented collection of instances."""

    stock_id: np.ndarray
    day: np.ndarray
    slot: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v_last: np.ndarray
    skipped: int = 0

    def __post_init__(self):
        self.stock_id = np.asarray(self.stock_id, dtype=object)
        self.day = np.asarray(self.day, dtype=np.int64)
        self.slot = np.asarray(self.slot, dtype=np.int64)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            x = x.reshape(len(self.day), -1) if len(self.day) else x.reshape(0, N_FEATURES)
        self.x = x
        self.y = np.asarray(self.y, dtype=np.float64)
        self.v_last = np.asarray(self.v_last, dtype=np.float64)

    def __len__(self) -> int:
        return self.day.size

    def __getitem__(self, i: int) -> Instance:
        return Instance(str(self.stock_id[i]), int(self.day[i]), int(self.slot[i]),
                        self.x[i], float(self.y[i]), float(self.v_last[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "InstanceSet":
        return InstanceSet(self.stock_id[idx], self.day[idx], self.slot[idx],
                           self.x[idx], self.y[idx], self.v_last[idx])

    def with_x(self, x) -> "InstanceSet":
        return InstanceSet(self.stock_id, self.day, self.slot, x, self.y, self.v_last, self.skipped)

    @classmethod
    def empty(cls, n_features: int = N_FEATURES) -> "InstanceSet":
        return cls(np.array([], dtype=object), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros((0, n_features)), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, parts: Sequence["InstanceSet"]) -> "InstanceSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.stock_id for p in parts]), np.concatenate([p.day for p in parts]),
                   np.concatenate([p.slot for p in parts]), np.vstack([p.x for p in parts]),
                   np.concatenate([p.y for p in parts]), np.concatenate([p.v_last for p in parts]))


def _stock_grid(panel: MarketPanel, mask: np.ndarray):
    """Dense (n_days, slots, 5) log grid for one stock; NaN where missing/unusable."""
    days = np.unique(panel.day[mask])
    grid = np.full((days.size, panel.slots_per_day, N_SLOT_FEATURES), np.nan)
    di = np.searchsorted(days, panel.day[mask])
    si = panel.slot[mask]
    vol = panel.volume[mask]
    with np.errstate(divide="ignore"):
        vals = np.stack([np.log(np.where(vol > 0, vol, np.nan)), np.log(panel.open[mask]),
                         np.log(panel.close[mask]), np.log(panel.high[mask]),
                         np.log(panel.low[mask])], axis=1)
    grid[di, si] = vals
    return days, grid


def build_instances(panel: MarketPanel) -> InstanceSet:
    """One instance per (stock, day, slot) with full, positive 12-slot and
    20-day history; candidates lacking any constituent are skipped."""
    parts, skipped = [], 0
    for sid in panel.stocks:
        mask = panel.stock_id == sid
        days, grid = _stock_grid(panel, mask)
        n_days, n_slots = grid.shape[:2]
        ok = np.all(np.isfinite(grid), axis=2)
        present = np.zeros((n_days, n_slots), bool)
        present[np.searchsorted(days, panel.day[mask]), panel.slot[mask]] = True
        n_candidates = int(present.sum())
        if n_days <= N_DAY_LAGS or n_slots <= N_SLOT_LAGS:
            skipped += n_candidates
            continue
        d_idx, s_idx = np.meshgrid(np.arange(N_DAY_LAGS, n_days), np.arange(N_SLOT_LAGS, n_slots),
                                   indexing="ij")
        d_idx, s_idx = d_idx.ravel(), s_idx.ravel()
        # history coordinates, oldest first
        slot_lag = np.arange(N_SLOT_LAGS, 0, -1)
        day_lag = np.arange(N_DAY_LAGS, 0, -1)
        hd = np.concatenate([np.repeat(d_idx[:, None], N_SLOT_LAGS, 1), d_idx[:, None] - day_lag], axis=1)
        hs = np.concatenate([s_idx[:, None] - slot_lag, np.repeat(s_idx[:, None], N_DAY_LAGS, 1)], axis=1)
        valid = ok[d_idx, s_idx] & np.all(ok[hd, hs], axis=1)
        skipped += n_candidates - int(valid.sum())
        d_idx, s_idx, hd, hs = d_idx[valid], s_idx[valid], hd[valid], hs[valid]
        if d_idx.size == 0:
            continue
        x = grid[hd, hs].reshape(d_idx.size, N_FEATURES)
        parts.append(InstanceSet(np.full(d_idx.size, sid, dtype=object), days[d_idx], s_idx, x,
                                 grid[d_idx, s_idx, 0], grid[d_idx, s_idx - 1, 0]))
    out = InstanceSet.concat(parts)
    out.skipped = skipped
    return out


# ---------------------------------------------------------------- splits

@dataclass
class StockTask:
    stock_id: str
    train: InstanceSet
    dev: InstanceSet
    test: InstanceSet

    def split(self, name: str) -> InstanceSet:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class SplitResult:
    tasks: list[StockTask]
    excluded: list[str] = field(default_factory=list)


def default_boundaries(days, dev_frac: float = 0.1, test_frac: float = 0.1) -> tuple[int, int]:
    """Chronological 80/10/10 cut over the distinct trading days."""
    days = np.unique(np.asarray(days))
    if days.size < 3:
        raise SplitError("need at least 3 distinct days to split")
    n = days.size
    dev_i = int(round(n * (1.0 - dev_frac - test_frac)))
    test_i = int(round(n * (1.0 - test_frac)))
    dev_i = min(max(dev_i, 1), n - 2)
    test_i = min(max(test_i, dev_i + 1), n - 1)
    return int(days[dev_i]), int(days[test_i])


def split_tasks(instances: InstanceSet, boundaries: tuple[int, int]) -> SplitResult:
    dev_start, test_start = boundaries
    if not dev_start < test_start:
        raise SplitError(f"dev_start ({dev_start}) must be < test_start ({test_start})")
    tasks, excluded = [], []
    for sid in sorted(set(instances.stock_id.tolist())):
        idx = np.flatnonzero(instances.stock_id == sid)
        order = np.lexsort((instances.slot[idx], instances.day[idx]))
        sub = instances.take(idx[order])
        train = sub.take(sub.day < dev_start)
        if len(train) == 0:
            excluded.append(sid)
            continue
        dev = sub.take((sub.day >= dev_start) & (sub.day < test_start))
        test = sub.take(sub.day >= test_start)
        tasks.append(StockTask(sid, train, dev, test))
    if not tasks:
        raise SplitError("every stock has an empty train split")
    if excluded:
        log.warning("excluded %d stocks with no training instances: %s", len(excluded), excluded)
    return SplitResult(tasks, excluded)


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    eps_std: float = 1e-8

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean).tobytes())
        h.update(np.ascontiguousarray(self.std).tobytes())
        return h.hexdigest()


def fit_norm_stats(train_x, eps_std: float = 1e-8) -> NormStats:
    x = train_x.x if isinstance(train_x, InstanceSet) else np.asarray(train_x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot fit normalization on an empty train set")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), eps_std)
    mean.flags.writeable = False
    std.flags.writeable = False
    return NormStats(mean, std, eps_std)


def apply_norm(instances, stats: NormStats):
    if isinstance(instances, InstanceSet):
        return instances.with_x((instances.x - stats.mean) / stats.std)
    return (np.asarray(instances, dtype=np.float64) - stats.mean) / stats.std


def invert_norm(x, stats: NormStats) -> np.ndarray:
    return np.asarray(x) * stats.std + stats.mean


def normalize_tasks(tasks: Sequence[StockTask], stats: NormStats) -> list[StockTask]:
    return [StockTask(t.stock_id, apply_norm(t.train, stats), apply_norm(t.dev, stats),
                      apply_norm(t.test, stats)) for t in tasks]


# ---------------------------------------------------------------- synthetic panels

@dataclass
class SynthConfig:
    """Per-stock coefficients are drawn uniformly from the ranges unless an
    explicit per-stock sequence is given."""

    n_stocks: int = 10
    n_days: int = 60
    slots_per_day: int = 13
    base_range: tuple[float, float] = (8.0, 12.0)
    season_amp_range: tuple[float, float] = (0.3, 1.0)
    phase_range: tuple[float, float] = (0.0, 2 * math.pi)
    dow_amp_range: tuple[float, float] = (0.0, 0.3)
    ar_range: tuple[float, float] = (0.0, 0.9)
    noise_sd_range: tuple[float, float] = (0.1, 0.3)
    small_cap_fraction: float = 0.3
    small_cap_noise_mult: float = 2.0
    price_vol: float = 0.002
    start_price_range: tuple[float, float] = (10.0, 200.0)
    phases: Sequence[float] | None = None
    ar_coefs: Sequence[float] | None = None
    noise_sds: Sequence[float] | None = None

    def validate(self) -> None:
        for name in ("n_stocks", "n_days", "slots_per_day"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"SynthConfig.{name} must be positive")
        for name in ("phases", "ar_coefs", "noise_sds"):
            seq = getattr(self, name)
            if seq is not None and len(seq) != self.n_stocks:
                raise ValueError(f"SynthConfig.{name} needs {self.n_stocks} entries")


@dataclass
class StockProfile:
    stock_id: str
    base: float
    season_amp: float
    phase: float
    dow: np.ndarray
    ar: float
    noise_sd: float
    small_cap: bool


def seasonal_shape(slot, slots_per_day: int, phase: float) -> np.ndarray:
    """U-shaped intraday curve (high at open/close for phase 0), shifted by ``phase``."""
    return np.cos(2.0 * math.pi * (np.asarray(slot) + 0.5) / slots_per_day + phase)


def deterministic_log_volume(profile: StockProfile, day, slot, slots_per_day: int) -> np.ndarray:
    return (profile.base + profile.season_amp * seasonal_shape(slot, slots_per_day, profile.phase)
            + profile.dow[np.asarray(day) % 5])


def draw_profiles(cfg: SynthConfig, seed) -> list[StockProfile]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.n_stocks
    n_small = int(round(cfg.small_cap_fraction * n))
    small = np.zeros(n, bool)
    small[rng.permutation(n)[:n_small]] = True
    width = len(str(n - 1))
    out = []
    for i in range(n):
        base = rng.uniform(*cfg.base_range)
        amp = rng.uniform(*cfg.season_amp_range)
        phase = rng.uniform(*cfg.phase_range)
        dow = rng.uniform(-1.0, 1.0, size=5) * rng.uniform(*cfg.dow_amp_range)
        ar = rng.uniform(*cfg.ar_range)
        sd = rng.uniform(*cfg.noise_sd_range)
        if cfg.phases is not None:
            phase = float(cfg.phases[i])
        if cfg.ar_coefs is not None:
            ar = float(cfg.ar_coefs[i])
        if cfg.noise_sds is not None:
            sd = float(cfg.noise_sds[i])
        if small[i]:
            sd *= cfg.small_cap_noise_mult
        out.append(StockProfile(f"S{i:0{width}d}", base, amp, phase, dow, ar, sd, bool(small[i])))
    return out


def synth_generate(cfg: SynthConfig, seed: int) -> MarketPanel:
    """Deterministic synthetic panel: log volume = stock base + intraday
    seasonality + day-of-week effect + AR(1) noise; prices follow a
    log-normal random walk."""
    profiles = draw_profiles(cfg, seed)
    spd = cfg.slots_per_day
    n_t = cfg.n_days * spd
    day = np.repeat(np.arange(cfg.n_days), spd)
    slot = np.tile(np.arange(spd), cfg.n_days)
    streams = np.random.SeedSequence(seed).spawn(len(profiles))
    cols = {k: [] for k in ("stock_id", "day", "slot", "open", "high", "low", "close", "volume")}
    for prof, ss in zip(profiles, streams):
        rng = np.random.default_rng(ss)
        eps = rng.standard_normal(n_t)
        start = 0.0
        if prof.noise_sd > 0:
            start = rng.standard_normal() * prof.noise_sd / math.sqrt(max(1.0 - prof.ar ** 2, 1e-6))
        noise, _ = lfilter([prof.noise_sd], [1.0, -prof.ar], eps, zi=[prof.ar * start])
        logv = deterministic_log_volume(prof, day, slot, spd) + noise
        p0 = math.log(rng.uniform(*cfg.start_price_range))
        steps = rng.standard_normal(n_t) * cfg.price_vol
        logp = p0 + np.concatenate([[0.0], np.cumsum(steps)])
        o, c = np.exp(logp[:-1]), np.exp(logp[1:])
        wick = np.abs(rng.standard_normal((2, n_t))) * cfg.price_vol * 0.5
        cols["stock_id"].append(np.full(n_t, prof.stock_id, dtype=object))
        cols["day"].append(day)
        cols["slot"].append(slot)
        cols["open"].append(o)
        cols["close"].append(c)
        cols["high"].append(np.maximum(o, c) * np.exp(wick[0]))
        cols["low"].append(np.minimum(o, c) * np.exp(-wick[1]))
        cols["volume"].append(np.exp(logv))
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return MarketPanel(cat["stock_id"], cat["day"], cat["slot"], cat["open"], cat["high"], cat["low"],
                       cat["close"], cat["volume"], spd)
