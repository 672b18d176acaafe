"""Command-line front end: ``dpml {gen-data,train,eval,ablate,verify}``.

Configuration is a flat ``key = value`` text file. Keys are the RunConfig
field names, ``synth_<field>`` for the synthetic generator, ``dev_frac`` /
``test_frac`` or ``dev_start`` / ``test_start`` for the split, and
``linear_<field>`` for the trained linear baseline. Values resolve as
flag > ``DPML_<KEY>`` environment variable > file > default.

Exit codes::

    0  success            5  training diverged
    1  internal error     6  checkpoint / config / data mismatch
    2  usage error        7  verify found a difference
    3  data error         8  file system error
    4  config error
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .baselines import LinearFitConfig, fit_linear_baseline
from .diff_core import NonFiniteError, read_container
from .inference_eval import EvalReport, dump_predictions, evaluate_all, evaluate_model
from .market_data import InstanceSet, PanelError, SplitError, SynthConfig, build_instances, \
    default_boundaries, file_fingerprint, fit_norm_stats, load_panel, normalize_tasks, split_tasks, \
    synth_generate, write_panel
from .meta_engine import ABLATIONS, MetaTrainer, RunConfig, load_model, save_model

log = logging.getLogger("dpml")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA, EXIT_CONFIG = 0, 1, 2, 3, 4
EXIT_DIVERGED, EXIT_MISMATCH, EXIT_VERIFY, EXIT_IO = 5, 6, 7, 8

ROW_LABELS = {
    (): "DPML",
    ("no_tasks",): "w/o tasks",
    ("no_encoder",): "w/o encoder",
    ("no_encoder", "no_latent"): "w/o encoder,latent variables",
    ("no_encoder", "no_decoder"): "w/o encoder,decoder",
    ("no_inner_meta",): "w/o inner meta-learning",
    ("shared_decoder",): "w/o unique decoder",
}
ABLATION_GROUPS = (
    ("Effectiveness of meta-learning", ("DPML", "w/o tasks")),
    ("Encoder-decoder framework", ("DPML", "w/o encoder", "w/o encoder,latent variables",
                                   "w/o encoder,decoder")),
    ("Dual meta-learning process", ("DPML", "w/o inner meta-learning", "w/o unique decoder")),
)
SPLIT_KEYS = {"dev_frac": float, "test_frac": float, "dev_start": int, "test_start": int}
LINEAR_KEYS = {f.name: type(f.default) for f in dataclasses.fields(LinearFitConfig) if f.name != "seed"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- configuration

def _field_types(cls) -> dict[str, type]:
    hints = {f.name: f.default for f in dataclasses.fields(cls)}
    return {k: type(v) if v is not None else list for k, v in hints.items()}


RUN_KEYS = _field_types(RunConfig)
SYNTH_KEYS = {f"synth_{k}": t for k, t in _field_types(SynthConfig).items()}
ALL_KEYS = {**RUN_KEYS, **SYNTH_KEYS, **SPLIT_KEYS, **{f"linear_{k}": t for k, t in LINEAR_KEYS.items()}}


def _coerce(key: str, raw: str):
    kind = ALL_KEYS.get(key)
    if kind is None:
        raise CliError(EXIT_CONFIG, f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind in (tuple, list):
            return tuple(float(p) for p in raw.split(","))
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad value for {key}: {raw!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def resolve_settings(config_path=None, overrides: dict | None = None, env=None) -> dict:
    """Merge file, environment and flag values (flags win)."""
    env = os.environ if env is None else env
    settings = read_config_file(config_path) if config_path else {}
    for key in ALL_KEYS:
        name = "DPML_" + key.upper()
        if name in env:
            settings[key] = _coerce(key, env[name])
    for key, value in (overrides or {}).items():
        if value is not None:
            settings[key] = value
    return settings


def run_config(settings: dict) -> RunConfig:
    try:
        return RunConfig(**{k: v for k, v in settings.items() if k in RUN_KEYS}).validate()
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid run config: {exc}") from None


def synth_config(settings: dict) -> SynthConfig:
    kw = {k[len("synth_"):]: v for k, v in settings.items() if k in SYNTH_KEYS}
    try:
        cfg = SynthConfig(**kw)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid synthetic config: {exc}") from None
    return cfg


def linear_config(settings: dict, seed: int) -> LinearFitConfig:
    kw = {k: LINEAR_KEYS[k](settings[f"linear_{k}"]) for k in LINEAR_KEYS if f"linear_{k}" in settings}
    return LinearFitConfig(seed=seed, **kw)


def parse_ablate(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    flags = {f.strip() for f in text.split(",") if f.strip()}
    bad = sorted(flags - set(ABLATIONS))
    if bad:
        raise CliError(EXIT_USAGE, f"unknown ablation flag(s) {bad}; choose from {list(ABLATIONS)}")
    return tuple(a for a in ABLATIONS if a in flags)


def row_label(flags) -> str:
    flags = tuple(a for a in ABLATIONS if a in flags)
    return ROW_LABELS.get(flags, "DPML " + "+".join(flags))


# ---------------------------------------------------------------- data pipeline

@dataclasses.dataclass
class Prepared:
    raw: list
    tasks: list
    norm: object
    fingerprint: str
    boundaries: tuple[int, int]
    excluded: list


def prepare(data_path, settings: dict) -> Prepared:
    """CSV -> instances -> chronological split -> train-only normalization."""
    try:
        panel = load_panel(data_path)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"data file not found: {data_path}") from None
    except PanelError as exc:
        raise CliError(EXIT_DATA, f"{data_path}: {exc}") from None
    if panel.dropped:
        log.warning("%s: dropped %d malformed rows", data_path, panel.dropped)
    inst = build_instances(panel)
    try:
        if "dev_start" in settings or "test_start" in settings:
            bounds = (int(settings["dev_start"]), int(settings["test_start"]))
        else:
            bounds = default_boundaries(panel.day, settings.get("dev_frac", 0.1), settings.get("test_frac", 0.1))
        res = split_tasks(inst, bounds)
    except KeyError as exc:
        raise CliError(EXIT_CONFIG, f"dev_start and test_start must be given together ({exc})") from None
    except SplitError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    if res.excluded:
        log.warning("excluded stocks with no training data: %s", ", ".join(res.excluded))
    norm = fit_norm_stats(InstanceSet.concat([t.train for t in res.tasks]).x)
    return Prepared(res.tasks, normalize_tasks(res.tasks, norm), norm, file_fingerprint(data_path),
                    bounds, list(res.excluded))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)


def make_manifest(settings: dict, cfg: RunConfig, prep: Prepared, data_path, out, config_path) -> dict:
    body = {"settings": settings, "run_config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
            "data": str(data_path), "data_fingerprint": prep.fingerprint,
            "boundaries": list(prep.boundaries), "config_file": None if config_path is None else str(config_path)}
    body["manifest_hash"] = hashlib.sha256(_canonical(body).encode()).hexdigest()
    return body


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    settings = resolve_settings(args.config, {"seed": args.seed})
    cfg = synth_config(settings)
    seed = int(settings.get("seed", 0))
    panel = synth_generate(cfg, seed)
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_panel(panel, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    logv = np.log(panel.volume[panel.volume > 0])
    print(f"wrote {len(panel)} rows to {args.out}: {len(panel.stocks)} stocks, "
          f"{len(np.unique(panel.day))} days, {panel.slots_per_day} slots/day, "
          f"log volume mean {logv.mean():.3f} sd {logv.std():.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _seeds(base: int, repeat: int) -> list[int]:
    return [base + i for i in range(repeat)]


def train_one(settings: dict, prep: Prepared, data_path, out: Path, config_path=None,
              resume: bool = False) -> dict:
    """Train one seed into ``out``: best.ckpt, last.ckpt, train_log.jsonl,
    manifest.json and loss_curve.png. Returns the summary row."""
    cfg = run_config(settings)
    manifest = make_manifest(settings, cfg, prep, data_path, out, config_path)
    mhash = manifest["manifest_hash"]
    out.mkdir(parents=True, exist_ok=True)
    last, best, log_path = out / "last.ckpt", out / "best.ckpt", out / "train_log.jsonl"
    trainer = MetaTrainer(prep.tasks, cfg, prep.norm)
    if resume and last.exists():
        _check_manifest(out / "manifest.json", mhash)
        trainer.load_state(last, best if best.exists() else None)
        log.info("resumed %s at epoch %d", out, trainer.epoch)
    elif log_path.exists():
        log_path.unlink()
    stamped = dict(manifest, created=time.strftime("%Y-%m-%dT%H:%M:%S"))
    _write_text(out / "manifest.json", json.dumps(stamped, indent=2, sort_keys=True, default=list))

    def on_epoch(tr: MetaTrainer, row: dict) -> None:
        try:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(dict(row, manifest_hash=mhash), sort_keys=True) + "\n")
            tr.save_state(last, extra={"manifest_hash": mhash})
            if tr.best_model is not None and tr.best_model.meta.get("epoch") == tr.epoch:
                _save_best(tr.best_model, best, mhash)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write checkpoint in {out}: {exc}") from None

    try:
        model = trainer.fit(callback=on_epoch)
    except NonFiniteError as exc:
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from None
    if not best.exists():
        _save_best(model, best, mhash)
    try:
        from .plots import loss_curve
        loss_curve(log_path, out / "loss_curve.png", mhash)
    except Exception as exc:  # plotting is a convenience, never fatal
        log.warning("loss curve not written: %s", exc)
    dev = evaluate_model(model, prep.tasks, "dev", seed=cfg.seed)["aggregate"]
    test = evaluate_model(model, prep.tasks, "test", seed=cfg.seed)["aggregate"]
    return {"seed": cfg.seed, "best_epoch": model.meta.get("epoch"), "dev": dev, "test": test,
            "manifest_hash": mhash}


def _save_best(model, path: Path, mhash: str) -> None:
    save_model(model, path, extra_meta={"manifest_hash": mhash})


def _check_manifest(path: Path, mhash: str) -> None:
    if not path.exists():
        return
    old = json.loads(path.read_text(encoding="utf-8")).get("manifest_hash")
    if old != mhash:
        raise CliError(EXIT_MISMATCH, f"{path}: run settings changed since the checkpoint was written")


def _summary(rows: list[dict]) -> dict:
    out = {}
    for split in ("dev", "test"):
        for k in ("mse", "mae", "acc"):
            vals = np.array([r[split][k] for r in rows])
            out[f"{split}_{k}_mean"] = float(vals.mean())
            out[f"{split}_{k}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out


def _flag_overrides(args) -> dict:
    over = {"seed": getattr(args, "seed", None)}
    for flag in parse_ablate(getattr(args, "ablate", None)):
        over[flag] = True
    return over


def cmd_train(args) -> int:
    settings = resolve_settings(args.config, _flag_overrides(args))
    base = run_config(settings)
    prep = prepare(args.data, settings)
    out = Path(args.out)
    rows = []
    for seed in _seeds(base.seed, args.repeat):
        cell = out if args.repeat == 1 else out / f"seed_{seed}"
        rows.append(train_one(dict(settings, seed=seed), prep, args.data, cell, args.config, args.resume))
        r = rows[-1]
        print(f"seed {seed}: best epoch {r['best_epoch']}  dev mse {r['dev']['mse']:.4f}  "
              f"test mse {r['test']['mse']:.4f}")
    result = {"label": row_label(base.ablations), "rows": rows, "summary": _summary(rows)}
    _write_text(out / "results.json", json.dumps(result, indent=2, sort_keys=True))
    s = result["summary"]
    print(f"{result['label']}: test mse {s['test_mse_mean']:.4f} ± {s['test_mse_std']:.4f} over {len(rows)} seed(s)")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "best.ckpt"
    if not p.exists():
        raise CliError(EXIT_DATA, f"checkpoint not found: {p}")
    return p


def evaluate_run(ckpt: Path, data_path, split: str, out: Path, settings: dict | None = None) -> EvalReport:
    """Score a checkpoint and all baselines; writes report JSON, text table,
    predictions CSV and a metric-bar plot into ``out``."""
    try:
        model = load_model(ckpt)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot read checkpoint {ckpt}: {exc}") from None
    manifest_path = ckpt.parent / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else None
    mhash = model.meta.get("manifest_hash", "")
    if model.meta.get("config_hash") != model.config.hash():
        raise CliError(EXIT_MISMATCH, f"{ckpt}: stored config hash does not match its config")
    if manifest is not None:
        if manifest["config_hash"] != model.config.hash() or manifest["manifest_hash"] != mhash:
            raise CliError(EXIT_MISMATCH, f"{ckpt}: checkpoint does not belong to {manifest_path}")
        if file_fingerprint(data_path) != manifest["data_fingerprint"]:
            raise CliError(EXIT_MISMATCH, f"{data_path}: data differs from the training run")
        base_settings = manifest["settings"]
    else:
        base_settings = {}
    if settings:
        cfg = run_config(dict(base_settings, **settings))
        cfg = dataclasses.replace(cfg, n_features=model.config.n_features)
        if cfg.hash() != model.config.hash():
            raise CliError(EXIT_MISMATCH, "config differs from the one the checkpoint was trained with")
    prep = prepare(data_path, base_settings if manifest is not None else dict(settings or {}))
    if model.norm is not None and prep.norm.fingerprint() != model.norm.fingerprint():
        raise CliError(EXIT_MISMATCH, "normalization statistics differ from the training run")
    train_pool = InstanceSet.concat([t.train for t in prep.tasks])
    dev_pool = InstanceSet.concat([t.dev for t in prep.tasks])
    try:
        theta, _ = fit_linear_baseline(train_pool, linear_config(base_settings, model.config.seed), dev_pool)
    except NonFiniteError as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from None
    label = row_label(model.config.ablations)
    report = evaluate_all(model, prep.raw, split, theta, prep.norm, model_name=label, seed=model.config.seed)
    report.manifest_hash = mhash
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / f"report_{split}.json", report.to_json() + "\n")
    _write_text(out / f"report_{split}.txt", report.table())
    try:
        dump_predictions(out / f"predictions_{split}.csv", model, prep.raw, split, seed=model.config.seed)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write predictions: {exc}") from None
    try:
        from .plots import metric_bars
        metric_bars(report, out / f"metrics_{split}.png")
    except Exception as exc:
        log.warning("metric plot not written: %s", exc)
    return report


def cmd_eval(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    settings = None
    if args.config or args.ablate or args.seed is not None:
        settings = resolve_settings(args.config, _flag_overrides(args), env={})
    out = Path(args.out) if args.out else ckpt.parent
    report = evaluate_run(ckpt, args.data, args.split, out, settings)
    print(report.table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- ablate

ABLATION_ROWS = tuple(flags for flags in ROW_LABELS)


def _slug(label: str) -> str:
    return label.replace("/", "").replace(",", "_").replace(" ", "_").replace("-", "_")


def cmd_ablate(args) -> int:
    base_settings = resolve_settings(args.config, {"seed": args.seed})
    for a in ABLATIONS:
        base_settings.pop(a, None)
    base = run_config(base_settings)
    rows = list(ABLATION_ROWS)
    if args.ablate:
        only = set(parse_ablate(args.ablate))
        rows = [flags for flags in rows if not flags or only & set(flags)]
    prep = prepare(args.data, base_settings)
    out = Path(args.out)
    results = {}
    for flags in rows:
        label = ROW_LABELS[flags]
        cells = []
        for seed in _seeds(base.seed, args.repeat):
            settings = dict(base_settings, seed=seed, **{f: True for f in flags})
            cell = out / "cells" / _slug(label) / f"seed_{seed}"
            done = cell / "result.json"
            mhash = make_manifest(settings, run_config(settings), prep, args.data, cell, args.config)["manifest_hash"]
            if done.exists():
                row = json.loads(done.read_text(encoding="utf-8"))
                if row.get("manifest_hash") == mhash:
                    log.info("cell %s seed %d already done", label, seed)
                    cells.append(row)
                    continue
            row = train_one(settings, prep, args.data, cell, args.config, resume=True)
            _write_text(done, json.dumps(row, indent=2, sort_keys=True))
            cells.append(row)
            print(f"{label:<30} seed {seed}: test mse {row['test']['mse']:.4f}", flush=True)
        results[label] = {"flags": list(flags), "cells": cells, "summary": _summary(cells)}
    payload = {"data_fingerprint": prep.fingerprint, "seeds": _seeds(base.seed, args.repeat), "rows": results}
    _write_text(out / "ablation.json", json.dumps(payload, indent=2, sort_keys=True))
    table = ablation_table(results)
    _write_text(out / "ablation.txt", table)
    print(table, end="")
    return EXIT_OK


def ablation_table(results: dict) -> str:
    width = max(len(k) for k in results) if results else 5
    lines = []
    for title, names in ABLATION_GROUPS:
        present = [n for n in names if n in results]
        if not present:
            continue
        lines.append(title)
        lines.append(f"  {'Model':<{width}}  {'MSE':>15}  {'MAE':>15}  {'ACC':>15}")
        for n in present:
            s = results[n]["summary"]
            cols = "  ".join(f"{s[f'test_{k}_mean']:7.4f}±{s[f'test_{k}_std']:<6.4f}" for k in ("mse", "mae", "acc"))
            lines.append(f"  {n:<{width}}  {cols}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- verify

def _same_file(a: Path, b: Path) -> bool:
    return a.exists() and b.exists() and a.read_bytes() == b.read_bytes()


def cmd_verify(args) -> int:
    """Re-run a completed training run from its manifest and compare bytes."""
    run = Path(args.run)
    manifest_path = run / "manifest.json"
    if not manifest_path.exists():
        raise CliError(EXIT_DATA, f"{run}: no manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    settings = {k: tuple(v) if isinstance(v, list) else v for k, v in manifest["settings"].items()}
    data = args.data or manifest["data"]
    prep = prepare(data, settings)
    if prep.fingerprint != manifest["data_fingerprint"]:
        raise CliError(EXIT_MISMATCH, f"{data}: data differs from the recorded run")
    problems = []
    for name in ("best.ckpt", "last.ckpt"):
        path = run / name
        if path.exists():
            _, meta = read_container(path)
            if meta.get("manifest_hash") != manifest["manifest_hash"]:
                problems.append(f"{name}: manifest hash {meta.get('manifest_hash')} != {manifest['manifest_hash']}")
    with tempfile.TemporaryDirectory() as tmp:
        redo = Path(tmp) / "run"
        train_one(settings, prep, data, redo, manifest.get("config_file"))
        for name in ("best.ckpt", "last.ckpt", "train_log.jsonl"):
            if not _same_file(run / name, redo / name):
                problems.append(f"{name}: re-run output differs")
        if (run / f"report_{args.split}.json").exists():
            evaluate_run(redo / "best.ckpt", data, args.split, redo)
            if not _same_file(run / f"report_{args.split}.json", redo / f"report_{args.split}.json"):
                problems.append(f"report_{args.split}.json: re-run output differs")
    if problems:
        for p in problems:
            print("MISMATCH", p)
        return EXIT_VERIFY
    print(f"verified {run}: outputs reproduce bit for bit (manifest {manifest['manifest_hash'][:12]})")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run-config file")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dpml", description="Dual-process meta-learning for intraday volume.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic OHLCV panel as CSV")
    g.add_argument("--out", required=True, help="CSV path")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="meta-train and keep the best-dev checkpoint")
    t.add_argument("--data", required=True, help="panel CSV")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--repeat", type=int, default=1, help="number of consecutive seeds")
    t.add_argument("--ablate", help="comma-separated ablation flags")
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt if present")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint against all baselines")
    e.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    e.add_argument("--data", required=True, help="panel CSV")
    e.add_argument("--split", choices=("dev", "test"), default="test")
    e.add_argument("--out", help="report directory (default: next to the checkpoint)")
    e.add_argument("--ablate", help="expected ablation flags, checked against the checkpoint")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train the full model and every ablation")
    a.add_argument("--data", required=True, help="panel CSV")
    a.add_argument("--out", required=True, help="sweep directory")
    a.add_argument("--repeat", type=int, default=1, help="seeds per row")
    a.add_argument("--ablate", help="restrict the sweep to rows using these flags")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", parents=[common], help="re-run a training run and compare outputs")
    v.add_argument("--run", required=True, help="run directory holding manifest.json")
    v.add_argument("--data", help="panel CSV (default: path recorded in the manifest)")
    v.add_argument("--split", choices=("dev", "test"), default="test")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "repeat", 1) < 1:
        parser.error("--repeat must be >= 1")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dpml: error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"dpml: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"dpml: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
