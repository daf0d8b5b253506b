"""Experiment front door: ``fedsim run | compare | selftest``.

Configs are JSON objects; every key has a default, so a minimal file like
``{"algorithm": "fedagm", "rounds": 100}`` is complete. ``--set a.b=v``
overrides any resolved key with a dotted path (values parse as JSON, with
a bare-string fallback so ``--set algorithm=fedcm`` works unquoted). The
fully resolved config is hashed (sha256 over its canonical serialization)
and echoed into manifest.json, so two runs with the same hash are
byte-identical in rounds.csv and summary.json.

Exit codes: 0 success, 2 config/input problem (parse errors carry
line:column), 3 numeric abort (message carries round/client; the partial
rounds.csv written so far is kept).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .client import LocalConfig
from .data import generate_synthetic, load_csv, split_stratified, take_per_class
from .engine import ALGORITHMS, RunConfig, run
from .errors import ConfigError, NumericError, StructuralError
from .metrics import Saturated, rounds_to_target
from .models import ModelSpec
from .selftest import run_selftest
from .server import ServerHyper

CSV_HEADER = "round,train_loss,test_accuracy,ema_accuracy,bytes_down,bytes_up\n"

DEFAULT_CONFIG = {
    "algorithm": "fedavg",
    "seed": 0,
    "rounds": 50,
    "clients": 10,
    "participation": 1.0,
    "eval_every": 1,
    "targets": [],
    "model": {
        "kind": "softmax_classifier",
        "input_dim": 20,
        "output_dim": 10,
        "hidden_dims": [],
        "l2_weight_decay": 0.001,
    },
    "data": {
        "kind": "synthetic",
        "classes": 10,
        "train_per_class": 50,
        "test_per_class": 20,
        "input_dim": 20,
        "spread": 1.0,
        "path": None,
        "label_column": None,
        "test_fraction": 0.2,
        "normalize": True,
    },
    "partition": {"kind": "iid", "concentration": 0.3},
    "local": {
        "k": 50,
        "batch_size": None,
        "epochs": 5,
        "lr0": 0.1,
        "lr_decay": 1.0,
        "clip_norm": 10.0,
        "alpha": 1.0,
        "beta": 0.01,
        "prox_mu": 0.0,
        "cm_alpha": 0.1,
        "dyn_alpha": 0.01,
    },
    "server": {
        "tau": 1.0,
        "lam": 0.85,
        "global_lr": None,
        "avgm_beta": 0.6,
        "adam_tau": 0.001,
    },
}

# keys that cmd_compare requires to be identical across its configs: the
# runs must see the same data, model, sampling schedule, and metrics so
# only the optimizer differs.
_COMPARE_FREE_KEYS = ("algorithm", "local", "server")


def _coerce(default, value, keypath: str, path: str | None):
    """Align a config value's type with the default's (ints promote to
    floats, bools stay bools); None-default leaves pass through and are
    validated at build time."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{keypath} must be true or false", path=path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{keypath} must be a number", path=path)
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{keypath} must be an integer", path=path)
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{keypath} must be a string", path=path)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{keypath} must be a list", path=path)
    return value


def _merge(defaults: dict, raw: dict, prefix: str, path: str | None) -> dict:
    for key in raw:
        if key not in defaults:
            raise ConfigError(f"unknown config key: {prefix}{key}", path=path)
    out = {}
    for key, dv in defaults.items():
        if key not in raw:
            out[key] = copy.deepcopy(dv)
        elif isinstance(dv, dict):
            if not isinstance(raw[key], dict):
                raise ConfigError(f"{prefix}{key} must be an object", path=path)
            out[key] = _merge(dv, raw[key], f"{prefix}{key}.", path)
        else:
            out[key] = _coerce(dv, raw[key], f"{prefix}{key}", path)
    return out


def load_config(path: str) -> dict:
    """Parse a JSON config file and fill in every default."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}", path=path) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", path=path,
                          line=exc.lineno, column=exc.colno) from None
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object", path=path)
    return _merge(DEFAULT_CONFIG, raw, "", path)


def apply_overrides(cfg: dict, pairs: list[str]) -> None:
    """Apply ``--set key.path=value`` pairs in order, in place."""
    for item in pairs:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        node, default = cfg, DEFAULT_CONFIG
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(default.get(p), dict):
                raise ConfigError(f"--set addresses unknown key: {key}")
            node, default = node[p], default[p]
        leaf = parts[-1]
        if leaf not in default or isinstance(default[leaf], dict):
            raise ConfigError(f"--set addresses unknown key: {key}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node[leaf] = _coerce(default[leaf], value, key, None)


def finalize_config(cfg: dict) -> None:
    """Fill algorithm-dependent defaults (FedAdam wants a small server
    step; every other rule applies the mean at full strength)."""
    if cfg["server"]["global_lr"] is None:
        cfg["server"]["global_lr"] = 0.01 if cfg["algorithm"] == "fedadam" else 1.0


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def resolve_config(path: str, overrides: list[str], seed: int | None) -> dict:
    cfg = load_config(path)
    apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    finalize_config(cfg)
    return cfg


def build_model(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    if m["kind"] == "linear_regression" and m["output_dim"] != 1:
        raise ConfigError("model.output_dim must be 1 for linear_regression")
    try:
        return ModelSpec(kind=m["kind"], input_dim=m["input_dim"],
                         output_dim=m["output_dim"],
                         hidden_dims=tuple(m["hidden_dims"]),
                         l2_weight_decay=m["l2_weight_decay"])
    except StructuralError as exc:
        raise ConfigError(f"model: {exc}") from None


def build_dataset(cfg: dict):
    """Materialize (train, test, meta) from the data section."""
    d = cfg["data"]
    seed = cfg["seed"]
    if d["kind"] == "synthetic":
        if d["train_per_class"] < 1 or d["test_per_class"] < 1:
            raise ConfigError("data.train_per_class and data.test_per_class "
                              "must be positive")
        full = generate_synthetic(seed=seed, clusters=d["classes"],
                                  per_class=d["train_per_class"] + d["test_per_class"],
                                  input_dim=d["input_dim"], spread=d["spread"])
        train, test = take_per_class(full, d["train_per_class"])
        meta = {"kind": "synthetic"}
    elif d["kind"] == "csv":
        if not d["path"] or not d["label_column"]:
            raise ConfigError("csv data needs data.path and data.label_column")
        ds = load_csv(d["path"], d["label_column"], normalize=d["normalize"])
        if not 0 < d["test_fraction"] < 1:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
        train, test = split_stratified(ds, d["test_fraction"], seed)
        meta = {"kind": "csv", **_jsonable(ds.meta)}
    else:
        raise ConfigError(f"unknown data kind: {d['kind']!r}")
    meta["train_examples"] = train.n
    meta["test_examples"] = test.n

    m = cfg["model"]
    if train.features.shape[1] != m["input_dim"]:
        raise ConfigError(f"model.input_dim is {m['input_dim']} but the data "
                          f"has {train.features.shape[1]} features")
    if m["kind"] != "linear_regression" and train.class_count != m["output_dim"]:
        raise ConfigError(f"model.output_dim is {m['output_dim']} but the data "
                          f"has {train.class_count} classes")
    return train, test, meta


def build_run_config(cfg: dict) -> RunConfig:
    try:
        local = LocalConfig(**cfg["local"])
        server = ServerHyper(**cfg["server"])
        return RunConfig(algorithm=cfg["algorithm"], model=build_model(cfg),
                         n_clients=cfg["clients"], rounds=cfg["rounds"],
                         participation=cfg["participation"], seed=cfg["seed"],
                         eval_every=cfg["eval_every"],
                         targets=tuple(float(t) for t in cfg["targets"]),
                         partition_kind=cfg["partition"]["kind"],
                         concentration=cfg["partition"]["concentration"],
                         local=local, server=server)
    except StructuralError as exc:
        raise ConfigError(str(exc)) from None
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer, np.floating, np.bool_)):
        return value.item()
    return value


def _fmt(x: float) -> str:
    # repr gives the shortest decimal that round-trips, so reruns of the
    # same config produce byte-identical files
    return repr(float(x))


def _csv_row(rec) -> str:
    return (f"{rec.round},{_fmt(rec.train_loss)},{_fmt(rec.test_accuracy)},"
            f"{_fmt(rec.ema_accuracy)},{rec.bytes_down},{rec.bytes_up}\n")


def _targets_report(records, targets, total_rounds: int) -> dict:
    """First evaluated round whose smoothed accuracy reaches each target,
    rendered as an int, or "<rounds>+" when never reached (recomputable by
    scanning the ema_accuracy column of rounds.csv)."""
    report = {}
    smoothed = [r.ema_accuracy for r in records]
    for t in targets:
        hit = rounds_to_target(smoothed, t, max(len(smoothed), 1))
        if isinstance(hit, Saturated):
            report[_fmt(t)] = str(Saturated(total_rounds))
        else:
            report[_fmt(t)] = records[hit - 1].round
    return report


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _execute(cfg: dict, out_dir: Path, threads: int) -> tuple[int, object]:
    """Run one resolved config into ``out_dir``; returns (exit status,
    RunResult or None). Writes rounds.csv incrementally so an aborted run
    keeps the rounds finished before the failure."""
    digest = config_hash(cfg)
    train, test, meta = build_dataset(cfg)
    rc = build_run_config(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    manifest = {
        "tool_version": __version__,
        "config_hash": digest,
        "config": cfg,
        "data_meta": meta,
        "threads": threads,
        "started_at": started,
        "output_paths": ["rounds.csv", "summary.json", "manifest.json"],
    }
    rounds_path = out_dir / "rounds.csv"
    with rounds_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER)
        try:
            result = run(rc, train, test, threads=threads,
                         on_record=lambda rec: (fh.write(_csv_row(rec)), fh.flush()))
        except NumericError as exc:
            manifest.update(finished_at=_now(), status="numeric_abort",
                            error=str(exc))
            _write_json(out_dir / "manifest.json", manifest)
            print(f"error: {exc}", file=sys.stderr)
            return 3, None

    records = result.records
    summary = {
        "algorithm": cfg["algorithm"],
        "config_hash": digest,
        "evaluated_rounds": len(records),
        "final": None if not records else {
            "round": records[-1].round,
            "train_loss": records[-1].train_loss,
            "test_accuracy": records[-1].test_accuracy,
            "ema_accuracy": records[-1].ema_accuracy,
        },
        "totals": {
            "bytes_down": sum(r.bytes_down for r in records),
            "bytes_up": sum(r.bytes_up for r in records),
        },
        "rounds_to_target": _targets_report(records, rc.targets, cfg["rounds"]),
    }
    if cfg["algorithm"] == "fedagm":
        summary["max_momentum_residual"] = result.max_momentum_residual
    _write_json(out_dir / "summary.json", summary)
    manifest.update(finished_at=_now(), status="ok")
    _write_json(out_dir / "manifest.json", manifest)
    return 0, result


def cmd_run(args) -> int:
    cfg = resolve_config(args.config, args.overrides, args.seed)
    out_dir = Path(args.out)
    status, result = _execute(cfg, out_dir, args.threads)
    if status == 0:
        print(f"run complete: {len(result.records)} evaluated rounds "
              f"written to {out_dir}")
    return status


def _unique_labels(paths: list[str]) -> list[str]:
    labels, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        seen[stem] = seen.get(stem, 0) + 1
        labels.append(stem if seen[stem] == 1 else f"{stem}#{seen[stem]}")
    return labels


def cmd_compare(args) -> int:
    configs = [resolve_config(p, args.overrides, args.seed) for p in args.configs]
    if len(configs) < 2:
        raise ConfigError("compare needs at least two --config files")
    shared0 = {k: v for k, v in configs[0].items() if k not in _COMPARE_FREE_KEYS}
    for path, cfg in zip(args.configs[1:], configs[1:]):
        shared = {k: v for k, v in cfg.items() if k not in _COMPARE_FREE_KEYS}
        if shared != shared0:
            raise ConfigError("compare configs may differ only in algorithm and "
                              f"hyperparameters; {path} changes the data/model/"
                              f"schedule relative to {args.configs[0]}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = _unique_labels(args.configs)
    total_rounds = configs[0]["rounds"]
    mid_round = max(1, total_rounds // 2)
    targets = [float(t) for t in configs[0]["targets"]]

    rows = []
    for label, cfg in zip(labels, configs):
        status, result = _execute(cfg, out_dir / label, args.threads)
        if status != 0:
            return status
        records = result.records
        curve = out_dir / f"{label}_curve.csv"
        with curve.open("w", encoding="utf-8", newline="") as fh:
            fh.write("round,ema_accuracy\n")
            for rec in records:
                fh.write(f"{rec.round},{_fmt(rec.ema_accuracy)}\n")
        at_mid = next((r.ema_accuracy for r in reversed(records)
                       if r.round <= mid_round), float("nan"))
        at_end = records[-1].ema_accuracy if records else float("nan")
        report = _targets_report(records, targets, total_rounds)
        rows.append([label, cfg["algorithm"], _fmt(at_mid), _fmt(at_end)]
                    + [str(report[_fmt(t)]) for t in targets])

    header = (["label", "algorithm", f"ema_acc_round_{mid_round}",
               f"ema_acc_round_{total_rounds}"]
              + [f"rounds_to_{_fmt(t)}" for t in targets])
    with (out_dir / "comparison.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    print(f"comparison of {len(rows)} runs written to {out_dir}")
    return 0


def _resolve_threads(flag: int | None) -> int:
    if flag is None:
        env = os.environ.get("FEDSIM_THREADS", "").strip()
        if not env:
            return 1
        try:
            flag = int(env)
        except ValueError:
            raise ConfigError(f"FEDSIM_THREADS must be an integer, got {env!r}") \
                from None
    if flag < 1:
        raise ConfigError("--threads must be a positive integer")
    return flag


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Federated-optimization simulator: accelerated global "
                    "momentum plus six averaging baselines on small models.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, multi_config: bool):
        if multi_config:
            p.add_argument("--config", action="append", required=True,
                           dest="configs", metavar="PATH",
                           help="config file; repeat once per run")
        else:
            p.add_argument("--config", required=True, metavar="PATH",
                           help="JSON config file")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE",
                       help="override a resolved config key (dotted path, "
                            "repeatable)")
        p.add_argument("--threads", type=int, default=None, metavar="N",
                       help="client worker threads (default: $FEDSIM_THREADS or 1)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p_run = sub.add_parser("run", help="execute one config and write "
                                       "rounds.csv/summary.json/manifest.json")
    common(p_run, multi_config=False)
    p_run.add_argument("--out", default="fedsim_out", metavar="DIR",
                       help="output directory (default: fedsim_out)")

    p_cmp = sub.add_parser("compare", help="run several configs on the same "
                                           "data and tabulate them")
    common(p_cmp, multi_config=True)
    p_cmp.add_argument("--out", default="fedsim_compare", metavar="DIR",
                       help="output directory (default: fedsim_compare)")

    p_self = sub.add_parser("selftest", help="run the fast invariant suite")
    p_self.add_argument("--perturb-lambda-sign", action="store_true",
                        help="flip the momentum sign inside the recurrence "
                             "check; a healthy build must then FAIL it")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "selftest":
            return run_selftest(perturb_lambda_sign=args.perturb_lambda_sign)
        args.threads = _resolve_threads(args.threads)
        if args.verb == "run":
            return cmd_run(args)
        return cmd_compare(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
