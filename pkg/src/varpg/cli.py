"""Command-line entry point: ``varpg run|verify|summarize``.

Run configs are INI files with four sections::

    [run]      name, algorithm (reinforce|ppo), seeds, output_dir, log_every, eval_mode
    [metric]   kind, alpha, lambda, qmethod
    [trainer]  iterations, batch_size, inner_updates, lr_policy, lr_value, gamma,
               is_clip, ppo_clip, gae_lambda, optimizer, value_minibatch
    [env]      map (default | corridor | path to an ASCII map), noise, max_steps

Relative map paths resolve against the config file's directory. The output
root (``[run] output_dir``, relative to the working directory) can be
overridden with VARPG_OUTPUT_ROOT.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import InvalidInputError, MapError
from .risk_metrics import Metric, MetricKind, QuantileMethod
from .softmax_policy import PolicyParams, ValueParams, save_params
from .tabular_env import (
    CORRIDOR_MAP,
    DEFAULT_MAP,
    GridMaze,
    NoiseKind,
    NoiseSpec,
    parse_map,
    risk_averse_rate,
    rollout_batch,
)
from .trainers import TrainConfig, train_ppo_variability, train_reinforce_variability

log = logging.getLogger("varpg")

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "seed", "iteration", "metric", "return_mean", "risk_averse_rate", "variability",
    "grad_variance", "mean_grad_norm", "variability_grad_norm", "degenerate", "wall_clock",
)
OUTPUT_ROOT_ENV = "VARPG_OUTPUT_ROOT"
BUILTIN_MAPS = {"default": DEFAULT_MAP, "corridor": CORRIDOR_MAP}
SUMMARY_WINDOW = 100

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, message, section=None, key=None, line=None):
        where = ""
        if section:
            where = f"[{section}]" + (f" {key}" if key else "")
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    name: str = "run"
    algorithm: str = "reinforce"
    map: str = "default"
    noise: NoiseKind = NoiseKind.GAUSSIAN
    max_steps: int = 100
    seeds: tuple = (0,)
    output_dir: str = "runs"
    log_every: int = 1
    eval_mode: str = "train"  # or "greedy"
    base_dir: str = field(default=".", compare=False)

    def map_text(self) -> str:
        if self.map in BUILTIN_MAPS:
            return BUILTIN_MAPS[self.map]
        path = Path(self.map)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        return path.read_text(encoding="utf-8")

    def build_env(self) -> GridMaze:
        return parse_map(self.map_text(), gamma=self.train.gamma, max_steps=self.max_steps,
                         noise=NoiseSpec(self.noise))


def _line_of(text: str, section: str, key: Optional[str]) -> Optional[int]:
    cur = None
    for i, raw in enumerate(text.splitlines(), 1):
        ln = raw.strip()
        if ln.startswith("[") and ln.endswith("]"):
            cur = ln[1:-1].strip()
            if key is None and cur == section:
                return i
        elif cur == section and key is not None:
            k = ln.split("=", 1)[0].split(":", 1)[0].strip()
            if k == key:
                return i
    return None


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None

    known = {
        "run": {"name", "algorithm", "seeds", "output_dir", "log_every", "eval_mode"},
        "metric": {"kind", "alpha", "lambda", "qmethod"},
        "trainer": {"iterations", "batch_size", "inner_updates", "lr_policy", "lr_value", "gamma",
                    "is_clip", "ppo_clip", "gae_lambda", "optimizer", "value_minibatch"},
        "env": {"map", "noise", "max_steps"},
    }
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError("unknown section", sec, line=_line_of(text, sec, None))
        for key in cp[sec]:
            if key not in known[sec]:
                raise ConfigError("unknown key", sec, key, _line_of(text, sec, key))

    def get(sec, key, conv, default=None, required=False):
        if not cp.has_option(sec, key) or cp.get(sec, key).strip() == "":
            if required:
                raise ConfigError("missing required key", sec, key, _line_of(text, sec, None))
            return default
        raw = cp.get(sec, key).strip()
        try:
            return conv(raw)
        except (ValueError, InvalidInputError) as exc:
            raise ConfigError(f"bad value {raw!r} ({exc})", sec, key, _line_of(text, sec, key)) from None

    def seeds_of(raw):
        vals = tuple(int(s) for s in raw.replace(",", " ").split())
        if not vals:
            raise ValueError("no seeds")
        if len(set(vals)) != len(vals):
            raise ValueError("seeds must be distinct")
        return vals

    def choice(*opts):
        def conv(raw):
            if raw not in opts:
                raise ValueError(f"expected one of {', '.join(opts)}")
            return raw
        return conv

    kind = get("metric", "kind", Metric, required=True)
    alpha = get("metric", "alpha", float)
    try:
        mk = MetricKind(kind, alpha) if alpha is not None else MetricKind.default(kind)
    except InvalidInputError as exc:
        raise ConfigError(str(exc), "metric", "alpha", _line_of(text, "metric", "alpha")) from None
    lam = get("metric", "lambda", float, 0.0)
    if not (lam >= 0 and np.isfinite(lam)):
        raise ConfigError(f"lambda must be non-negative, got {lam}", "metric", "lambda",
                          _line_of(text, "metric", "lambda"))
    tkw = dict(
        metric=mk, lam=lam, qmethod=get("metric", "qmethod", QuantileMethod, QuantileMethod.LINEAR),
        iterations=get("trainer", "iterations", int, 3000),
        batch_size=get("trainer", "batch_size", int, 50),
        inner_updates=get("trainer", "inner_updates", int, 1),
        lr_policy=get("trainer", "lr_policy", float, 1e-3),
        lr_value=get("trainer", "lr_value", float, None),
        gamma=get("trainer", "gamma", float, 0.999),
        is_clip=get("trainer", "is_clip", float, 10.0),
        ppo_clip=get("trainer", "ppo_clip", float, 0.2),
        gae_lambda=get("trainer", "gae_lambda", float, 0.95),
        optimizer=get("trainer", "optimizer", choice("sgd", "adam"), "sgd"),
        value_minibatch=get("trainer", "value_minibatch", int, 64),
    )
    try:
        train = TrainConfig(**tkw)
    except InvalidInputError as exc:
        raise ConfigError(str(exc), "trainer") from None

    cfg = RunConfig(
        train=train,
        name=get("run", "name", str, "run"),
        algorithm=get("run", "algorithm", choice("reinforce", "ppo"), "reinforce"),
        seeds=get("run", "seeds", seeds_of, (0,)),
        output_dir=get("run", "output_dir", str, "runs"),
        log_every=get("run", "log_every", int, 1),
        eval_mode=get("run", "eval_mode", choice("train", "greedy"), "train"),
        map=get("env", "map", str, "default"),
        noise=get("env", "noise", NoiseKind, NoiseKind.GAUSSIAN),
        max_steps=get("env", "max_steps", int, 100),
        base_dir=str(base_dir),
    )
    if cfg.log_every < 1:
        raise ConfigError("log_every must be at least 1", "run", "log_every",
                          _line_of(text, "run", "log_every"))
    if cfg.max_steps < 1:
        raise ConfigError("max_steps must be at least 1", "env", "max_steps",
                          _line_of(text, "env", "max_steps"))
    if cfg.map not in BUILTIN_MAPS:
        path = Path(cfg.map) if Path(cfg.map).is_absolute() else Path(base_dir) / cfg.map
        if not path.is_file():
            raise ConfigError(f"map file not found: {path}", "env", "map", _line_of(text, "env", "map"))
    try:
        cfg.build_env()
    except MapError as exc:
        raise ConfigError(f"invalid map: {exc}", "env", "map", _line_of(text, "env", "map")) from None
    return cfg


def _fmt(x) -> str:
    return repr(float(x))


def serialize_config(cfg: RunConfig) -> str:
    t = cfg.train
    lines = [
        "[run]",
        f"name = {cfg.name}",
        f"algorithm = {cfg.algorithm}",
        "seeds = " + ", ".join(str(s) for s in cfg.seeds),
        f"output_dir = {cfg.output_dir}",
        f"log_every = {cfg.log_every}",
        f"eval_mode = {cfg.eval_mode}",
        "",
        "[metric]",
        f"kind = {t.metric.kind.value}",
    ]
    if t.metric.alpha is not None:
        lines.append(f"alpha = {_fmt(t.metric.alpha)}")
    lines += [
        f"lambda = {_fmt(t.lam)}",
        f"qmethod = {t.qmethod.value}",
        "",
        "[trainer]",
        f"iterations = {t.iterations}",
        f"batch_size = {t.batch_size}",
        f"inner_updates = {t.inner_updates}",
        f"lr_policy = {_fmt(t.lr_policy)}",
    ]
    if t.lr_value is not None:
        lines.append(f"lr_value = {_fmt(t.lr_value)}")
    lines += [
        f"gamma = {_fmt(t.gamma)}",
        f"is_clip = {_fmt(t.is_clip)}",
        f"ppo_clip = {_fmt(t.ppo_clip)}",
        f"gae_lambda = {_fmt(t.gae_lambda)}",
        f"optimizer = {t.optimizer}",
        f"value_minibatch = {t.value_minibatch}",
        "",
        "[env]",
        f"map = {cfg.map}",
        f"noise = {cfg.noise.value}",
        f"max_steps = {cfg.max_steps}",
        "",
    ]
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), base_dir=str(path.parent))


# -- run ----------------------------------------------------------------------------


def greedy_risk_averse_rate(env: GridMaze, policy: PolicyParams, n: int, rng) -> float:
    """Risk-averse rate of the argmax policy (evaluation mode)."""
    table = np.zeros((env.n_states, env.n_actions))
    table[np.arange(env.n_states), policy.probs_table().argmax(axis=1)] = 1.0
    return risk_averse_rate(rollout_batch(env, table, n, rng))


def _run_seed(cfg: RunConfig, seed: int, out_dir: Path) -> dict:
    env = cfg.build_env()
    train = replace(cfg.train, seed=seed)
    policy = PolicyParams.zeros(env.n_states, env.n_actions)
    value = ValueParams.zeros(env.n_states)
    loop = train_ppo_variability if cfg.algorithm == "ppo" else train_reinforce_variability
    partial = out_dir / f"seed_{seed}.csv.partial"
    final = out_dir / f"seed_{seed}.csv"
    eval_rng = np.random.default_rng([seed, 1])
    t0 = time.perf_counter()
    rows = 0
    with open(partial, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in loop(env, policy, value, train):
            if rec.iteration % cfg.log_every and rec.iteration != train.iterations - 1:
                continue
            rate = rec.risk_averse_rate
            if cfg.eval_mode == "greedy":
                rate = greedy_risk_averse_rate(env, policy, train.batch_size, eval_rng)
            w.writerow([seed, rec.iteration, str(train.metric), _fmt(rec.return_mean), _fmt(rate),
                        _fmt(rec.variability), _fmt(rec.grad_variance), _fmt(rec.mean_grad_norm),
                        _fmt(rec.variability_grad_norm), int(rec.degenerate),
                        f"{rec.wall_clock:.6f}"])
            rows += 1
    os.replace(partial, final)
    save_params(out_dir / f"policy_seed_{seed}.txt", policy)
    return {"rows": rows, "wall_clock": time.perf_counter() - t0}


def output_dir_for(cfg: RunConfig) -> Path:
    """<root>/<name>; the root is VARPG_OUTPUT_ROOT if set, else ``output_dir``
    (relative paths resolve against the working directory)."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir) / cfg.name


def bundled_config_path(name: str) -> Optional[Path]:
    path = Path(__file__).parent / "configs" / f"{name}.ini"
    return path if path.is_file() else None


def run_experiment(config_path) -> int:
    """Train every seed; a bare name such as ``maze_gaussian_ginidev`` selects a
    bundled config."""
    if not Path(config_path).exists() and bundled_config_path(str(config_path)):
        config_path = bundled_config_path(str(config_path))
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = output_dir_for(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = serialize_config(cfg)
    (out_dir / "config.ini").write_text(text, encoding="utf-8")
    config_hash = hashlib.sha256(text.encode()).hexdigest()
    ok = 0
    with open(out_dir / "manifest.jsonl", "a", encoding="utf-8") as man:
        for seed in cfg.seeds:
            entry = {
                "name": cfg.name, "seed": seed, "config_hash": config_hash,
                "csv_schema_version": CSV_SCHEMA_VERSION, "varpg_version": __version__,
                "numpy_version": np.__version__, "python_version": platform.python_version(),
            }
            try:
                entry.update(_run_seed(cfg, seed, out_dir))
                entry["status"] = "finished"
                ok += 1
            except (ArithmeticError, ValueError, FloatingPointError) as exc:
                log.error("seed %s failed: %s", seed, exc)
                entry.update(status="failed", error=str(exc))
            man.write(json.dumps(entry, sort_keys=True) + "\n")
            man.flush()
    return EXIT_OK if ok else EXIT_FAILED


# -- summarize ------------------------------------------------------------------------


@dataclass
class SummaryRow:
    metric: str
    seeds: int
    failed: int
    return_last: float
    risk_averse_last: float


def summarize_dir(run_dir) -> List[SummaryRow]:
    """Per-metric means over seeds of the last-window averages, from CSVs only."""
    run_dir = Path(run_dir)
    finished = sorted(run_dir.rglob("seed_*.csv"))
    failed = sorted(run_dir.rglob("seed_*.csv.partial"))
    per_metric: dict = {}
    fails: dict = {}
    for path in failed:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        key = rows[0]["metric"] if rows else "unknown"
        fails[key] = fails.get(key, 0) + 1
    for path in finished:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        tail = rows[-SUMMARY_WINDOW:]
        ret = float(np.mean([float(r["return_mean"]) for r in tail]))
        rate = float(np.mean([float(r["risk_averse_rate"]) for r in tail]))
        per_metric.setdefault(rows[0]["metric"], []).append((ret, rate))
    out = []
    for metric in sorted(set(per_metric) | set(fails)):
        vals = per_metric.get(metric, [])
        arr = np.array(vals) if vals else np.full((1, 2), np.nan)
        out.append(SummaryRow(metric, len(vals), fails.get(metric, 0),
                              float(arr[:, 0].mean()), float(arr[:, 1].mean())))
    return out


def format_summary(rows: Sequence[SummaryRow]) -> str:
    lines = ["metric,seeds,failed,return_last100,risk_averse_last100"]
    for r in rows:
        lines.append(f"{r.metric},{r.seeds},{r.failed},{r.return_last:.4f},{r.risk_averse_last:.4f}")
    return "\n".join(lines) + "\n"


def emit_summary(run_dir) -> int:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        print(f"not a directory: {run_dir}", file=sys.stderr)
        return EXIT_FAILED
    rows = summarize_dir(run_dir)
    if not rows:
        print(f"no run CSVs under {run_dir}", file=sys.stderr)
        return EXIT_FAILED
    nfail = sum(r.failed for r in rows)
    if nfail:
        print(f"warning: {nfail} failed seed(s) excluded", file=sys.stderr)
    sys.stdout.write(format_summary(rows))
    return EXIT_OK


# -- verify -------------------------------------------------------------------------


def verify(suite: str) -> int:
    from .verification import SUITES, run_suite

    if suite != "all" and suite not in SUITES:
        print(f"unknown suite {suite!r}; choose from {', '.join(list(SUITES) + ['all'])}",
              file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    checks = run_suite(suite)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.suite:<11} {c.name:<{width}}  {c.detail}")
    print(json.dumps({"suite": suite, "seconds": round(time.perf_counter() - t0, 1),
                      "passed": all(c.passed for c in checks),
                      "checks": [c.as_dict() for c in checks]}))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAILED


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="varpg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train every seed of a config")
    p.add_argument("config")
    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("suite", help="estimators, coherence, oracle or all")
    p = sub.add_parser("summarize", help="summarize run CSVs under a directory")
    p.add_argument("run_dir")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return run_experiment(args.config)
    if args.command == "verify":
        return verify(args.suite)
    return emit_summary(args.run_dir)


if __name__ == "__main__":
    sys.exit(main())
