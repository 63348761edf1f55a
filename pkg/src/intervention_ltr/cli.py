"""Command-line entry point: ``run``, ``simulate``, ``evaluate`` and ``schedule``.

Exit codes: 0 on success, 1 when a command fails at runtime, 2 on a usage or
configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import types
import typing
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, TextIO

import numpy as np

from . import __version__
from .clicksim import BiasParams, read_log, simulate_log, write_log
from .estimators import DeltaKind, ExposureStats, accumulate_exposure, estimate_reward
from .experiment import (
    DatasetConfig,
    ExperimentConfig,
    format_results,
    format_summary,
    intervention_schedule,
    run_experiment,
    summarize,
)
from .metrics import true_reward
from .optimizer import OptimizerConfig, SupervisedConfig, supervised_bootstrap
from .policy import load_policy, save_policy

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

OUT_ENV = "INTERVENTION_LTR_OUT"
DEFAULT_OUT = "results"
MANIFEST_NAME = "manifest.json"
RESULTS_NAME = "results.csv"
SUMMARY_NAME = "summary.csv"

logger = logging.getLogger("intervention_ltr")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config (de)serialization. The TOML layout mirrors the dataclasses: scalar
# experiment fields at top level, one table per nested config.

_SECTIONS = {
    "dataset": DatasetConfig,
    "bias": BiasParams,
    "optimizer": OptimizerConfig,
    "bootstrap": SupervisedConfig,
}


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        return tuple(_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {type(value).__name__}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {type(value).__name__}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {type(value).__name__}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {type(value).__name__}")
        return value
    if hint is DeltaKind:
        try:
            return DeltaKind(value)
        except ValueError:
            choices = ", ".join(k.value for k in DeltaKind)
            raise ConfigError(key, f"unknown estimator {value!r} (choose from {choices})") from None
    raise TypeError(f"unsupported config type {hint!r}")  # pragma: no cover


def _build(cls, table: Mapping[str, Any], prefix: str, nested: Mapping[str, Any] = {}):
    if not isinstance(table, Mapping):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        path = prefix + key
        if key not in names:
            raise ConfigError(path, "unknown key")
        if key in nested:
            kwargs[key] = nested[key]
        else:
            kwargs[key] = _coerce(value, hints[key], path)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(_blame(str(exc), names, prefix), str(exc)) from None


def _blame(message: str, names, prefix: str) -> str:
    """Best guess of the key an invariant violation refers to."""
    hits = [n for n in names if n in message]
    return prefix + max(hits, key=len) if hits else (prefix.rstrip(".") or "<root>")


def config_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("<root>", "expected a table")
    nested = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            nested[name] = _build(cls, raw[name], f"{name}.")
    return _build(ExperimentConfig, raw, "", nested)


def parse_config(source: str | os.PathLike | TextIO) -> ExperimentConfig:
    """Read and validate a TOML experiment config; any problem raises ConfigError naming the key."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {source}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<syntax>", str(exc)) from None
    return config_from_dict(raw)


def _plain(value: Any) -> Any:
    if isinstance(value, DeltaKind):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Snapshot that ``config_from_dict`` maps back to an equal config (None entries dropped)."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = {
                g.name: _plain(getattr(value, g.name))
                for g in dataclasses.fields(value)
                if getattr(value, g.name) is not None
            }
        elif value is not None:
            out[f.name] = _plain(value)
    return out


def preset_path(name: str) -> Path:
    path = resources.files("intervention_ltr") / "presets" / f"{name}.toml"
    if not path.is_file():
        raise UsageError(f"unknown preset {name!r}")
    return Path(str(path))


# ---------------------------------------------------------------------------
# Output handling: every file is written to a temporary sibling and renamed,
# and everything this invocation produced is removed again on failure.


class _Outputs:
    def __init__(self):
        self.written: list[Path] = []

    def write(self, path: Path, text: str) -> None:
        self.written.append(path)
        tmp = path.with_name(path.name + ".partial")
        tmp.write_text(text)
        os.replace(tmp, path)

    def track(self, path: Path) -> None:
        self.written.append(path)

    def rollback(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)
            p.with_name(p.name + ".partial").unlink(missing_ok=True)


def _output_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _dataset_from_dir(path: str, base: DatasetConfig) -> DatasetConfig:
    d = Path(path)
    names = {"train": ("train.txt",), "validation": ("vali.txt", "validation.txt"), "test": ("test.txt",)}
    found = {}
    for part, candidates in names.items():
        hit = next((d / c for c in candidates if (d / c).is_file()), None)
        if hit is None:
            raise UsageError(f"--dataset {path}: no {' or '.join(candidates)} found")
        found[part] = str(hit)
    return replace(base, train_path=found["train"], validation_path=found["validation"], test_path=found["test"])


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "replay", None):
        manifest = json.loads(Path(args.replay).read_text())
        cfg = config_from_dict(manifest["config"])
    elif args.config and args.preset:
        raise UsageError("--config and --preset are mutually exclusive")
    elif args.config:
        cfg = parse_config(args.config)
    elif args.preset:
        cfg = parse_config(preset_path(args.preset))
    else:
        cfg = ExperimentConfig()
    changes: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "T", None) is not None:
        changes["T"] = args.T
        if cfg.eval_points is not None and args.T >= 1:
            # Eval points beyond the new horizon are dropped; the horizon itself is always evaluated.
            changes["eval_points"] = tuple(p for p in cfg.eval_points if p < args.T) + (args.T,)
    if getattr(args, "m", None) is not None:
        changes["n_interventions"] = args.m
    if getattr(args, "kind", None) is not None:
        changes["kind"] = args.kind
    if getattr(args, "n_runs", None) is not None:
        changes["n_runs"] = args.n_runs
    if getattr(args, "dataset", None):
        changes["dataset"] = _dataset_from_dir(args.dataset, cfg.dataset)
    if changes:
        try:
            cfg = replace(cfg, **changes)
        except ValueError as exc:
            raise ConfigError(_blame(str(exc), {f.name for f in dataclasses.fields(cfg)}, ""), str(exc)) from None
    return cfg


def run_seeds(cfg: ExperimentConfig) -> list[int]:
    """Entropy of each run's seed sequence, recorded in the manifest for inspection."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_runs)]


def _cmd_run(args, outputs: _Outputs) -> None:
    cfg = _load_config(args)
    out = _output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "intervention-ltr-manifest",
        "code_version": __version__,
        "config": config_to_dict(cfg),
        "seeds": {"master": cfg.seed, "runs": run_seeds(cfg)},
        "outputs": {"results": RESULTS_NAME, "summary": SUMMARY_NAME},
    }
    outputs.write(out / MANIFEST_NAME, json.dumps(manifest, indent=2) + "\n")
    series = run_experiment(cfg, parallel=args.parallel)
    outputs.write(out / RESULTS_NAME, format_results(series))
    if len(series) >= 2:
        outputs.write(out / SUMMARY_NAME, format_summary(summarize(series, args.confidence)))
    else:
        logger.warning("single run: summary.csv needs at least two runs and was not written")
    print(out)


def _cmd_simulate(args, outputs: _Outputs) -> None:
    cfg = _load_config(args)
    data = cfg.dataset.load()
    pool = data.logging_pool()
    ss = np.random.SeedSequence(cfg.seed)
    boot_seed, click_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    if args.policy:
        policy = load_policy(args.policy)
    else:
        policy = supervised_bootstrap(cfg.bootstrap_fraction, data.train, replace(cfg.bootstrap, seed=boot_seed))
    log = simulate_log(policy, pool, cfg.bias, cfg.T, np.random.default_rng(click_seed))
    out = _output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "log.txt.partial"
    outputs.track(out / "log.txt")
    write_log(log, tmp)
    os.replace(tmp, out / "log.txt")
    tmp = out / "logging_policy.json.partial"
    outputs.track(out / "logging_policy.json")
    save_policy(policy, tmp)
    os.replace(tmp, out / "logging_policy.json")
    print(out / "log.txt")


def _cmd_evaluate(args, outputs: _Outputs) -> None:
    cfg = _load_config(args)
    data = cfg.dataset.load()
    pool = data.logging_pool()
    log = read_log(args.log)
    if not log:
        raise ValueError(f"{args.log} holds no interactions")
    loggers = [load_policy(p) for p in args.logging_policy]
    lengths: dict[int, int] = {}
    for e in log:
        lengths[e.segment_id] = lengths.get(e.segment_id, 0) + 1
    if sorted(lengths) != list(range(len(loggers))):
        raise UsageError(
            f"log has segments {sorted(lengths)} but {len(loggers)} --logging-policy checkpoint(s) were given"
        )
    rng = np.random.default_rng(cfg.seed)
    stats = ExposureStats()
    for seg, pol in enumerate(loggers):
        stats = accumulate_exposure(stats, pol, lengths[seg], cfg.bias, pool, n_samples=cfg.marginal_samples, rng=rng)
    policy = load_policy(args.policy)
    kw = dict(n_samples=cfg.eval_samples, rng=np.random.default_rng(cfg.seed + 1))
    est = estimate_reward(policy, log, stats, cfg.kind, args.clip, bias=cfg.bias, corpus=pool, **kw)
    truth = true_reward(policy, pool, **kw)
    print(json.dumps({"kind": cfg.kind.value, "clipped": args.clip, "estimated_reward": est, "true_reward": truth}))


def _cmd_schedule(args, outputs: _Outputs) -> None:
    try:
        phi = intervention_schedule(args.m, args.T, args.t_min)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(" ".join(str(p) for p in phi))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="intervention-ltr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="{run,simulate,evaluate,schedule}")

    def config_flags(sp, overrides=True):
        sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--preset", help="name of a shipped preset config (e.g. paper, desk)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--dataset", help="directory with train.txt, vali.txt and test.txt")
        if overrides:
            sp.add_argument("--T", type=int, help="total number of logged interactions")
            sp.add_argument("--m", type=int, help="number of interventions")
            sp.add_argument("--kind", choices=[k.value for k in DeltaKind], help="estimator")

    run = sub.add_parser("run", help="run the full experiment and write CSVs plus a manifest")
    config_flags(run)
    run.add_argument("--replay", help="manifest.json of an earlier run to reproduce")
    run.add_argument("--n-runs", dest="n_runs", type=int)
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    run.add_argument("--parallel", type=int, default=1, help="concurrent independent runs")
    run.add_argument("--confidence", type=float, default=0.9)
    run.set_defaults(func=_cmd_run)

    sim = sub.add_parser("simulate", help="log T interactions of the production ranker (or a checkpoint)")
    config_flags(sim)
    sim.add_argument("--policy", help="policy checkpoint to log with instead of the production ranker")
    sim.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    sim.set_defaults(func=_cmd_simulate)

    ev = sub.add_parser("evaluate", help="estimated and true reward of a checkpoint against a log")
    config_flags(ev)
    ev.add_argument("--log", required=True)
    ev.add_argument("--policy", required=True, help="checkpoint to evaluate")
    ev.add_argument(
        "--logging-policy", action="append", required=True,
        help="checkpoint of the policy that logged segment i; repeat in segment order",
    )
    ev.add_argument("--clip", action="store_true", help="floor denominators at 10/sqrt(T)")
    ev.set_defaults(func=_cmd_evaluate)

    sc = sub.add_parser("schedule", help="print the intervention timesteps")
    sc.add_argument("--m", type=int, required=True)
    sc.add_argument("--T", type=int, required=True)
    sc.add_argument("--t-min", dest="t_min", type=int, default=100)
    sc.set_defaults(func=_cmd_schedule)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    outputs = _Outputs()
    try:
        args.func(args, outputs)
    except (UsageError, ConfigError) as exc:
        outputs.rollback()
        print(f"intervention-ltr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        outputs.rollback()
        return 1
    except Exception as exc:
        outputs.rollback()
        print(f"intervention-ltr {args.command}: error: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
