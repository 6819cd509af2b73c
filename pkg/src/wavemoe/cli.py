"""``wavemoe`` command line: preprocess, train, evaluate, forecast, inspect.

Configuration files are INI-style with ``[model]`` and ``[train]`` sections
whose keys are the fields of ``ModelConfig`` and ``TrainConfig``.  Values are
layered as profile defaults, then the config file, then ``--set`` overrides
and explicit flags.  The resolved ``RunConfig`` is written as
``run_config.json`` next to each command's output.

Exit codes: 0 success, 2 usage, 3 data/format, 4 numeric divergence, 5 I/O.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .exceptions import (
    AlignmentError,
    ConfigError,
    ConfigMismatchError,
    ContractError,
    DegenerateWindowError,
    EmptyCorpusError,
    FormatError,
    IngestionError,
    InsufficientContextError,
    InvalidLengthError,
    MalformedPyramidError,
    NumericError,
    UnsupportedWaveletError,
)
from .model import TINY_CONFIG, ModelConfig

log = logging.getLogger("wavemoe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

PROFILES = {
    "base": {"model": {}, "train": {}},
    "tiny": {
        "model": dict(TINY_CONFIG),
        "train": dict(base_lr=1e-3, batch_size=32, total_steps=2000, warmup_ratio=0.05,
                      seq_len=640, log_interval=100, checkpoint_interval=500),
    },
}

_USAGE_ERRORS = (ConfigError, AlignmentError, ContractError, UnsupportedWaveletError, InvalidLengthError)
_DATA_ERRORS = (IngestionError, EmptyCorpusError, FormatError, ConfigMismatchError,
                DegenerateWindowError, InsufficientContextError, MalformedPyramidError)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int
    output: str | None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    workers: int = 1
    version: str = __version__

    def write(self, directory) -> Path:
        path = Path(directory) / "run_config.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# -- config files -------------------------------------------------------------

def _coerce(raw: str, annotation, key: str):
    text = raw.strip()
    args = typing.get_args(annotation)
    if type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        annotation = next(a for a in args if a is not type(None))
    try:
        if annotation is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {annotation.__name__}") from None
    return text


def _parse_section(cls, items: dict, section: str) -> dict:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    out = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        out[key] = _coerce(raw, hints[key], f"{section}.{key}")
    return out


def load_config_file(path) -> dict:
    """Parse an INI file into ``{"model": {...}, "train": {...}}``."""
    from .train import TrainConfig

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    extra = set(parser.sections()) - {"model", "train"}
    if extra:
        raise ConfigError(f"{path}: unknown sections {sorted(extra)}")
    return {
        "model": _parse_section(ModelConfig, dict(parser["model"]) if parser.has_section("model") else {}, "model"),
        "train": _parse_section(TrainConfig, dict(parser["train"]) if parser.has_section("train") else {}, "train"),
    }


def resolve_configs(profile: str, config_path=None, overrides=(), seed=None):
    from .train import TrainConfig

    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    layers = {k: dict(v) for k, v in PROFILES[profile].items()}
    if config_path is not None:
        for section, values in load_config_file(config_path).items():
            layers[section].update(values)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in ("model", "train"):
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        cls = ModelConfig if section == "model" else TrainConfig
        layers[section].update(_parse_section(cls, {name: value}, section))
    if seed is not None:
        layers["model"]["seed"] = seed
        layers["train"]["seed"] = seed
    return ModelConfig(**layers["model"]), TrainConfig(**layers["train"])


# -- commands -----------------------------------------------------------------

def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def cmd_preprocess(args) -> int:
    from .data import build_windows, ingest_dir, write_corpus

    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input directory not found: {src}")
    series = list(ingest_dir(src, args.format, id_column=args.id_column,
                             domain_column=args.domain_column))
    if not series:
        raise DataError(f"no series found in {src}")
    windows, stats = build_windows(series, args.window)
    domains = sorted(set(stats.accepted) | set(stats.rejected) | {s.domain for s in series})
    for dom in domains:
        rej = stats.rejected.get(dom, {})
        reasons = ", ".join(f"{r}: {n}" for r, n in sorted(rej.items()))
        print(f"[{dom}] {stats.accepted.get(dom, 0)} accepted, {sum(rej.values())} rejected"
              + (f" ({reasons})" if reasons else ""))
    reasons = ", ".join(f"{r}: {n}" for r, n in sorted(stats.rejected_by_reason().items()))
    print(f"{stats.total_accepted} windows accepted, {stats.total_rejected} rejected"
          + (f" ({reasons})" if reasons else ""))
    if not windows:
        raise DataError("every window was rejected; nothing to write")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = write_corpus(windows, out)
    sidecar = out.with_name(out.name + ".manifest.json")
    sidecar.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    RunConfig("preprocess", seed=0, output=str(out),
              options={"input": str(src), "format": args.format, "window": args.window}
              ).write(out.parent)
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_corpus
    from .train import train_loop

    corpus_path = _require_file(args.corpus, "corpus")
    if args.config is not None:
        _require_file(args.config, "config file")
    mc, tc = resolve_configs(args.profile, args.config, args.set or (), args.seed)
    explicit = {"total_steps": args.steps, "batch_size": args.batch_size,
                "base_lr": args.lr, "seq_len": args.seq_len}
    tc = type(tc)(**{**tc.to_dict(), **{k: v for k, v in explicit.items() if v is not None}})
    corpus = read_corpus(corpus_path)
    state = None
    if args.resume:
        state = load_checkpoint(_require_file(args.resume, "checkpoint"), expected_config=mc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunConfig("train", seed=tc.seed, output=str(out), model=mc.to_dict(), train=tc.to_dict(),
                    options={"corpus": str(corpus_path), "resume": args.resume, "profile": args.profile},
                    workers=torch.get_num_threads())
    run.write(out)
    state = train_loop(corpus, mc, tc, out_dir=out, state=state)
    last = state.history[-1] if state.history else float("nan")
    print(f"trained to step {state.step}; last loss {last:.6f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(path):
    from .checkpoint import load_checkpoint

    state = load_checkpoint(_require_file(path, "checkpoint"))
    state.model.eval()
    return state


def cmd_evaluate(args) -> int:
    from .evalbench import EvalTask, run_benchmark

    state = _load_model(args.model)
    model = state.model
    task = EvalTask("default", args.context, args.horizon)
    task.validate(model.config.patch_length)
    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"data directory not found: {data}")
    if not any(data.glob("*.csv")):
        raise DataError(f"no CSV datasets found in {data}")
    report = run_benchmark(model, data, task, out_dir=args.report, plot_dir=args.plots, fusion=args.fusion)
    if not report.results:
        raise DataError(f"no evaluable series in {data}")
    RunConfig("evaluate", seed=model.config.seed, output=str(args.report), model=model.config.to_dict(),
              options={"checkpoint": str(args.model), "data": str(data), "context": args.context,
                       "horizon": args.horizon, "fusion": args.fusion}).write(args.report)
    print(report.table(), end="")
    return EXIT_OK


def cmd_forecast(args) -> int:
    from .data import ingest
    from .evalbench import plot_forecast, rollout_batch
    from .tokenizer import check_context_alignment

    state = _load_model(args.model)
    model = state.model
    P = model.config.patch_length
    check_context_alignment(args.context, P)
    if args.horizon <= 0 or args.horizon % P:
        raise AlignmentError(f"horizon {args.horizon} is not a positive multiple of patch length {P}")
    path = _require_file(args.series, "series file")
    fmt = "jsonl" if path.suffix == ".jsonl" else "csv"
    series = list(ingest(path, fmt, value_columns=args.column))
    if not series:
        raise DataError(f"no series found in {path}")
    values = series[0].values
    if len(values) < args.context:
        raise InsufficientContextError(f"series has {len(values)} points, context needs {args.context}")
    ctx = values[-args.context:]
    forecast = rollout_batch(model, ctx[None, :], args.horizon, fusion=args.fusion)[0]
    if args.plot:
        try:
            plot_forecast(ctx, None, forecast, args.plot, title=series[0].id)
        except OSError as exc:
            raise OSError(f"cannot write plot {args.plot}: {exc}") from exc
    text = "".join(f"{v:.8g}\n" for v in forecast)
    if args.out:
        Path(args.out).write_text(text)
        RunConfig("forecast", seed=model.config.seed, output=str(args.out), model=model.config.to_dict(),
                  options={"checkpoint": str(args.model), "series": str(path), "horizon": args.horizon,
                           "context": args.context}).write(Path(args.out).parent)
    sys.stdout.write(text)
    return EXIT_OK


def _block_counts(model) -> list[tuple[str, int]]:
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        groups[key] = groups.get(key, 0) + p.numel()
    return list(groups.items())


def routing_stats(model, corpus, max_windows: int = 64, seq_len: int | None = None) -> list[dict]:
    """Per-layer expert selection frequencies and mean router entropy over corpus windows."""
    from .train import assemble_batch

    P = model.config.patch_length
    W = corpus.manifest.window_length
    S = seq_len or min(W, 4096)
    S -= S % (4 * P)
    if S <= 0:
        raise AlignmentError(f"corpus window length {W} too short for patch length {P}")
    n = min(max_windows, len(corpus))
    batch = assemble_batch(corpus.values[:n, :S], corpus.masks[:n, :S], P)
    with torch.no_grad():
        trace = model(batch.time_patches, batch.wavelet_patches)
    out = []
    for layer, info in enumerate(trace.routing):
        E = info.probs.shape[-1]
        counts = torch.bincount(info.expert_ids.reshape(-1), minlength=E).double()
        probs = info.probs.double().clamp_min(1e-30)
        entropy = float(-(probs * probs.log()).sum(-1).mean())
        out.append({"layer": layer, "frequency": (counts / counts.sum()).tolist(), "entropy": entropy,
                    "balance_loss": float(info.balance_loss)})
    return out


def cmd_inspect(args) -> int:
    from .data import read_corpus
    from .model import count_parameters, meta_model, parameter_counts

    if args.model is None and args.config is None and args.profile is None:
        raise UsageError("inspect needs --model or a --config/--profile to describe")
    state = None
    if args.model is not None:
        state = _load_model(args.model)
        model, config = state.model, state.model.config
    else:
        if args.config is not None:
            _require_file(args.config, "config file")
        config, _ = resolve_configs(args.profile or "base", args.config, args.set or ())
        model = meta_model(config)
    print("model config:")
    for k, v in config.to_dict().items():
        print(f"  {k} = {v}")
    if state is not None:
        print(f"step: {state.step}")
    print("parameters per block:")
    for name, n in _block_counts(model):
        print(f"  {name:<16} {n:>14,d}")
    enum = count_parameters(model)
    formula = parameter_counts(config)
    print(f"total parameters:     {enum['total']:>14,d}  ({enum['total'] / 1e6:.1f}M)")
    print(f"activated parameters: {enum['activated']:>14,d}  ({enum['activated'] / 1e6:.1f}M)")
    print(f"shared expert: {'on' if config.use_shared_expert else 'off'}")
    match = enum["total"] == formula["total"] and enum["activated"] == formula["activated"]
    print(f"closed-form count: {'match' if match else 'MISMATCH'}")
    if args.routing_stats:
        if state is None:
            raise UsageError("--routing-stats needs a trained --model")
        corpus = read_corpus(_require_file(args.routing_stats, "corpus"))
        print("routing statistics:")
        for rec in routing_stats(model, corpus, args.max_windows):
            freqs = " ".join(f"{f:.3f}" for f in rec["frequency"])
            print(f"  layer {rec['layer']}: frequency [{freqs}]  gate entropy {rec['entropy']:.4f}")
    return EXIT_OK if match else EXIT_NUMERIC


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavemoe", description="Dual-path wavelet mixture-of-experts forecaster")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="build a binary training corpus")
    s.add_argument("--input", required=True, help="directory of CSV or JSON-lines files")
    s.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int, default=4096)
    s.add_argument("--id-column")
    s.add_argument("--domain-column")
    s.set_defaults(func=cmd_preprocess)

    def model_config_args(s):
        s.add_argument("--config", help="INI file with [model] and [train] sections")
        s.add_argument("--profile", choices=sorted(PROFILES))
        s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    s = sub.add_parser("train", help="train from a corpus")
    s.add_argument("--corpus", required=True)
    model_config_args(s)
    s.set_defaults(profile="base")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seq-len", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="continue from a checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="benchmark a checkpoint on CSV datasets")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--context", type=int, default=512)
    s.add_argument("--horizon", type=int, default=96)
    s.add_argument("--fusion", choices=("time", "average"), default="time")
    s.add_argument("--report", required=True, help="output directory for report.jsonl / report.txt")
    s.add_argument("--plots", help="directory for per-series SVG plots")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("forecast", help="forecast one series")
    s.add_argument("--model", required=True)
    s.add_argument("--series", required=True)
    s.add_argument("--column", help="value column (default: first value column)")
    s.add_argument("--horizon", type=int, required=True)
    s.add_argument("--context", type=int, default=512)
    s.add_argument("--fusion", choices=("time", "average"), default="time")
    s.add_argument("--plot")
    s.add_argument("--out")
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("inspect", help="describe a checkpoint or configuration")
    s.add_argument("--model")
    model_config_args(s)
    s.add_argument("--routing-stats", metavar="CORPUS")
    s.add_argument("--max-windows", type=int, default=64)
    s.set_defaults(func=cmd_inspect)
    return p


def _workers() -> int:
    raw = os.environ.get("WAVEMOE_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"WAVEMOE_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"WAVEMOE_WORKERS must be >= 1, got {n}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        torch.set_num_threads(_workers())
        return args.func(args)
    except (UsageError, *_USAGE_ERRORS) as exc:
        print(f"wavemoe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, *_DATA_ERRORS) as exc:
        print(f"wavemoe {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"wavemoe {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"wavemoe {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
