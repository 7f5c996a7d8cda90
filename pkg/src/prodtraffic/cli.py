"""Command-line pipeline: synth-data, ingest, fit-smp, train, generate, evaluate.

Every command writes its artifacts to ``--out-dir`` together with a
``manifest-<command>.json`` recording the full configuration, the seed and
SHA-256 checksums of what it wrote. Passing a manifest back through
``--config`` reruns the command with the same settings.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import STATES, DataError, NumericalError, ProductionState
from .evaluation import (
    CONTROL_ID,
    DEFAULT_BINS,
    DEFAULT_JUMPS,
    DEFAULT_TARGETS,
    STANDARD_ROWS,
    ExponentialSampler,
    ReplaySampler,
    compare_models,
    default_spec,
    export_histogram,
    generate_synthetic_dataset,
)
from .generative import KINDS, FitResult, TrafficSampler, TrainConfig, fit_model, load_model, save_model
from .ingest import (
    StateRule,
    annotate_states,
    extract_samples,
    load_state_map,
    parse_log,
    read_episodes,
    read_samples,
    samples_by_state,
    split_dataset,
    write_episodes,
    write_log,
    write_samples,
    write_state_map,
)
from .smp import SemiMarkovModel
from .traffic import export_trace, generate_trace, read_trace

log = logging.getLogger("prodtraffic")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
MODES = {"1d": 1, "2d": 2}
REQUIRED = {
    "ingest": ("log", "state_map"),
    "train": ("samples", "kind"),
    "generate": ("smp", "model", "n_max"),
    "evaluate": ("test", "model"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# helpers ---------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, artifacts: list[Path], summary: dict | None = None) -> Path:
    out = Path(args.out_dir)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    doc = {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "config": config,
        "artifacts": {str(p.relative_to(out)) if p.is_relative_to(out) else str(p): _sha256(p)
                      for p in sorted(artifacts)},
    }
    if summary is not None:
        doc["summary"] = summary
    path = out / f"manifest-{args.command}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.learning_rate,
                       train_ratio=args.train_ratio, seed=args.seed, kl_weight=args.kl_weight)


def _model_stem(kind: str, mode: str, state: ProductionState | None) -> str:
    return f"{kind}-{mode}" + (f"-{state.label.lower()}" if state is not None else "")


def _row_name(kind: str, data_dim: int) -> str:
    return f"{kind.upper()} {data_dim}D"


def _fit_job(job) -> FitResult:
    kind, samples, dim, cfg, state = job
    return fit_model(kind, samples, dim, cfg, state)


# commands --------------------------------------------------------------------

def cmd_synth_data(args) -> dict:
    """Write a synthetic machine log, its state map and the ground-truth spec."""
    out = _out_dir(args)
    if not args.scale > 0:
        raise UsageError(f"--scale must be positive, got {args.scale}")
    spec = default_spec(args.n_jumps, {st: n * args.scale for st, n in DEFAULT_TARGETS.items()})
    ds = generate_synthetic_dataset(spec, args.n_jumps, seed=args.seed)
    log_path, map_path, spec_path = out / "log.csv", out / "state_map.csv", out / "spec.json"
    write_log(ds.records, log_path)
    write_state_map([StateRule(CONTROL_ID, re.compile(re.escape(st.label)), st) for st in STATES], map_path)
    spec_path.write_text(spec.to_json(), encoding="utf-8")
    counts = {st.label: n for st, n in ds.state_counts().items()}
    print("samples per state: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    _write_manifest(args, [log_path, map_path, spec_path], {"state_counts": counts})
    return counts


def cmd_ingest(args) -> dict:
    """Annotate a log, extract samples, split train/test and summarize transitions."""
    out = _out_dir(args)
    trace = annotate_states(parse_log(args.log), load_state_map(args.state_map))
    samples = extract_samples(trace)
    if not samples:
        raise DataError(f"{args.log}: no interarrival samples in any state")
    split = split_dataset(samples, args.train_ratio, args.seed)
    paths = {name: out / f"{name}.csv" for name in ("samples", "train", "test", "episodes")}
    write_samples(samples, paths["samples"])
    write_samples(split.train, paths["train"])
    write_samples(split.test, paths["test"])
    write_episodes(trace, paths["episodes"])
    counts = np.zeros((len(STATES), len(STATES)), dtype=int)
    for a, b in trace.transitions:
        counts[a - 1, b - 1] += 1
    per_state = {st.label: len(v) for st, v in samples_by_state(samples).items()}
    summary = {
        "episodes": len(trace.episodes),
        "samples_per_state": per_state,
        "split": split.state_counts(),
        "transition_counts": {"states": [st.label for st in STATES], "counts": counts.tolist()},
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print("samples per state: " + ", ".join(f"{k}={v}" for k, v in per_state.items()))
    _write_manifest(args, list(paths.values()) + [summary_path], summary)
    return summary


def cmd_fit_smp(args) -> SemiMarkovModel:
    """Estimate the semi-Markov model from an episode table or a generated trace."""
    out = _out_dir(args)
    if (args.episodes is None) == (args.trace is None):
        raise UsageError("give exactly one of --episodes or --trace")
    trace = read_episodes(args.episodes) if args.episodes is not None else read_trace(args.trace)
    model = SemiMarkovModel.from_trace(trace)
    path = out / "smp.json"
    model.save(path)
    _write_manifest(args, [path], {"counts": model.counts.tolist()})
    return model


def cmd_train(args) -> list[Path]:
    """Train one model, or one per state for vae/gan when no state is given."""
    out = _out_dir(args)
    samples = read_samples(args.samples)
    dim = MODES[args.mode]
    cfg = _train_config(args)
    if args.kind == "cvae":
        if args.state is not None:
            raise UsageError("cvae trains one model over all states; drop --state")
        states = [None]
    elif args.state is not None:
        states = [ProductionState.parse(args.state)]
    else:
        present = {s.state for s in samples}
        states = [st for st in STATES if st in present]
    jobs = [(args.kind, samples, dim, cfg, st) for st in states]
    workers = min(args.jobs or os.cpu_count() or 1, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_job, jobs))
    else:
        results = [_fit_job(job) for job in jobs]
    artifacts = []
    for st, res in zip(states, results):
        stem = _model_stem(args.kind, args.mode, st)
        model_path, hist_path = out / f"{stem}.json", out / f"{stem}-loss.csv"
        save_model(res.model, model_path)
        cols = ["generator", "discriminator"] if res.history.ndim == 2 else ["loss"]
        hist = res.history.reshape(len(res.history), -1)
        lines = [",".join(["epoch"] + cols)]
        lines += [",".join([str(i + 1)] + [repr(float(v)) for v in row]) for i, row in enumerate(hist)]
        hist_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        artifacts += [model_path, hist_path]
        print(f"wrote {model_path}")
    _write_manifest(args, artifacts)
    return artifacts


def _load(path):
    try:
        return load_model(path)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_sampler(paths, size_samples=None) -> tuple[str, TrafficSampler]:
    """Group model files into a sampler; all files must share kind and data dim."""
    models = [_load(p) for p in paths]
    kinds = {(m.kind, m.data_dim) for m in models}
    if len(kinds) != 1:
        raise DataError("model files mix kinds or data dimensions: "
                        + ", ".join(sorted(_row_name(k, d) for k, d in kinds)))
    kind, dim = kinds.pop()
    pools = {}
    if size_samples is not None:
        pools = {st: np.array([s.size_bytes for s in v], dtype=np.int64)
                 for st, v in samples_by_state(size_samples).items() if v}
    if kind == "cvae":
        if len(models) != 1:
            raise DataError("give a single cvae model file")
        return _row_name(kind, dim), TrafficSampler(cvae=models[0], size_pool=pools)
    per_state = {}
    for path, m in zip(paths, models):
        if m.state is None:
            raise DataError(f"{path}: per-state {kind} model carries no state")
        if m.state in per_state:
            raise DataError(f"{path}: second {kind} model for state {m.state.label}")
        per_state[m.state] = m
    return _row_name(kind, dim), TrafficSampler(per_state, size_pool=pools)


def cmd_generate(args) -> Path:
    """Run the state-aware trace generator and export the trace CSV."""
    out = _out_dir(args)
    smp = SemiMarkovModel.load(args.smp)
    size_samples = read_samples(args.samples) if args.samples else None
    _, sampler = _load_sampler(args.model, size_samples)
    if sampler.data_dim == 1 and size_samples is None:
        raise UsageError("1d models need --samples to bootstrap packet sizes")
    trace = generate_trace(smp, sampler, args.n_max, seed=args.seed, absorbing=args.absorbing)
    path = out / "trace.csv"
    export_trace(trace, path)
    print(f"wrote {len(trace)} packets over {len(trace.jumps)} jumps to {path}")
    _write_manifest(args, [path], {"packets": len(trace), "jumps": len(trace.jumps)})
    return path


def cmd_evaluate(args) -> Path:
    """KL comparison table of trained models against real test interarrivals."""
    out = _out_dir(args)
    test = read_samples(args.test)
    real = {st: [s.interarrival_ms for s in v] for st, v in samples_by_state(test).items() if v}
    groups: dict[tuple[str, int], list[str]] = {}
    for p in args.model:
        m = _load(p)
        groups.setdefault((m.kind, m.data_dim), []).append(p)
    samplers = {}
    for paths in groups.values():
        name, sampler = _load_sampler(paths)
        samplers[name] = sampler
    if args.oracles:
        samplers["Replay"] = ReplaySampler({st: np.asarray(v) for st, v in real.items()})
        samplers["Exponential"] = ExponentialSampler.fit(test)
    required = STANDARD_ROWS if not args.partial else [r for r in STANDARD_ROWS if r in samplers]
    table = compare_models(real, samplers, seed=args.seed, bins=args.bins, required=required)
    table_path = out / "table.csv"
    table.write(table_path)
    hist_dir = out / "histograms"
    hist_dir.mkdir(exist_ok=True)
    artifacts = [table_path]
    for st, h in table.real_histograms.items():
        path = hist_dir / f"real-{st.label.lower()}.csv"
        export_histogram(h, path)
        artifacts.append(path)
    for (row, st), h in table.generated_histograms.items():
        path = hist_dir / f"{row.lower().replace(' ', '-')}-{st.label.lower()}.csv"
        export_histogram(h, path)
        artifacts.append(path)
    sys.stdout.write(table.to_csv())
    _write_manifest(args, artifacts)
    return table_path


# argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    shared.add_argument("--config", help="JSON file of option defaults, or a manifest to rerun")
    shared.add_argument("--out-dir", default=".", help="directory for outputs (default .)")
    shared.add_argument("-v", "--verbose", action="store_true")

    training = _Parser(add_help=False)
    training.add_argument("--epochs", type=int, default=500)
    training.add_argument("--batch-size", type=int, default=32)
    training.add_argument("--learning-rate", type=float, default=1e-3)
    training.add_argument("--kl-weight", type=float, default=0.01)

    split = _Parser(add_help=False)
    split.add_argument("--train-ratio", type=float, default=0.7)

    parser = _Parser(prog="prodtraffic", description="State-aware industrial traffic modeling.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[shared], help="write a synthetic machine log")
    p.add_argument("--n-jumps", type=int, default=DEFAULT_JUMPS)
    p.add_argument("--scale", type=float, default=1.0, help="multiplier on the per-state sample targets")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("ingest", parents=[shared, split], help="log -> samples, split, transition summary")
    p.add_argument("log", nargs="?")
    p.add_argument("--state-map")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit-smp", parents=[shared], help="estimate the semi-Markov model")
    p.add_argument("--episodes", help="episode table written by ingest")
    p.add_argument("--trace", help="trace CSV written by generate")
    p.set_defaults(func=cmd_fit_smp)

    p = sub.add_parser("train", parents=[shared, training, split], help="train a generative model")
    p.add_argument("samples", nargs="?", help="training samples CSV")
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--mode", choices=sorted(MODES), default="1d")
    p.add_argument("--state", help="train only this state (vae/gan)")
    p.add_argument("--jobs", type=int, default=0, help="parallel per-state jobs (default: cpu count)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[shared], help="synthesize a packet trace")
    p.add_argument("--smp")
    p.add_argument("--model", nargs="+", help="one cvae file or per-state vae/gan files")
    p.add_argument("--n-max", type=int, help="number of state jumps")
    p.add_argument("--samples", help="samples CSV to bootstrap packet sizes in 1d mode")
    p.add_argument("--absorbing", action="store_true", help="stop at a state with no exits instead of failing")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[shared], help="KL comparison table")
    p.add_argument("--test", help="held-out samples CSV")
    p.add_argument("--model", nargs="+")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--partial", action="store_true", help="allow a table without all six standard rows")
    p.add_argument("--oracles", action="store_true", help="add replay and exponential baseline rows")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _load_config(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"config {path} must be a JSON object")
    doc = doc.get("config", doc)
    return {k.replace("-", "_"): v for k, v in doc.items()}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _load_config(args.config)
        cfg.pop("command", None)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config key {unknown[0]!r} for {args.command}")
        # explicit flags still win over the file
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    # required values may come from the command line or the config file
    for dest in REQUIRED.get(args.command, ()):
        if getattr(args, dest) is None:
            flag = dest if dest in ("log", "samples") else "--" + dest.replace("_", "-")
            raise UsageError(f"{args.command}: {flag} is required")
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"prodtraffic: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"prodtraffic: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"prodtraffic: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"prodtraffic: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"prodtraffic: error: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
