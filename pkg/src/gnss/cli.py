"""Command-line entry point: ``gnss <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
divergence, 4 acceptance failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __doc__ as package_doc
from .beam import build_beam_model, extract_dataset_window, run_explicit
from .config import RunConfig, describe_schema, load_config
from .errors import ConfigError, FormatError, GnssError, NumericalDivergence
from .experiments import SWEEP_AXES, runtime_bench, sweep
from .model import MODEL_MAGIC, load_checkpoint, save_checkpoint
from .rollout import evaluate, rollout
from .trajectory import NUM_TYPES, Trajectory, checksum, parse_trajectory, read_trajectory, write_trajectory
from .training import train

log = logging.getLogger("gnss")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ACCEPTANCE = 4

MANIFEST = "manifest.tsv"


class StageError(GnssError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---- dataset generation --------------------------------------------------
def split_labels(n: int) -> list[str]:
    """Train/val/test labels in listing order: the last file tests, the one before validates."""
    if n == 1:
        log.warning("a single trajectory cannot be split; it is marked test-only")
        return ["test"]
    if n == 2:
        log.warning("two trajectories: no validation split")
        return ["train", "test"]
    return ["train"] * (n - 2) + ["val", "test"]


def generate_one(cfg: RunConfig, position: float) -> Trajectory:
    model = build_beam_model(
        cfg.length_m, cfg.element_size_m, cfg.section(), position, (cfg.origin_x_m, cfg.origin_y_m)
    )
    traj = run_explicit(model, cfg.excitation(), cfg.total_time_s, cfg.dt_s, cfg.dt_ph_s or None)
    if cfg.margin_m > 0:
        traj = extract_dataset_window(traj, cfg.margin_m)
    return traj


def generate_dataset(cfg: RunConfig, out_dir) -> tuple[list[Path], list[str]]:
    """Write one trajectory per actuator position plus a manifest.

    Returns the written files and a list of per-position error messages.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    positions = list(cfg.actuator_pos_m)
    labels = split_labels(len(positions))
    rows = ["file\tactuator_pos_m\tsplit\tn_nodes\tn_steps\tcrc32"]
    files, errors = [], []
    for k, (pos, label) in enumerate(zip(positions, labels)):
        name = f"traj_{k:02d}.gnsstrj"
        try:
            traj = generate_one(cfg, pos)
        except GnssError as exc:
            errors.append(f"{name} (actuator {pos:g} m): {exc}")
            log.error("%s", errors[-1])
            continue
        write_trajectory(out / name, traj)
        files.append(out / name)
        rows.append(f"{name}\t{pos:.9g}\t{label}\t{traj.n_nodes}\t{traj.n_steps}\t{checksum(out / name)}")
        log.info("%s: actuator %.4g m, %d nodes, %d frames (%s)", name, pos, traj.n_nodes, traj.n_steps, label)
    (out / MANIFEST).write_text("\n".join(rows) + "\n")
    return files, errors


def read_manifest(data_dir) -> dict[str, list[Trajectory]]:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise ConfigError(f"no {MANIFEST} in {data_dir}")
    splits: dict[str, list[Trajectory]] = {"train": [], "val": [], "test": []}
    lines = path.read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        name, _, label, *_ = line.split("\t")
        if label not in splits:
            raise ConfigError(f"{MANIFEST}: unknown split {label!r}")
        splits[label].append(read_trajectory(Path(data_dir) / name))
    return splits


# ---- subcommands ---------------------------------------------------------
def _config(args) -> RunConfig:
    overrides = dict(_kv(s) for s in (args.set or []))
    if args.config is None:
        from .config import parse_config

        return parse_config("", overrides)
    return load_config(args.config, overrides)


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def cmd_generate(args) -> int:
    cfg = _config(args)
    files, errors = generate_dataset(cfg, args.out)
    print(f"wrote {len(files)} trajectories and {MANIFEST} to {args.out}")
    return EXIT_CONFIG if errors else EXIT_OK


def inspect_text(path) -> str:
    data = Path(path).read_bytes()
    if data[:8] == MODEL_MAGIC:
        model = load_checkpoint(path)
        c = model.config
        return "\n".join([
            f"file        {path}",
            "kind        model checkpoint",
            f"rounds M    {c.message_steps}",
            f"history n   {c.history}",
            f"latent      {c.latent}",
            f"radius      {c.radius:.6g} m",
            f"mode        {c.mode}",
            f"parameters  {model.n_parameters()}",
        ])
    traj, status = parse_trajectory(data, verify=True)
    types = np.bincount(traj.node_types, minlength=3)
    u = traj.local_displacements
    crc = {"ok": f"{checksum(path)} (verified)", "absent": "absent"}[status]
    lines = [
        f"file        {path}",
        "kind        trajectory",
        f"N           {traj.n_nodes}",
        f"T           {traj.n_steps}",
        f"dt_ph       {traj.dt_ph:.6g} s",
        "node types  " + ", ".join(f"{t}:{c}" for t, c in enumerate(types) if c),
        f"actuator    {traj.actuator_node}",
        f"u range     [{u[..., 0].min():.6g}, {u[..., 0].max():.6g}] m",
        f"w range     [{u[..., 1].min():.6g}, {u[..., 1].max():.6g}] m",
        f"checksum    {crc}",
    ]
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    print(inspect_text(args.file))
    return EXIT_OK


def cmd_keys(args) -> int:
    print(describe_schema())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    splits = read_manifest(args.data)
    if not splits["train"]:
        raise ConfigError(f"{args.data} has no training trajectories")
    model, report = train(cfg.train_config(args.out), cfg.model_config(), splits["train"], splits["val"])
    save_checkpoint(args.out, model)
    report_path = args.report or f"{args.out}.train.tsv"
    report.write(report_path)
    print(f"saved {args.out}; training curve in {report_path}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    model = load_checkpoint(args.model)
    truth = read_trajectory(args.data)
    res = rollout(model, truth, args.steps)
    write_trajectory(args.out, res.as_trajectory(truth))
    mean_step = float(np.mean(res.step_times)) if res.step_times else 0.0
    print(f"wrote {res.positions.shape[0]} frames to {args.out} (mean step {mean_step * 1e3:.2f} ms)")
    if res.diverged:
        print(f"rollout diverged at frame {res.divergence_step}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = read_trajectory(args.pred)
    truth = read_trajectory(args.truth)
    report = evaluate(pred, truth)
    report.write(args.report)
    print(f"rollout MSE {report.rollout_mse:.6g} m, diverged {report.diverged}; report in {args.report}")
    return EXIT_OK


def _datasets(cfg: RunConfig, data_dir):
    if data_dir is not None:
        return read_manifest(data_dir)
    trajs = [generate_one(cfg, p) for p in cfg.actuator_pos_m]
    labels = split_labels(len(trajs))
    return {s: [t for t, l in zip(trajs, labels) if l == s] for s in ("train", "val", "test")}


def cmd_sweep(args) -> int:
    cfg = _config(args)
    splits = _datasets(cfg, args.data)
    everything = splits["train"] + splits["val"] + splits["test"]
    values = [v for v in args.values.split(",") if v.strip()]
    table = sweep(cfg, args.axis, values, splits["train"], splits["val"], everything)
    table.write(args.out)
    best = table.best()
    print(f"best {args.axis} = {best.value:g} (rollout MSE {best.mean:.4g}); table in {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    report = runtime_bench(sizes, repetitions=args.repetitions)
    report.write(args.out)
    a, b = report.edge_fit
    print(f"GNSS per-step slope {report.gnss_slope:.3f}, FEM total slope {report.fem_slope:.3f}, "
          f"edges = {a:.0f} + {b:.0f} N; table in {args.out}")
    return EXIT_OK


def run_pipeline(cfg: RunConfig, out_dir) -> tuple[int, dict]:
    """generate -> train -> rollout -> evaluate, writing a report bundle into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    timing = {}

    def stage(name, fn):
        tic = time.perf_counter()
        try:
            result = fn()
        except GnssError as exc:
            raise StageError(name, exc) from exc
        timing[name] = time.perf_counter() - tic
        return result

    _, errors = stage("generate", lambda: generate_dataset(cfg, out / "data"))
    if errors:
        raise StageError("generate", ConfigError("; ".join(errors)))
    splits = stage("generate", lambda: read_manifest(out / "data"))
    if not splits["train"] or not splits["test"]:
        raise StageError("generate", ConfigError("need at least one training and one test trajectory"))
    model, report = stage("train", lambda: train(cfg.train_config(), cfg.model_config(), splits["train"], splits["val"]))
    save_checkpoint(out / "model.gnssmdl", model)
    report.write(out / "train.tsv")
    truth = splits["test"][0]
    res = stage("rollout", lambda: rollout(model, truth, cfg.rollout_steps or None))
    pred = res.as_trajectory(truth)
    write_trajectory(out / "rollout.gnsstrj", pred)
    ev = stage("evaluate", lambda: evaluate(pred, truth, amplitude=cfg.amplitude_m, diverged=res.diverged))
    ev.write(out / "report.tsv")
    peak = float(np.abs(truth.local_displacements).max())
    relative = ev.rollout_mse / peak if peak > 0 else float("inf")
    passed = (not ev.diverged) and relative <= cfg.accept_relative_mse
    summary = {
        "mode": cfg.mode,
        "rollout_mse": ev.rollout_mse,
        "relative_mse": relative,
        "diverged": ev.diverged,
        "final_train_loss": report.loss[-1] if report.loss else float("nan"),
        "accepted": passed,
    }
    (out / "summary.tsv").write_text(
        "key\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in summary.items())
    )
    timing["mean_rollout_step"] = float(np.mean(res.step_times)) if res.step_times else 0.0
    (out / "timing.tsv").write_text("stage\tseconds\n" + "".join(f"{k}\t{v:.6g}\n" for k, v in timing.items()))
    return (EXIT_OK if passed else EXIT_ACCEPTANCE), summary


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    code, summary = run_pipeline(cfg, args.out)
    state = "accepted" if summary["accepted"] else "REJECTED"
    print(f"{state}: mode {summary['mode']}, rollout MSE {summary['rollout_mse']:.4g} m "
          f"(relative {summary['relative_mse']:.3g}), diverged {summary['diverged']}; bundle in {args.out}")
    return code


# ---- argument parsing ----------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnss",
        description=package_doc,
        epilog="Exit codes: 0 ok, 2 config/input error, 3 numerical divergence, 4 acceptance failure. "
        "GNSS_THREADS caps the BLAS thread pool.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="flat key = value file (see 'gnss keys')")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = sub.add_parser("generate", help="simulate one trajectory per actuator position")
    with_config(p)
    p.add_argument("--out", required=True, help="output directory for trajectories and the manifest")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inspect", help="summarise a trajectory or checkpoint file")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("keys", help="list the documented config keys")
    p.set_defaults(func=cmd_keys)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    with_config(p)
    p.add_argument("--data", required=True, help="directory written by 'generate'")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="training curve path (default: <out>.train.tsv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="roll a checkpoint forward from a trajectory's seed frames")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="ground-truth trajectory (seed frames and actuator motion)")
    p.add_argument("--steps", type=int, default=None, help="frames to produce, seed included (default: all)")
    p.add_argument("--out", required=True, help="predicted trajectory path")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="compare a predicted trajectory with the truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and score one model per value of a hyperparameter")
    with_config(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", help="dataset directory (default: generate from the config)")
    p.add_argument("--out", default="sweep.tsv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="runtime scaling of GNSS steps and FEM runs")
    p.add_argument("--sizes", default="400,800,1600", help="comma-separated node counts")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--out", default="bench.tsv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pipeline", help="generate, train, roll out and evaluate in one go")
    with_config(p)
    p.add_argument("--out", required=True, help="report bundle directory")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _thread_cap():
    value = os.environ.get("GNSS_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"GNSS_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"GNSS_THREADS must be a positive integer, got {value!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cap = _thread_cap()
        if cap is None:
            return args.func(args)
        with threadpool_limits(cap):
            return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if isinstance(exc.cause, NumericalDivergence) else EXIT_CONFIG
    except NumericalDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (GnssError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
