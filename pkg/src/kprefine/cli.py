"""Command-line interface: ``kprefine {gen-data,train,refine,eval,offset-hist}``.

Every command accepts ``--config FILE`` (JSON with ``scene``, ``refine``,
``train``, ``ransac`` and ``run`` sections); explicit flags override file
values. The merged configuration is echoed to stderr as canonical JSON,
which can be saved and passed back through ``--config``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigurationError, InvalidInputError, KPRefineError, NumericalError
from .pipeline import (
    align_refined,
    evaluate_pairs,
    load_refined,
    offset_histograms,
    refine_dataset,
    summarize,
    write_refined,
)
from .ransac import RansacConfig
from .refine import NetworkWeights, RefineConfig, Variant
from .synthetic import SceneConfig, generate_dataset, load_dataset
from .trainer import TrainConfig, init_state, load_state, save_state, train

log = logging.getLogger("kprefine")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
METRICS_HEADER = ("pair_id", "pose_err_deg", "inlier_ratio", "n_inliers", "repeat")
SUMMARY_HEADER = ("matches", "auc5", "auc10", "auc20", "mean", "median", "mean_inlier_ratio")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kprefine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic correspondence dataset (JSON lines)")
    _add_common(g)
    g.add_argument("--out", type=Path)
    g.add_argument("--n", type=int, help="number of correspondences")
    g.add_argument("--start", type=int, help="first sample id (for held-out splits)")
    g.add_argument("--seed", type=int)
    g.add_argument("--outlier-fraction", type=float)
    g.add_argument("--matches-per-pair", type=int, dest="num_points")
    g.add_argument("--descriptor-dim", type=int)
    g.add_argument("--keypoint-jitter", type=float)
    g.add_argument("--photometric-noise", type=float)
    g.add_argument("--descriptor-noise", type=float)

    t = sub.add_parser("train", help="train the refinement network")
    _add_common(t)
    t.add_argument("--dataset", type=Path)
    t.add_argument("--out-dir", type=Path)
    t.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--t-px", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-every", type=int)
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--use-score-channel", action="store_true", default=None)

    r = sub.add_parser("refine", help="refine the keypoints of a dataset with a checkpoint")
    _add_common(r)
    r.add_argument("--checkpoint", type=Path)
    r.add_argument("--dataset", type=Path)
    r.add_argument("--out", type=Path)

    e = sub.add_parser("eval", help="relative pose evaluation over image pairs")
    _add_common(e)
    e.add_argument("--dataset", type=Path)
    e.add_argument("--refined", type=Path)
    e.add_argument("--out-dir", type=Path)
    e.add_argument("--threshold-px", type=float)
    e.add_argument("--iterations", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--lo-iterations", type=int, help="local optimization rounds after sampling (0 disables)")
    e.add_argument("--repeats", type=int)

    h = sub.add_parser("offset-hist", help="histograms of offset length and orientation")
    _add_common(h)
    h.add_argument("--refined", type=Path)
    h.add_argument("--out-dir", type=Path)
    h.add_argument("--view", choices=["1", "2", "both"])
    return parser


DEFAULT_RUN = {
    "gen-data": {"out": None, "n": 1000, "start": 0},
    "train": {"dataset": None, "out_dir": None, "resume": None},
    "refine": {"checkpoint": None, "dataset": None, "out": None},
    "eval": {"dataset": None, "refined": None, "out_dir": None, "repeats": 3},
    "offset-hist": {"refined": None, "out_dir": None, "view": "both"},
}

_SECTION_FLAGS = {
    "scene": ("seed", "outlier_fraction", "num_points", "descriptor_dim", "keypoint_jitter",
              "photometric_noise", "descriptor_noise"),
    "train": ("steps", "batch_size", "lr", "t_px", "seed", "checkpoint_every", "log_every"),
    "refine": ("variant", "use_score_channel"),
    "ransac": ("threshold_px", "iterations", "seed", "lo_iterations"),
}
_COMMAND_SECTIONS = {
    "gen-data": ("scene",),
    "train": ("refine", "train"),
    "refine": (),
    "eval": ("ransac",),
    "offset-hist": (),
}


def merged_config(args) -> dict:
    """File config overlaid with explicit flags, with every default filled in."""
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
    cmd = args.command
    flags = vars(args)
    cfg = {"command": cmd}

    run = dict(DEFAULT_RUN[cmd])
    run.update({k: v for k, v in file_cfg.get("run", {}).items() if k in run})
    for k in run:
        if flags.get(k) is not None:
            run[k] = str(flags[k]) if isinstance(flags[k], Path) else flags[k]
    cfg["run"] = run

    defaults = {
        "scene": SceneConfig().to_dict(),
        "refine": RefineConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "ransac": {"threshold_px": 1.0, "iterations": 1000, "seed": 0, "lo_iterations": 20},
    }
    for section in _COMMAND_SECTIONS[cmd]:
        sec = dict(defaults[section])
        unknown = set(file_cfg.get(section, {})) - set(sec)
        if unknown:
            raise UsageError(f"unknown keys in [{section}]: {sorted(unknown)}")
        sec.update(file_cfg.get(section, {}))
        for k in _SECTION_FLAGS[section]:
            if flags.get(k) is not None:
                sec[k] = flags[k]
        cfg[section] = sec
    return cfg


def _echo(cfg):
    print(json.dumps(cfg, indent=2, sort_keys=True), file=sys.stderr)


def _require(run, *keys):
    missing = [k for k in keys if not run.get(k)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_gen_data(cfg) -> int:
    run = cfg["run"]
    _require(run, "out")
    try:
        scene = SceneConfig.from_dict(cfg["scene"])
    except (TypeError, InvalidInputError) as exc:
        raise ConfigurationError(str(exc)) from exc
    if run["n"] < 1:
        raise UsageError("--n must be positive")
    digest = generate_dataset(scene, int(run["n"]), run["out"], start=int(run["start"]))
    print(f"records {run['n']}")
    print(f"sha256 {digest}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    run = cfg["run"]
    _require(run, "dataset", "out_dir")
    out_dir = Path(run["out_dir"])
    try:
        tcfg = TrainConfig(**cfg["train"])
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    ds = load_dataset(run["dataset"])
    refine_d = dict(cfg["refine"])
    refine_d["descriptor_dim"] = ds.descriptor_dim
    rcfg = RefineConfig.from_dict(refine_d)
    out_dir.mkdir(parents=True, exist_ok=True)
    if rcfg.variant is Variant.SAM_ONLY:
        save_state(out_dir / "final", init_state(rcfg, tcfg), rcfg, tcfg)
        print("variant sam-only has no trainable parameters; training skipped")
        print(f"checkpoint {out_dir / 'final'}")
        return EXIT_OK
    resume = None
    if run.get("resume"):
        resume, _, _ = load_state(run["resume"], rcfg)
    state, rows = train(
        ds, rcfg, tcfg, out_dir=out_dir, resume=resume,
        progress=lambda row: log.info("step %(step)d loss %(loss).6g refined %(mean_epi_px_refined).4f px", row),
    )
    if rows:
        last = rows[-1]
        print(
            f"step {last['step']} loss {last['loss']:.6g} "
            f"epi_px refined {last['mean_epi_px_refined']:.4f} unrefined {last['mean_epi_px_unrefined']:.4f}"
        )
    print(f"checkpoint {out_dir / 'final'}")
    return EXIT_OK


def _load_weights(path):
    state, rcfg, _ = load_state(path)
    return state.weights, rcfg


def cmd_refine(cfg) -> int:
    run = cfg["run"]
    _require(run, "checkpoint", "dataset", "out")
    weights, rcfg = _load_weights(run["checkpoint"])
    ds = load_dataset(run["dataset"])
    if rcfg.variant is not Variant.SAM_ONLY and ds.descriptor_dim != rcfg.descriptor_dim:
        raise ConfigurationError(
            f"checkpoint expects D={rcfg.descriptor_dim}, dataset has D={ds.descriptor_dim}"
        )
    if rcfg.variant is Variant.SAM_ONLY:
        rcfg = RefineConfig.from_dict({**rcfg.to_dict(), "descriptor_dim": ds.descriptor_dim})
    rm = refine_dataset(weights, rcfg, ds)
    write_refined(run["out"], rm)
    print(f"refined {len(rm)} matches, skipped {int(rm.skipped.sum())}")
    print(f"sha256 {_file_sha256(run['out'])}")
    return EXIT_OK


def _write_metrics(path, results):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in results:
            w.writerow([r.pair_id, repr(float(r.pose_err_deg)), repr(float(r.inlier_ratio)), r.n_inliers, r.repeat])


def cmd_eval(cfg) -> int:
    run = cfg["run"]
    _require(run, "dataset", "out_dir")
    out_dir = Path(run["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rc = cfg["ransac"]
    rcfg = RansacConfig(
        threshold_px=float(rc["threshold_px"]),
        iterations=int(rc["iterations"]),
        seed=int(rc["seed"]),
        lo_iterations=int(rc["lo_iterations"]),
    )
    ds = load_dataset(run["dataset"])
    columns = {"unrefined": (ds.quantized1, ds.quantized2)}
    if run.get("refined"):
        columns["refined"] = align_refined(ds, load_refined(run["refined"]))
    summaries = {}
    for name, (p1, p2) in columns.items():
        results = evaluate_pairs(ds, p1, p2, rcfg, repeats=int(run["repeats"]))
        _write_metrics(out_dir / f"metrics_{name}.csv", results)
        summaries[name] = summarize(results)
    with (out_dir / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for name, s in summaries.items():
            w.writerow([name] + [repr(s[k]) for k in SUMMARY_HEADER[1:]])
    print(f"{'matches':<10} {'AUC@5':>7} {'AUC@10':>7} {'AUC@20':>7} {'mean':>8} {'median':>8} {'inliers':>8}")
    for name, s in summaries.items():
        print(
            f"{name:<10} {100 * s['auc5']:7.2f} {100 * s['auc10']:7.2f} {100 * s['auc20']:7.2f} "
            f"{s['mean']:8.3f} {s['median']:8.3f} {100 * s['mean_inlier_ratio']:8.2f}"
        )
    return EXIT_OK


def cmd_offset_hist(cfg) -> int:
    run = cfg["run"]
    _require(run, "refined", "out_dir")
    out_dir = Path(run["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rm = load_refined(run["refined"])
    views = {"1": [rm.delta1], "2": [rm.delta2], "both": [rm.delta1, rm.delta2]}[str(run["view"])]
    deltas = np.concatenate(views)
    skipped = np.concatenate([rm.skipped] * len(views))
    len_edges, len_counts, ang_edges, ang_counts = offset_histograms(deltas, skipped)
    with (out_dir / "offset_length.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo_px", "bin_hi_px", "count"])
        for lo, hi, c in zip(len_edges[:-1], len_edges[1:], len_counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    with (out_dir / "offset_orientation.csv").open("w", newline="", encoding="utf-8") as fh:
        fh.write("# zero-length offsets have no orientation and are excluded\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo_deg", "bin_hi_deg", "count"])
        for lo, hi, c in zip(ang_edges[:-1], ang_edges[1:], ang_counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    print(f"offsets {int(len_counts.sum())} (oriented {int(ang_counts.sum())})")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "offset-hist": cmd_offset_hist,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = merged_config(args)
        _echo(cfg)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"kprefine {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"kprefine {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (KPRefineError, OSError, ValueError) as exc:
        print(f"kprefine {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
