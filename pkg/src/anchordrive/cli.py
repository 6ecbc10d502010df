"""Command line wiring for the whole pipeline: scenario and dataset
generation, anchor clustering, two-stage training, closed-loop
evaluation, rollout replay export, and a latent-width sweep.

Every artifact embeds the RunConfig that produced it plus the tool
version, all commands are deterministic given their flags, and nothing
is overwritten unless --force is passed. Exit codes: 0 success, 1
runtime error, 2 usage error. LAD_LOG_LEVEL in {error, info, debug}
selects stderr log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import (TrajectoryDataset, kmeans_cluster, load_anchors,
                      load_dataset, save_anchors, save_dataset)
from .geometry import ego_to_world
from .metrics import PenaltyTable, aggregate_report, score_episode
from .oracle.encoder import DEFAULT_ORACLE_SEED, make_oracle_weights
from .oracle.scenarios import (SCENARIO_KINDS, build_scenario,
                               generate_scenario, load_scenes, save_scenes)
from .planner import Planner, PlannerConfig, PlannerError
from .simulator import (EpisodeConfig, PlannerPolicy, load_rollout,
                        run_episode, save_rollout)
from .training import TrainConfig, prepare_examples, train_planner

log = logging.getLogger("anchordrive")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a command run depends on; written into its artifacts."""

    command: str
    kinds: tuple[str, ...] = tuple(SCENARIO_KINDS)
    seed_start: int = 0
    seed_count: int = 0
    d_llm: int = 256
    d_latent: int = 128
    k_tokens: int = 8
    n_anchors: int = 20
    n_steps: int = 2
    epochs_stage1: int = 3
    epochs_stage2: int = 3
    batch_size: int = 16
    lr_peak: float = 2e-3
    runs: int = 3
    augment: int = 1
    record_stride: int = 5
    train_seed: int = 0
    oracle_seed: int = DEFAULT_ORACLE_SEED
    penalties: dict = field(default_factory=lambda: dict(PenaltyTable.default().factors))
    paths: dict = field(default_factory=dict)
    version: str = __version__

    def __post_init__(self):
        unknown = [k for k in self.kinds if k not in SCENARIO_KINDS]
        if unknown:
            raise UsageError(f"unknown scenario kind(s) {unknown}; "
                             f"choose from {list(SCENARIO_KINDS)}")
        if not self.kinds:
            raise UsageError("at least one scenario kind is required")
        positive = {"seed_count": self.seed_count, "d_llm": self.d_llm,
                    "d_latent": self.d_latent, "k_tokens": self.k_tokens,
                    "n_anchors": self.n_anchors, "n_steps": self.n_steps,
                    "batch_size": self.batch_size, "runs": self.runs,
                    "record_stride": self.record_stride}
        for fname, v in positive.items():
            if v <= 0:
                raise UsageError(f"{fname} must be positive, got {v}")
        if self.augment < 0 or self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise UsageError("augment and epoch counts must be non-negative")
        PenaltyTable(self.penalties)

    def seeds(self) -> range:
        return range(self.seed_start, self.seed_start + self.seed_count)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _setup_logging() -> None:
    level_name = os.environ.get("LAD_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise UsageError(f"LAD_LOG_LEVEL must be one of {sorted(levels)}, "
                         f"got {level_name!r}")
    logging.basicConfig(level=levels[level_name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _guard_output(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise RuntimeError(f"{path} already exists; pass --force to overwrite")


def _parse_kinds(text: str) -> tuple[str, ...]:
    return tuple(k.strip() for k in text.split(",") if k.strip())


def _load_penalties(path: str | None) -> dict:
    if path is None:
        return dict(PenaltyTable.default().factors)
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no penalty file at {p}")
    try:
        factors = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"{p}: not valid JSON ({err})") from None
    if not isinstance(factors, dict):
        raise UsageError(f"{p}: penalty file must hold a category -> factor object")
    merged = dict(PenaltyTable.default().factors)
    merged.update({str(k): float(v) for k, v in factors.items()})
    return merged


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


# ---- gen-data --------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = RunConfig(command="gen-data", kinds=_parse_kinds(args.kinds),
                    seed_start=args.seed, seed_count=args.seeds,
                    augment=args.augment, record_stride=args.stride,
                    paths={"out": str(args.out)})
    out = Path(args.out)
    manifest_path = out / "manifest.json"
    _guard_output(manifest_path, args.force)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "records").mkdir(parents=True, exist_ok=True)

    entries = []
    merged = []
    for kind in cfg.kinds:
        for seed in cfg.seeds():
            scenario = build_scenario(kind, seed)
            scenes, dataset = generate_scenario(seed, kind, augment=cfg.augment,
                                                record_stride=cfg.record_stride)
            scene_file = out / "scenes" / f"{scenario.name}.jsonl"
            record_file = out / "records" / f"{scenario.name}.jsonl"
            save_scenes(scene_file, scenes, scenario)
            save_dataset(record_file, dataset)
            merged.extend(dataset.records)
            entries.append({"name": scenario.name, "kind": kind, "seed": seed,
                            "scenes": str(scene_file.relative_to(out)),
                            "records": str(record_file.relative_to(out)),
                            "n_records": len(dataset)})
            log.debug("generated %s: %d records", scenario.name, len(dataset))

    dataset_meta = {"kinds": list(cfg.kinds), "seed_start": cfg.seed_start,
                    "seed_count": cfg.seed_count, "augment": cfg.augment,
                    "record_stride": cfg.record_stride}
    save_dataset(out / "dataset.jsonl", TrajectoryDataset(records=merged,
                                                          meta=dataset_meta))
    _write_json(manifest_path, {"kind": "dataset-manifest",
                                "run_config": cfg.to_dict(),
                                "scenarios": entries})
    _write_json(out / "run_config.json", cfg.to_dict())
    log.info("wrote %d scenario files, %d records total", len(entries), len(merged))
    print(f"gen-data: {len(entries)} scenarios, {len(merged)} records -> {out}")
    return 0


# ---- cluster ---------------------------------------------------------------


def cmd_cluster(args: argparse.Namespace) -> int:
    cfg = RunConfig(command="cluster", n_anchors=args.na, train_seed=args.seed,
                    seed_count=1,
                    paths={"data": str(args.data), "out": str(args.out)})
    out = Path(args.out)
    _guard_output(out, args.force)
    dataset = load_dataset(args.data)
    trajectories = dataset.stacked()
    if args.na > len(trajectories):
        raise RuntimeError(f"cannot cluster {len(trajectories)} trajectories "
                           f"into {args.na} anchors")
    anchor_set = kmeans_cluster(trajectories, k=args.na, seed=args.seed)
    anchor_set.meta.update({"run_config": cfg.to_dict(),
                            "n_source_trajectories": len(trajectories)})
    out.parent.mkdir(parents=True, exist_ok=True)
    save_anchors(out, anchor_set)

    plot_path = Path(args.plot) if args.plot else out.with_suffix(".plot.jsonl")
    _guard_output(plot_path, args.force)
    lines = [json.dumps({"kind": "anchor-plot", "n_anchors": args.na,
                         "run_config": cfg.to_dict()}, sort_keys=True)]
    for i, a in enumerate(anchor_set.anchors):
        lines.append(json.dumps({"index": i, "points": a.tolist()}, sort_keys=True))
    plot_path.write_text("\n".join(lines) + "\n")
    log.info("clustered %d trajectories into %d anchors", len(trajectories), args.na)
    print(f"cluster: {args.na} anchors from {len(trajectories)} trajectories -> {out}")
    return 0


# ---- train -----------------------------------------------------------------


def _load_training_pairs(data_dir: Path):
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise RuntimeError(f"no manifest.json under {data_dir}; run gen-data first")
    manifest = json.loads(manifest_path.read_text())
    pairs = []
    for entry in manifest["scenarios"]:
        scenes = load_scenes(data_dir / entry["scenes"])
        records = load_dataset(data_dir / entry["records"])
        pairs.append((scenes, records))
    return pairs, manifest


def _train_once(data_dir: Path, anchors_path: Path, out: Path,
                cfg: RunConfig) -> Planner:
    anchor_set = load_anchors(anchors_path)
    if len(anchor_set.anchors) != cfg.n_anchors:
        raise RuntimeError(f"anchor file holds {len(anchor_set.anchors)} anchors, "
                           f"config expects {cfg.n_anchors}")
    pairs, _ = _load_training_pairs(data_dir)
    weights = make_oracle_weights(seed=cfg.oracle_seed, k_tokens=cfg.k_tokens,
                                  d_llm=cfg.d_llm)
    examples = prepare_examples(pairs, weights)
    log.info("training on %d examples, d=%d", len(examples), cfg.d_latent)

    pcfg = PlannerConfig(d_llm=cfg.d_llm, k_tokens=cfg.k_tokens,
                         d_latent=cfg.d_latent, n_anchors=cfg.n_anchors,
                         n_steps=cfg.n_steps, seed=cfg.train_seed)
    planner = Planner(pcfg, anchor_set)
    tcfg = TrainConfig(epochs_stage1=cfg.epochs_stage1,
                       epochs_stage2=cfg.epochs_stage2,
                       batch_size=cfg.batch_size, lr_peak=cfg.lr_peak,
                       seed=cfg.train_seed)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", cfg.to_dict())
    train_planner(planner, examples, tcfg, out_dir=out / "checkpoints",
                  log_path=out / "loss_log.jsonl",
                  extra={"run_config": cfg.to_dict()})
    return planner


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig(command="train", d_llm=args.d_llm, d_latent=args.d,
                    k_tokens=args.k_tokens, n_anchors=args.na,
                    n_steps=args.steps, epochs_stage1=args.epochs1,
                    epochs_stage2=args.epochs2, batch_size=args.batch,
                    lr_peak=args.lr_peak, train_seed=args.seed, seed_count=1,
                    paths={"data": str(args.data), "anchors": str(args.anchors),
                           "out": str(args.out)})
    out = Path(args.out)
    _guard_output(out / "loss_log.jsonl", args.force)
    _train_once(Path(args.data), Path(args.anchors), out, cfg)
    final = out / "checkpoints" / "final"
    print(f"train: final checkpoint at {final}")
    return 0


# ---- evaluate --------------------------------------------------------------


def _evaluate_planner(planner: Planner, cfg: RunConfig, out: Path | None):
    weights = make_oracle_weights(seed=cfg.oracle_seed,
                                  k_tokens=planner.config.k_tokens,
                                  d_llm=planner.config.d_llm)
    penalties = PenaltyTable(cfg.penalties)
    econfig = EpisodeConfig()
    runs = []
    for r in range(cfg.runs):
        results = []
        for kind in cfg.kinds:
            for seed in cfg.seeds():
                scenario = build_scenario(kind, seed)
                rng = np.random.default_rng([cfg.train_seed, r,
                                             SCENARIO_KINDS.index(kind), seed])
                policy = PlannerPolicy(planner, weights, rng)
                rollout = run_episode(scenario, policy, econfig)
                results.append(score_episode(rollout, penalties))
                log.debug("run %d %s: %s ds=%.1f", r, scenario.name,
                          rollout.termination, results[-1].ds)
                if out is not None:
                    run_dir = out / "rollouts" / f"run{r}"
                    run_dir.mkdir(parents=True, exist_ok=True)
                    save_rollout(run_dir / f"{scenario.name}.jsonl", rollout)
        runs.append(results)
        log.info("run %d mean ds %.2f", r, float(np.mean([x.ds for x in results])))
    report = aggregate_report(runs, penalties,
                              config={"run_config": cfg.to_dict()})
    if out is not None:
        _write_json(out / "report.json", report.to_dict())
        (out / "report.txt").write_text(report.to_text())
        _write_json(out / "run_config.json", cfg.to_dict())
    return report


def cmd_evaluate(args: argparse.Namespace) -> int:
    expect = None
    if any(v is not None for v in (args.d, args.d_llm, args.na)):
        probe, _ = Planner.load(args.checkpoint)
        base = probe.config
        expect = dataclasses.replace(
            base,
            d_latent=base.d_latent if args.d is None else args.d,
            d_llm=base.d_llm if args.d_llm is None else args.d_llm,
            n_anchors=base.n_anchors if args.na is None else args.na)
    planner, extra = Planner.load(args.checkpoint, expect=expect)
    if args.steps is not None and args.steps != planner.config.n_steps:
        planner.config = dataclasses.replace(planner.config, n_steps=args.steps)

    cfg = RunConfig(command="evaluate", kinds=_parse_kinds(args.kinds),
                    seed_start=args.seed, seed_count=args.seeds,
                    d_llm=planner.config.d_llm, d_latent=planner.config.d_latent,
                    k_tokens=planner.config.k_tokens,
                    n_anchors=planner.config.n_anchors,
                    n_steps=planner.config.n_steps, runs=args.runs,
                    penalties=_load_penalties(args.penalties),
                    paths={"checkpoint": str(args.checkpoint),
                           "out": str(args.out)})
    out = Path(args.out)
    _guard_output(out / "report.json", args.force)
    report = _evaluate_planner(planner, cfg, out)
    print(report.to_text())
    return 0


# ---- replay ----------------------------------------------------------------


def cmd_replay(args: argparse.Namespace) -> int:
    rollout = load_rollout(args.log)
    cfg = RunConfig(command="replay", seed_count=1,
                    kinds=(rollout.scenario_kind,),
                    paths={"log": str(args.log)})
    out = Path(args.out) if args.out else Path(args.log).with_suffix(".plot.jsonl")
    _guard_output(out, args.force)
    lines = [json.dumps({
        "kind": "replay-plot", "scenario_name": rollout.scenario_name,
        "scenario_kind": rollout.scenario_kind,
        "corridor": [pts.tolist() for pts in rollout.corridor],
        "corridor_half_width": rollout.corridor_half_width,
        "termination": rollout.termination,
        "run_config": cfg.to_dict(),
    }, sort_keys=True)]
    for f in rollout.frames:
        pose = (f.state.x, f.state.y, f.state.yaw)
        fans = [ego_to_world(traj, pose).tolist() for traj in f.trajectories]
        lines.append(json.dumps({
            "frame": f.frame, "time": round(f.time, 6),
            "x": f.state.x, "y": f.state.y, "yaw": f.state.yaw,
            "speed": f.state.speed,
            "belief": f.belief.tolist(), "scores": f.scores.tolist(),
            "selected": f.selected, "polylines": fans,
        }, sort_keys=True))
    out.write_text("\n".join(lines) + "\n")
    print(f"replay: {len(rollout.frames)} frames -> {out}")
    return 0


# ---- sweep -----------------------------------------------------------------


def cmd_sweep(args: argparse.Namespace) -> int:
    dims = tuple(int(x) for x in args.dims.split(",") if x.strip())
    if not dims:
        raise UsageError("--dims needs at least one width")
    out = Path(args.out)
    _guard_output(out / "sweep.json", args.force)
    rows = []
    for d in dims:
        cfg = RunConfig(command="sweep", kinds=_parse_kinds(args.kinds),
                        seed_start=args.seed, seed_count=args.seeds,
                        d_llm=args.d_llm, d_latent=d, k_tokens=args.k_tokens,
                        n_anchors=args.na, n_steps=args.steps,
                        epochs_stage1=args.epochs1, epochs_stage2=args.epochs2,
                        batch_size=args.batch, lr_peak=args.lr_peak,
                        runs=args.runs, train_seed=args.train_seed,
                        paths={"data": str(args.data),
                               "anchors": str(args.anchors), "out": str(out)})
        log.info("sweep: training d=%d", d)
        planner = _train_once(Path(args.data), Path(args.anchors),
                              out / f"d{d}", cfg)
        eval_cfg = dataclasses.replace(cfg, kinds=_parse_kinds(args.eval_kinds),
                                       seed_start=args.eval_seed,
                                       seed_count=args.eval_seeds)
        report = _evaluate_planner(planner, eval_cfg, out / f"d{d}" / "eval")
        rows.append({"d": d, "ds": report.overall["ds"],
                     "rc": report.overall["rc"], "is": report.overall["is"]})

    table = [f"{'d':>6s} {'DS':>8s} {'RC':>8s} {'IS':>8s}"]
    for row in rows:
        table.append(f"{row['d']:>6d} {row['ds']:>8.2f} {row['rc']:>8.2f} "
                     f"{row['is']:>8.4f}")
    text = "\n".join(table) + "\n"
    _write_json(out / "sweep.json", {"kind": "latent-width-sweep", "rows": rows,
                                     "dims": list(dims)})
    (out / "sweep.txt").write_text(text)
    print(text)
    return 0


# ---- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchordrive",
        description="anchor-initialized diffusion planner: data, training, "
                    "closed-loop evaluation")
    parser.add_argument("--version", action="version",
                        version=f"anchordrive {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate scenarios and the expert dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--kinds", default=",".join(SCENARIO_KINDS))
    g.add_argument("--seeds", type=int, default=40, help="seeds per kind")
    g.add_argument("--seed", type=int, default=0, help="first seed")
    g.add_argument("--augment", type=int, default=1)
    g.add_argument("--stride", type=int, default=5)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("cluster", help="k-means anchor vocabulary from a dataset")
    c.add_argument("--data", required=True, help="dataset.jsonl from gen-data")
    c.add_argument("--out", required=True, help="anchor file to write")
    c.add_argument("--na", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--plot", default=None, help="anchor polyline plot-data file")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_cluster)

    t = sub.add_parser("train", help="two-stage training run")
    t.add_argument("--data", required=True, help="gen-data output directory")
    t.add_argument("--anchors", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--d", type=int, default=128, help="latent width")
    t.add_argument("--d-llm", type=int, default=256)
    t.add_argument("--k-tokens", type=int, default=8)
    t.add_argument("--na", type=int, default=20)
    t.add_argument("--steps", type=int, default=2)
    t.add_argument("--epochs1", type=int, default=3)
    t.add_argument("--epochs2", type=int, default=3)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr-peak", type=float, default=2e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="closed-loop benchmark of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--kinds", default=",".join(SCENARIO_KINDS))
    e.add_argument("--seeds", type=int, default=10, help="held-out seeds per kind")
    e.add_argument("--seed", type=int, default=1000, help="first held-out seed")
    e.add_argument("--runs", type=int, default=3)
    e.add_argument("--steps", type=int, default=None,
                   help="override denoising steps")
    e.add_argument("--d", type=int, default=None,
                   help="assert checkpoint latent width")
    e.add_argument("--d-llm", type=int, default=None)
    e.add_argument("--na", type=int, default=None)
    e.add_argument("--penalties", default=None, help="JSON penalty-factor file")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("replay", help="export plot data from a rollout log")
    r.add_argument("--log", required=True)
    r.add_argument("--out", default=None)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_replay)

    s = sub.add_parser("sweep", help="train and evaluate across latent widths")
    s.add_argument("--data", required=True)
    s.add_argument("--anchors", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dims", default="32,64,128")
    s.add_argument("--kinds", default=",".join(SCENARIO_KINDS))
    s.add_argument("--seeds", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eval-kinds", default=",".join(SCENARIO_KINDS))
    s.add_argument("--eval-seeds", type=int, default=10)
    s.add_argument("--eval-seed", type=int, default=1000)
    s.add_argument("--d-llm", type=int, default=256)
    s.add_argument("--k-tokens", type=int, default=8)
    s.add_argument("--na", type=int, default=20)
    s.add_argument("--steps", type=int, default=2)
    s.add_argument("--epochs1", type=int, default=3)
    s.add_argument("--epochs2", type=int, default=3)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr-peak", type=float, default=2e-3)
    s.add_argument("--runs", type=int, default=1)
    s.add_argument("--train-seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except (PlannerError, ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main(sys.argv[1:]))
