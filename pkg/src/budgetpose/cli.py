"""Command line: generate scenes, train, evaluate, benchmark gradient variance.

All randomness derives from ``master_seed`` through named substreams, so a
command rerun with the same config and seed writes the same files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, desk_scale, parse_assignment
from .energymodel import EnergyNet
from .evaluation import ALL_METHODS, matched_budget_eval, pool_for, variance_benchmark
from .io import CorruptFile, load_scene_dir, save_scene
from .sampling import SCENE, stream_key
from .scene import generate_scene, load_model
from .train import training_loop, write_log

log = logging.getLogger("budgetpose")


class Outputs:
    """Tracks files a command writes so a failed run leaves nothing behind."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def remove_all(self) -> None:
        for p in reversed(self.paths):
            if p.exists():
                p.unlink()


def scene_seed(master_seed: int, scene_id: int) -> int:
    return stream_key(master_seed, scene_id, SCENE)


def cmd_generate(cfg: RunConfig, count: int, start: int, out: Path, outputs: Outputs) -> list[Path]:
    d = out / "scenes"
    d.mkdir(parents=True, exist_ok=True)
    model = load_model(cfg.scene)
    written = []
    for sid in range(start, start + count):
        scene = generate_scene(cfg.scene, scene_seed(cfg.master_seed, sid), scene_id=sid, model=model)
        outputs.add(d / f"scene_{sid}.json")
        written.append(save_scene(scene, d))
    log.info("wrote %d scenes to %s", len(written), d)
    return written


def _snapshot_doc(net: EnergyNet, update: int, velocity, score) -> dict:
    doc = net.to_dict()
    doc.update(update=int(update), velocity=np.asarray(velocity).tolist(), validation_success=score)
    return doc


def cmd_train(cfg: RunConfig, scene_dir: Path, out: Path, outputs: Outputs, val_dir=None, resume=None) -> Path:
    scenes = load_scene_dir(scene_dir)
    if not scenes:
        raise ConfigError(f"no scene files in {scene_dir}")
    val = load_scene_dir(val_dir) if val_dir else None
    snap_dir = out / "snapshots"
    snap_dir.mkdir(parents=True, exist_ok=True)
    net = velocity = None
    start = 0
    if resume:
        doc = json.loads(Path(resume).read_text())
        net = EnergyNet.from_dict(doc)
        velocity = doc.get("velocity")
        start = int(doc.get("update", 0))

    def on_snapshot(update, snap_net, vel, score):
        path = outputs.add(snap_dir / f"snapshot_{update:06d}.json")
        path.write_text(json.dumps(_snapshot_doc(snap_net, update, vel, score)))

    pairs = [(s, pool_for(s, cfg.agent.pool_size, cfg.master_seed)) for s in scenes]
    vals = [(s, pool_for(s, cfg.agent.pool_size, cfg.master_seed)) for s in val] if val else None
    res = training_loop(pairs, cfg.train, cfg.agent.episode_params(), pool_size=cfg.agent.pool_size,
                        val_scenes=vals, net=net, velocity=velocity, start_update=start,
                        on_snapshot=on_snapshot)
    if all(r["skipped"] for r in res.log):
        log.warning("no eligible training scenes: every scene was skipped")
    write_log(res.log, outputs.add(out / "train_log.csv"))
    model_path = outputs.add(out / "model.json")
    res.net.save(model_path)
    log.info("selected snapshot at update %d -> %s", res.selected_update, model_path)
    return model_path


def cmd_eval(cfg: RunConfig, model_path: Path, scene_dir: Path, out: Path, outputs: Outputs):
    net = EnergyNet.load(model_path)
    scenes = load_scene_dir(scene_dir)
    if not scenes:
        raise ConfigError(f"no scene files in {scene_dir}")
    report = matched_budget_eval(scenes, net, cfg.eval.methods, cfg.eval, cfg.agent.episode_params(),
                                 pool_size=cfg.agent.pool_size, master_seed=cfg.master_seed)
    out.mkdir(parents=True, exist_ok=True)
    report.write(outputs.add(out / "report.json"), outputs.add(out / "report.csv"),
                 outputs.add(out / "report_per_scene.csv"))
    for name, m in report.methods.items():
        log.info("%-8s success %6.2f%%  avg steps %.2f", name, m["success_rate"], m["avg_refinement_steps"])
    return report


def cmd_variance_bench(cfg: RunConfig, model_path, out: Path, outputs: Outputs, scene_dir=None):
    net = EnergyNet.load(model_path) if model_path else EnergyNet.initialize(cfg.train.init_seed,
                                                                              hidden=cfg.train.hidden)
    if scene_dir:
        scene = load_scene_dir(scene_dir)[0]
    else:
        scene = generate_scene(cfg.scene, scene_seed(cfg.master_seed, 0), scene_id=0)
    e = cfg.eval
    pool = pool_for(scene, e.variance_pool_size, cfg.master_seed)
    report = variance_benchmark(scene, pool, net, e.variance_M_efficient, e.variance_M_naive,
                                e.variance_repetitions, cfg.master_seed, cfg.agent.episode_params(),
                                n_components=e.variance_components,
                                baseline_sequences=e.variance_baseline_sequences)
    out.mkdir(parents=True, exist_ok=True)
    report.write(outputs.add(out / "variance.json"), outputs.add(out / "variance.csv"),
                 outputs.add(out / "variance_plot.csv"))
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="budgetpose", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of dotted keys")
    common.add_argument("--preset", choices=["default", "desk"], default="default",
                        help="base settings the config file overrides")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted key (repeatable)")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic scenes")
    g.add_argument("--count", type=int, help="number of scenes (default: train_scene_count)")
    g.add_argument("--start", type=int, default=0, help="first scene id")

    t = sub.add_parser("train", parents=[common], help="train the energy network")
    t.add_argument("--scenes", type=Path, required=True)
    t.add_argument("--val-scenes", type=Path)
    t.add_argument("--resume", type=Path, help="snapshot file to continue from")

    e = sub.add_parser("eval", parents=[common], help="matched-budget evaluation")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--scenes", type=Path, required=True)
    e.add_argument("--methods", help="comma-separated list or 'all'")

    v = sub.add_parser("variance-bench", parents=[common], help="gradient variance against time")
    v.add_argument("--model", type=Path)
    v.add_argument("--scenes", type=Path, help="use the first scene here instead of a generated one")
    return p


def resolve_config(args) -> RunConfig:
    cfg = desk_scale() if args.preset == "desk" else RunConfig()
    if args.config:
        cfg = cfg.with_overrides(json.loads(args.config.read_text()))
    flat = dict(parse_assignment(s) for s in args.set)
    if args.seed is not None:
        flat["master_seed"] = args.seed
    if args.out is not None:
        flat["out_dir"] = str(args.out)
    if args.workers is not None:
        flat["eval.workers"] = args.workers
    if getattr(args, "methods", None):
        flat["eval.methods"] = list(ALL_METHODS) if args.methods == "all" else args.methods.split(",")
    return cfg.with_overrides(flat).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    outputs = Outputs()
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        model = getattr(args, "model", None)
        if model is not None and not model.exists():
            raise FileNotFoundError(f"model file {model} does not exist")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            count = cfg.train_scene_count if args.count is None else args.count
            cmd_generate(cfg, count, args.start, out, outputs)
        elif args.command == "train":
            cmd_train(cfg, args.scenes, out, outputs, args.val_scenes, args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.model, args.scenes, out, outputs)
        else:
            cmd_variance_bench(cfg, args.model, out, outputs, args.scenes)
        cfg.save(outputs.add(out / f"{args.command}_config.json"))
    except (ConfigError, CorruptFile, FileNotFoundError, ValueError, OSError, AssertionError) as exc:
        outputs.remove_all()
        log.error("%s", exc)
        return 1
    except BaseException:
        outputs.remove_all()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
