"""Command-line entry point: ``dagnet {train,eval,ablate,plot,synth,convert}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import engine
from .data import convert_sportvu, generate_synthetic, scene_records, write_plays, write_trajnet
from .engine import RunConfig
from .model import SceneBatch, rollout
from .plotting import plot_ablation, plot_rollout

log = logging.getLogger("dagnet")

# flags that map one-to-one onto RunConfig keys
_CONFIG_FLAGS = ("dataset", "variant", "data", "team", "seed", "obs", "pred", "splits", "lr", "batch_size",
                 "epochs", "max_steps", "synth_scenes", "synth_agents", "coordination", "noise")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--dataset", choices=["sdd", "sports", "synthetic"])
    p.add_argument("--data", help="input data: TrajNet file/directory, play file, or synthetic TrajNet file")
    p.add_argument("--team", choices=["atk", "def"])
    p.add_argument("--variant", choices=["vanilla", "avrnn", "dagnet"])
    p.add_argument("--obs", type=int, help="observed steps")
    p.add_argument("--pred", type=int, help="predicted steps")
    p.add_argument("--splits", help="long-term splits, e.g. 20-10,20-20,20-30")
    p.add_argument("--seed", type=int)
    p.add_argument("--sample", action="store_true", default=None,
                   help="sample latents and displacements instead of taking means")
    p.add_argument("--out", default="runs", help="output directory")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int, help="scenes per batch")
    p.add_argument("--synth-scenes", dest="synth_scenes", type=int)
    p.add_argument("--synth-agents", dest="synth_agents", type=int)
    p.add_argument("--coordination", type=float)
    p.add_argument("--noise", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagnet", description="Goal-conditioned multi-agent trajectory forecasting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model variant")
    _common(p)
    _training(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plots", type=int, default=3, help="number of scenes to draw (0 for none)")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")

    p = sub.add_parser("ablate", help="train and compare all three variants")
    _common(p)
    _training(p)

    p = sub.add_parser("plot", help="draw roll-outs of a checkpoint as SVG")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")

    p = sub.add_parser("synth", help="write a synthetic dataset in TrajNet format")
    _common(p)
    _training(p)

    p = sub.add_parser("convert", help="SportVU game JSON -> play file")
    p.add_argument("input", help="SportVU JSON export")
    p.add_argument("--out", required=True, help="output play file")
    p.add_argument("--subsample", type=int, default=5, help="keep every n-th moment (25 Hz -> 5 Hz)")
    return parser


def _config(args, base: dict | None = None) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in _CONFIG_FLAGS + ("sample",)}
    if base:
        # architecture and grid come from the checkpoint unless overridden
        merged = {**base, **(engine.read_config_file(args.config) if args.config else {})}
        merged.update({k: v for k, v in flags.items() if v is not None})
        merged["splits"] = engine.parse_splits(merged["splits"]) if isinstance(merged.get("splits"), str) \
            else merged.get("splits", ())
        return RunConfig(**merged)
    return engine.build_config(args.config, **flags)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick(splits: tuple, which: str) -> list:
    train, val, test = splits
    return {"train": train, "val": val, "test": test, "all": train + val + test}[which]


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    train, val, _ = engine.load_splits(cfg)
    log.info("training %s on %d scenes (%d validation)", cfg.variant, len(train), len(val))
    (out / "run.cfg").write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))

    def report(rec):
        log.info("epoch %d  train %.4f  val %s", rec["epoch"], rec["train_loss"],
                 "-" if rec["val_loss"] is None else f"{rec['val_loss']:.4f}")
    result = engine.train(cfg, train, val, out, on_epoch=report)
    print(json.dumps({"checkpoint": str(result.checkpoint), "best_val": result.best_val, "steps": result.steps}))
    return 0


def _load(args):
    model, meta = engine.load_model(args.checkpoint, expect_variant=args.variant)
    cfg = _config(args, base=meta.get("run"))
    if cfg.variant != model.config.variant:
        cfg = cfg.replace(variant=model.config.variant)
    if cfg.grid_rows * cfg.grid_cols != model.config.n_cells and model.variant.uses_goals:
        raise ValueError(f"grid {cfg.grid_rows}x{cfg.grid_cols} does not match the checkpoint's "
                         f"{model.config.n_cells} goal cells")
    return model, cfg


def _draw(model, cfg, scenes, out: Path, count: int, prefix: str) -> list[Path]:
    paths = []
    T = cfg.obs + cfg.pred
    for k, scene in enumerate([s for s in scenes if s.T >= T][:count]):
        s = scene.window(0, T)
        batch = SceneBatch.from_scenes([s], cfg.grid_shape, cfg.window)
        rng = np.random.default_rng([cfg.seed, 4, k]) if cfg.sample else None
        pred = rollout(model, batch, cfg.obs, cfg.pred, cfg.graph, deterministic=not cfg.sample, rng=rng)
        grid = batch.grids[0] if model.variant.uses_goals else None
        paths.append(plot_rollout(s.positions, s.mask, cfg.obs, pred, out / f"{prefix}{k:03d}.svg",
                                  grid=grid, title=f"{model.variant.label} — {s.scene_id}"))
    return paths


def cmd_eval(args) -> int:
    model, cfg = _load(args)
    out = _out_dir(args)
    scenes = _pick(engine.load_splits(cfg, engine.horizon(cfg)), args.split)
    report = engine.evaluate(engine.model_predictor(model, cfg), scenes, cfg)
    with open(out / "eval_report.jsonl", "a") as fh:
        fh.write(report.to_json() + "\n")
    (out / "eval_table.tsv").write_text(report.table() + "\n")
    if args.plots:
        _draw(model, cfg, scenes, out, args.plots, "rollout_")
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    train, val, test = engine.load_splits(cfg, engine.horizon(cfg))
    rows = engine.run_ablation(cfg, train, val, test)
    table = engine.ablation_table(rows)
    (out / "ablation.tsv").write_text(table + "\n")
    with open(out / "ablation.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps({"variant": r.variant.value, "agents_interaction": r.interactions,
                                 "future_objective": r.objectives, **r.report.to_dict()}) + "\n")
    plot_ablation(rows, out / "ablation.svg")
    print(table)
    return 0


def cmd_plot(args) -> int:
    model, cfg = _load(args)
    out = _out_dir(args)
    scenes = _pick(engine.load_splits(cfg), args.split)
    for p in _draw(model, cfg, scenes, out, args.scenes, "rollout_"):
        print(p)
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    T = cfg.obs + cfg.pred
    scenes = generate_synthetic(cfg.seed, cfg.synth_scenes, cfg.synth_agents, T, cfg.coordination, cfg.noise)
    records = []
    for k, s in enumerate(scenes):
        records += scene_records(s, frame_offset=k * T)
    path = out / f"synthetic_seed{cfg.seed}.txt"
    write_trajnet(records, path)
    print(path)
    return 0


def cmd_convert(args) -> int:
    plays = convert_sportvu(args.input, args.subsample)
    if not plays:
        raise ValueError(f"{args.input}: no complete 50-step plays found")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_plays(plays, args.out)
    print(f"{len(plays)} plays -> {args.out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot,
            "synth": cmd_synth, "convert": cmd_convert}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"dagnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
