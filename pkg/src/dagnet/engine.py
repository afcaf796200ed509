"""Run configuration, training loop, evaluation and the ablation runner."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import (SYNTH_GRID, Scene, assemble_scenes, generate_synthetic, load_plays, load_trajnet,
                   load_trajnet_scenes, normalize_plays, split_scenes, split_team)
from .metrics import ade, fde
from .model import DagNet, GraphOptions, ModelConfig, ModelVariant, SceneBatch, regrid, rollout, training_loss
from .nn import Adam, clip_grad_norm, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

UNITS = {"sdd": "m", "sports": "ft", "synthetic": "units"}
LONG_TERM_SPLITS = ((20, 10), (20, 20), (20, 30))

# per-setting defaults; anything here can be overridden by a config file or flag
PRESETS = {
    "sdd": dict(lr=1e-4, batch_size=16, graph_hidden=4, epochs=500, window=4,
                grid_rows=10, grid_cols=10, threshold=3.0, obs=8, pred=12),
    "sports": dict(lr=1e-3, batch_size=64, graph_hidden=8, epochs=300, window=10,
                   grid_rows=5, grid_cols=10, threshold=5.0, obs=10, pred=40),
    "synthetic": dict(lr=1e-3, batch_size=16, graph_hidden=8, epochs=100, window=4,
                      grid_rows=10, grid_cols=10, threshold=3.0, obs=8, pred=12),
}


def parse_splits(text: str) -> tuple[tuple[int, int], ...]:
    """``"20-10,20-20"`` -> ``((20, 10), (20, 20))``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            a, b = part.split("-")
            out.append((int(a), int(b)))
        except ValueError:
            raise ValueError(f"bad split {part!r}: expected OBS-PRED, e.g. 20-10") from None
    return tuple(out)


def format_splits(splits) -> str:
    return ",".join(f"{a}-{b}" for a, b in splits)


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    variant: str = "dagnet"
    data: str = ""
    team: str = "atk"
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    max_steps: int = 0  # 0 = no cap
    ce_weight: float = 1e-2
    clip: float = 10.0
    grid_rows: int = 10
    grid_cols: int = 10
    window: int = 4
    threshold: float = 3.0
    goal_graph: str = "complete"
    graph_hidden: int = 8
    hidden: int = 64
    latent: int = 32
    obs: int = 8
    pred: int = 12
    splits: tuple = ()
    stride: int = 0  # 0 = non-overlapping windows
    sample: bool = False
    synth_scenes: int = 50
    synth_agents: int = 5
    coordination: float = 1.0
    noise: float = 0.05

    def __post_init__(self):
        if isinstance(self.splits, str):
            self.splits = parse_splits(self.splits)
        self.splits = tuple(tuple(int(v) for v in s) for s in self.splits)
        self.validate()

    def validate(self) -> None:
        if self.dataset not in PRESETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; choose from {sorted(PRESETS)}")
        ModelVariant(self.variant)
        if self.team not in ("atk", "def", "attack", "defense"):
            raise ValueError(f"unknown team {self.team!r}")
        if self.obs < 2 or self.pred < 1:
            raise ValueError(f"need obs >= 2 and pred >= 1, got obs={self.obs}, pred={self.pred}")
        for a, b in self.splits:
            if a < 2 or b < 1:
                raise ValueError(f"split {a}-{b}: need obs >= 2 and pred >= 1")
        if self.window < 1 or self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("window and grid dimensions must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")
        if self.goal_graph not in ("complete", "distance"):
            raise ValueError(f"goal_graph must be 'complete' or 'distance', got {self.goal_graph!r}")

    @classmethod
    def for_dataset(cls, dataset: str, **overrides) -> "RunConfig":
        if dataset not in PRESETS:
            raise ValueError(f"unknown dataset {dataset!r}; choose from {sorted(PRESETS)}")
        return cls(dataset=dataset, **{**PRESETS[dataset], **overrides})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.grid_rows, self.grid_cols)

    @property
    def units(self) -> str:
        return UNITS[self.dataset]

    @property
    def graph(self) -> GraphOptions:
        return GraphOptions(threshold=self.threshold, goal_graph=self.goal_graph)

    def model_config(self) -> ModelConfig:
        return ModelConfig(variant=self.variant, n_cells=self.grid_rows * self.grid_cols, hidden=self.hidden,
                           latent=self.latent, graph_hidden=self.graph_hidden, seed=self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["splits"] = format_splits(self.splits)
        return d


def _coerce(name: str, raw: str, kind):
    if kind in (bool, "bool"):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (tuple, "tuple"):
        return parse_splits(raw)
    return raw


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Values are typed by key."""
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = _coerce(key, value, types[key])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def build_config(path=None, **overrides) -> RunConfig:
    """Dataset preset, then config-file values, then explicit overrides."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    from_file = read_config_file(path) if path else {}
    merged = {**from_file, **overrides}
    dataset = merged.pop("dataset", "synthetic")
    return RunConfig.for_dataset(dataset, **merged)


# -- data -------------------------------------------------------------------

def load_scenes(cfg: RunConfig, T: int | None = None) -> list[Scene]:
    """All scenes for the configured dataset, each at least ``T`` steps long."""
    T = cfg.obs + cfg.pred if T is None else T
    stride = cfg.stride or None
    if cfg.dataset == "sdd":
        if not cfg.data:
            raise ValueError("the sdd dataset needs a data path (file or directory of TrajNet .txt files)")
        return load_trajnet_scenes(cfg.data, T, 0, stride, cfg.grid_shape)
    if cfg.dataset == "sports":
        if not cfg.data:
            raise ValueError("the sports dataset needs a data path (play file)")
        plays = normalize_plays(load_plays(cfg.data))
        return [split_team(p, cfg.team) for p in plays]
    if cfg.data:
        records = load_trajnet(cfg.data)
        return assemble_scenes(records, T, 0, stride, kind="synthetic", grid=SYNTH_GRID, name=Path(cfg.data).stem)
    return generate_synthetic(cfg.seed, cfg.synth_scenes, cfg.synth_agents, T, cfg.coordination, cfg.noise)


def load_splits(cfg: RunConfig, T: int | None = None) -> tuple[list, list, list]:
    scenes = load_scenes(cfg, T)
    if not scenes:
        raise ValueError(f"no usable scenes in the {cfg.dataset} data")
    return split_scenes(scenes, cfg.seed)


def horizon(cfg: RunConfig) -> int:
    """Steps needed to cover the main evaluation and every long-term split."""
    return max([cfg.obs + cfg.pred] + [a + b for a, b in cfg.splits])


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    model: DagNet
    curve: list  # one record per epoch
    best_val: float
    checkpoint: Path | None
    steps: int


def _batches(scenes: list, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(scenes)) if rng is None else rng.permutation(len(scenes))
    for i in range(0, len(scenes), batch_size):
        yield tuple(int(k) for k in order[i:i + batch_size])


class _BatchCache:
    """Re-uses prepared batches (goals, graphs) when the same scenes recur."""

    def __init__(self, scenes: list, cfg: RunConfig):
        self.scenes = scenes
        self.cfg = cfg
        self._store: dict = {}

    def get(self, idx: tuple) -> SceneBatch:
        if idx not in self._store:
            if len(self._store) > 64:
                self._store.clear()
            chosen = [self.scenes[i] for i in idx]
            self._store[idx] = SceneBatch.from_scenes(chosen, self.cfg.grid_shape, self.cfg.window)
        return self._store[idx]


def validation_loss(model: DagNet, scenes: list, cfg: RunConfig) -> float:
    """Mean loss over the scenes with a fixed noise stream, so it is comparable
    across epochs."""
    if not scenes:
        return float("nan")
    rng = np.random.default_rng([cfg.seed, 2])
    total, count = 0.0, 0
    for idx in _batches(scenes, cfg.batch_size, None):
        batch = SceneBatch.from_scenes([scenes[i] for i in idx], cfg.grid_shape, cfg.window)
        loss, _ = training_loss(model, batch, rng, cfg.graph, cfg.ce_weight)
        total += loss.item() * len(idx)
        count += len(idx)
    return total / count


def checkpoint_meta(model: DagNet, cfg: RunConfig, **extra) -> dict:
    return {"model": model.config.to_dict(), "run": cfg.to_dict(), **extra}


def train(cfg: RunConfig, train_scenes: list, val_scenes: list | None = None, out_dir=None,
          on_epoch: Callable[[dict], None] | None = None, model: DagNet | None = None) -> TrainResult:
    """Adam on the sequence loss; keeps the weights with the best validation loss.

    With ``out_dir`` set, writes ``train_log.jsonl`` (one record per epoch) and
    ``best.ckpt``. Without validation scenes the training loss picks the best
    epoch.
    """
    if not train_scenes:
        raise ValueError("train: no training scenes")
    T = cfg.obs + cfg.pred
    train_scenes = [s.window(0, T) if s.T > T else s for s in train_scenes]
    val_scenes = [s.window(0, T) if s.T > T else s for s in (val_scenes or [])]
    model = model or DagNet(cfg.model_config())
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    noise_rng = np.random.default_rng([cfg.seed, 1])
    cache = _BatchCache(train_scenes, cfg)
    out = Path(out_dir) if out_dir else None
    log_fh = None
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
        ckpt = out / "best.ckpt"
    best = float("inf")
    best_state = model.state_dict()
    curve = []
    steps = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            seen = []
            for idx in _batches(train_scenes, cfg.batch_size, shuffle_rng):
                batch = cache.get(idx)
                with ad.Tape():
                    try:
                        loss, metrics = training_loss(model, batch, noise_rng, cfg.graph, cfg.ce_weight)
                    except FloatingPointError as exc:
                        raise FloatingPointError(f"epoch {epoch}, step {steps + 1}: {exc}") from None
                opt.zero_grad()
                ad.backward(loss)
                clip_grad_norm(model.parameters(), cfg.clip)
                opt.step()
                steps += 1
                seen.append(metrics)
                if cfg.max_steps and steps >= cfg.max_steps:
                    break
            mean = {k: float(np.mean([m[k] for m in seen])) for k in seen[0]}
            val = validation_loss(model, val_scenes, cfg) if val_scenes else mean["loss"]
            record = {"epoch": epoch, "step": steps, "train_loss": mean["loss"],
                      "val_loss": val if val_scenes else None,
                      "nll": mean["nll"], "kl": mean["kl"], "ce": mean["ce"]}
            curve.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(record)
            if val < best:
                best = val
                best_state = model.state_dict()
                if ckpt is not None:
                    save_checkpoint(ckpt, best_state, checkpoint_meta(model, cfg, epoch=epoch, val_loss=val))
            if cfg.max_steps and steps >= cfg.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    return TrainResult(model, curve, best, ckpt, steps)


def load_model(path, expect_variant: str | None = None) -> tuple[DagNet, dict]:
    """Rebuild a model from a checkpoint written by :func:`train`."""
    state, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ValueError(f"{path}: checkpoint has no model configuration")
    config = ModelConfig.from_dict(meta["model"])
    if expect_variant is not None and ModelVariant(expect_variant) != ModelVariant(config.variant):
        raise ValueError(f"{path}: checkpoint holds a {config.variant} model, expected {expect_variant}")
    model = DagNet(config)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: checkpoint does not match the {config.variant} architecture: {exc}") from None
    return model, meta


# -- evaluation -------------------------------------------------------------

Predictor = Callable[[SceneBatch, int, int], np.ndarray]


@dataclass
class SplitResult:
    obs: int
    pred: int
    ade: float
    fde: float
    n_scenes: int
    n_agents: int

    @property
    def key(self) -> str:
        return f"{self.obs}-{self.pred}"


@dataclass
class EvalReport:
    ade: float
    fde: float
    units: str
    n_scenes: int
    n_agents: int
    obs: int
    pred: int
    variant: str = ""
    dataset: str = ""
    splits: dict = field(default_factory=dict)  # "20-10" -> SplitResult

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["splits"] = {k: dataclasses.asdict(v) for k, v in self.splits.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self, sep: str = "\t") -> str:
        rows = [sep.join(["obs", "pred", f"ade_{self.units}", f"fde_{self.units}", "n_scenes", "n_agents"])]
        for r in [SplitResult(self.obs, self.pred, self.ade, self.fde, self.n_scenes, self.n_agents),
                  *self.splits.values()]:
            rows.append(sep.join([str(r.obs), str(r.pred), f"{r.ade:.6f}", f"{r.fde:.6f}",
                                  str(r.n_scenes), str(r.n_agents)]))
        return "\n".join(rows)


def model_predictor(model: DagNet, cfg: RunConfig) -> Predictor:
    """Roll-outs from ``model``; sampling draws from a stream seeded by the config."""
    rng = np.random.default_rng([cfg.seed, 3]) if cfg.sample else None

    def predict(batch: SceneBatch, obs: int, pred: int) -> np.ndarray:
        return rollout(model, batch, obs, pred, cfg.graph, deterministic=not cfg.sample, rng=rng)
    return predict


def evaluate_split(predict: Predictor, scenes: list, cfg: RunConfig, obs: int, pred: int) -> SplitResult:
    """Burn in on ``obs`` steps, predict ``pred``; errors averaged over every
    valid (agent, step) of every scene."""
    T = obs + pred
    usable = [s.window(0, T) for s in scenes if s.T >= T]
    if not usable:
        raise ValueError(f"no scene is long enough for a {obs}-{pred} split")
    preds, truths, masks = [], [], []
    for i in range(0, len(usable), cfg.batch_size):
        chunk = usable[i:i + cfg.batch_size]
        batch = SceneBatch.from_scenes(chunk, cfg.grid_shape, cfg.window)
        p = np.asarray(predict(batch, obs, pred), dtype=np.float64)
        if p.shape != (batch.n_agents, pred, 2):
            raise ValueError(f"predictor returned {p.shape}, expected {(batch.n_agents, pred, 2)}")
        preds.append(p)
        truths.append(batch.positions[:, obs:])
        masks.append(batch.mask[:, obs:] & batch.mask[:, obs - 1:obs])
    P, Y, M = np.concatenate(preds), np.concatenate(truths), np.concatenate(masks)
    return SplitResult(obs, pred, ade(P, Y, M), fde(P, Y, M), len(usable), int(M.any(axis=1).sum()))


def evaluate(predict: Predictor, scenes: list, cfg: RunConfig, variant: str = "") -> EvalReport:
    """Main (obs, pred) evaluation plus one entry per configured long-term split."""
    main = evaluate_split(predict, scenes, cfg, cfg.obs, cfg.pred)
    splits = {}
    for a, b in cfg.splits:
        r = evaluate_split(predict, scenes, cfg, a, b)
        splits[r.key] = r
    return EvalReport(main.ade, main.fde, cfg.units, main.n_scenes, main.n_agents, cfg.obs, cfg.pred,
                      variant or cfg.variant, cfg.dataset, splits)


def truth_predictor(batch: SceneBatch, obs: int, pred: int) -> np.ndarray:
    """Returns the ground truth itself; useful to check the evaluation plumbing."""
    return batch.positions[:, obs:obs + pred].copy()


# -- ablation ---------------------------------------------------------------

ABLATION_ROWS = (
    (ModelVariant.VANILLA, False, False),
    (ModelVariant.AVRNN, True, False),
    (ModelVariant.DAGNET, True, True),
)


@dataclass
class AblationRow:
    variant: ModelVariant
    interactions: bool
    objectives: bool
    report: EvalReport


def run_ablation(cfg: RunConfig, train_scenes: list, val_scenes: list, test_scenes: list,
                 on_row: Callable[[AblationRow], None] | None = None) -> list[AblationRow]:
    """Train and test the three variants with identical data and seeds."""
    rows = []
    for variant, inter, goals in ABLATION_ROWS:
        vcfg = cfg.replace(variant=variant.value)
        t0 = time.perf_counter()
        result = train(vcfg, train_scenes, val_scenes)
        report = evaluate(model_predictor(result.model, vcfg), test_scenes, vcfg, variant.value)
        log.info("%s: ade %.4f fde %.4f (%.1fs)", variant.label, report.ade, report.fde, time.perf_counter() - t0)
        row = AblationRow(variant, inter, goals, report)
        rows.append(row)
        if on_row:
            on_row(row)
    return rows


def ablation_table(rows: list[AblationRow], sep: str = "\t") -> str:
    mark = {True: "✓", False: "✗"}
    units = rows[0].report.units if rows else ""
    lines = [sep.join(["model", "agents_interaction", "future_objective", f"ade_{units}", f"fde_{units}"])]
    for r in rows:
        lines.append(sep.join([r.variant.label, mark[r.interactions], mark[r.objectives],
                               f"{r.report.ade:.6f}", f"{r.report.fde:.6f}"]))
    return "\n".join(lines)
