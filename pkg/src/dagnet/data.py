"""Trajectory data: TrajNet text files, basketball plays, synthetic scenes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .goals import COURT_GRID, SceneGrid, position_to_cell

log = logging.getLogger(__name__)

SDD_FRAME_RATE = 2.5
SPORTS_FRAME_RATE = 5.0
PLAY_STEPS = 50
PLAY_ENTITIES = 11  # 5 attackers, 5 defenders, ball
COURT_LENGTH = 94.0
COURT_WIDTH = 50.0


class TrackRecord(NamedTuple):
    frame_id: int
    agent_id: int
    x: float
    y: float


@dataclass
class Scene:
    positions: np.ndarray  # [n, T, 2], zeros where masked
    mask: np.ndarray  # [n, T] bool
    kind: str = "synthetic"
    frame_rate: float = SDD_FRAME_RATE
    grid: SceneGrid | None = None
    scene_id: str = ""
    agent_ids: list = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def T(self) -> int:
        return self.positions.shape[1]

    def window(self, start: int, stop: int) -> "Scene":
        return replace(self, positions=self.positions[:, start:stop].copy(), mask=self.mask[:, start:stop].copy())


# --- TrajNet / SDD ------------------------------------------------------

def _int_field(token: str, path, lineno: int, what: str) -> int:
    try:
        value = float(token)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: non-numeric {what} {token!r}") from None
    if not value.is_integer():
        raise ValueError(f"{path}:{lineno}: {what} {token!r} is not an integer")
    return int(value)


def load_trajnet(path) -> list[TrackRecord]:
    """Parse whitespace-separated ``frame agent x y`` lines."""
    records: list[TrackRecord] = []
    seen: set[tuple[int, int]] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            frame = _int_field(parts[0], path, lineno, "frame id")
            agent = _int_field(parts[1], path, lineno, "agent id")
            try:
                x, y = float(parts[2]), float(parts[3])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric coordinate in {line.strip()!r}") from None
            if (frame, agent) in seen:
                raise ValueError(f"{path}:{lineno}: duplicate record for frame {frame}, agent {agent}")
            seen.add((frame, agent))
            records.append(TrackRecord(frame, agent, x, y))
    return records


def write_trajnet(records: Iterable[TrackRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.frame_id} {r.agent_id} {r.x!r} {r.y!r}\n")


def scene_records(scene: Scene, frame_offset: int = 0, frame_step: int = 1) -> list[TrackRecord]:
    ids = scene.agent_ids or list(range(scene.n_agents))
    out = []
    for t in range(scene.T):
        for i, aid in enumerate(ids):
            if scene.mask[i, t]:
                x, y = scene.positions[i, t]
                out.append(TrackRecord(frame_offset + t * frame_step, int(aid), float(x), float(y)))
    return out


def assemble_scenes(records: list[TrackRecord], T_obs: int, T_pred: int, stride: int | None = None,
                    kind: str = "sdd", frame_rate: float = SDD_FRAME_RATE,
                    grid: SceneGrid | None = None, name: str = "") -> list[Scene]:
    """Cut records into fixed-length multi-agent windows of ``T_obs + T_pred`` frames.

    Agents absent for part of a window are masked at those steps. Windows
    without any fully present agent are dropped.
    """
    T = T_obs + T_pred
    stride = T if stride is None else stride
    if T < 1 or stride < 1:
        raise ValueError(f"window length and stride must be positive (T={T}, stride={stride})")
    if not records:
        return []
    frames = np.array(sorted({r.frame_id for r in records}), dtype=np.int64)
    step = int(np.gcd.reduce(np.diff(frames))) if len(frames) > 1 else 1
    f0 = int(frames[0])
    n_frames = (int(frames[-1]) - f0) // step + 1
    agents = sorted({r.agent_id for r in records})
    col = {a: i for i, a in enumerate(agents)}
    pos = np.zeros((len(agents), n_frames, 2))
    present = np.zeros((len(agents), n_frames), dtype=bool)
    for r in records:
        k = (r.frame_id - f0) // step
        pos[col[r.agent_id], k] = (r.x, r.y)
        present[col[r.agent_id], k] = True
    if grid is None:
        pts = np.array([(r.x, r.y) for r in records])
        grid = SceneGrid.around(pts)

    scenes = []
    for start in range(0, n_frames - T + 1, stride):
        m = present[:, start:start + T]
        rows = np.flatnonzero(m.any(axis=1))
        if not m[rows].all(axis=1).any():
            continue
        scenes.append(Scene(
            positions=np.where(m[rows, :, None], pos[rows, start:start + T], 0.0),
            mask=m[rows].copy(),
            kind=kind,
            frame_rate=frame_rate,
            grid=grid,
            scene_id=f"{name}@{f0 + start * step}",
            agent_ids=[agents[i] for i in rows],
        ))
    return scenes


def load_trajnet_scenes(paths, T_obs: int, T_pred: int, stride: int | None = None,
                        grid_shape: tuple[int, int] = (10, 10)) -> list[Scene]:
    """Scenes from one or more TrajNet files, each file getting its own grid."""
    if isinstance(paths, (str, Path)):
        p = Path(paths)
        paths = sorted(p.glob("*.txt")) if p.is_dir() else [p]
    scenes = []
    for path in paths:
        records = load_trajnet(path)
        if not records:
            continue
        pts = np.array([(r.x, r.y) for r in records])
        grid = SceneGrid.around(pts, rows=grid_shape[0], cols=grid_shape[1])
        scenes += assemble_scenes(records, T_obs, T_pred, stride, grid=grid, name=Path(path).stem)
    return scenes


def split_scenes(scenes: list, seed: int, ratios=(0.7, 0.1, 0.2)) -> tuple[list, list, list]:
    """Disjoint train/val/test split by scene, deterministic in ``seed``."""
    n = len(scenes)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    pick = lambda idx: [scenes[i] for i in sorted(idx)]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


# --- basketball plays ---------------------------------------------------

@dataclass
class PlayRecord:
    play_id: str
    players: np.ndarray  # [50, 10, 2]; columns 0-4 attack, 5-9 defense
    ball: np.ndarray  # [50, 3]

    def __post_init__(self):
        if self.players.shape != (PLAY_STEPS, 10, 2):
            raise ValueError(f"play {self.play_id}: players must be [50, 10, 2], got {self.players.shape}")


def load_plays(path) -> list[PlayRecord]:
    """One play per line: ``play_id`` then 50 x 11 x (x, y, z) numbers.

    Entity order within a step is attackers 1-5, defenders 1-5, ball.
    """
    width = PLAY_STEPS * PLAY_ENTITIES * 3
    plays = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != width + 1:
                raise ValueError(f"{path}:{lineno}: expected {width + 1} fields, got {len(parts)}")
            try:
                vals = np.array(parts[1:], dtype=np.float64).reshape(PLAY_STEPS, PLAY_ENTITIES, 3)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value in play {parts[0]!r}") from None
            plays.append(PlayRecord(parts[0], vals[:, :10, :2].copy(), vals[:, 10].copy()))
    return plays


def write_plays(plays: Iterable[PlayRecord], path) -> None:
    with open(path, "w") as fh:
        for p in plays:
            block = np.zeros((PLAY_STEPS, PLAY_ENTITIES, 3))
            block[:, :10, :2] = p.players
            block[:, 10] = p.ball
            fh.write(p.play_id + " " + " ".join(repr(float(v)) for v in block.reshape(-1)) + "\n")


def normalize_plays(plays: list[PlayRecord]) -> list[PlayRecord]:
    """Center raw court coordinates and mirror plays so attack moves toward +x."""
    center = np.array([COURT_LENGTH / 2, COURT_WIDTH / 2])
    out = []
    for p in plays:
        players = p.players - center
        ball = p.ball.copy()
        ball[:, :2] -= center
        if players[:, :5, 0].mean() < 0:
            players = players * np.array([-1.0, 1.0])
            ball[:, 0] = -ball[:, 0]
        out.append(PlayRecord(p.play_id, players, ball))
    return out


def split_team(play: PlayRecord, team: str) -> Scene:
    team = {"atk": "attack", "def": "defense"}.get(team, team)
    if team == "attack":
        cols = slice(0, 5)
    elif team == "defense":
        cols = slice(5, 10)
    else:
        raise ValueError(f"unknown team {team!r}")
    positions = np.ascontiguousarray(play.players[:, cols].transpose(1, 0, 2))
    return Scene(
        positions=positions,
        mask=np.ones(positions.shape[:2], dtype=bool),
        kind="sports",
        frame_rate=SPORTS_FRAME_RATE,
        grid=COURT_GRID,
        scene_id=f"{play.play_id}:{team}",
        agent_ids=list(range(cols.start, cols.stop)),
    )


def convert_sportvu(path, subsample: int = 5) -> list[PlayRecord]:
    """Cut a SportVU game JSON (25 Hz moments) into 50-step plays at 5 Hz.

    Each ``moment[5]`` lists ``[team_id, player_id, x, y, z]`` with the ball
    as ``team_id == -1``. Blocks are cut wherever the set of players changes.
    The attacking team is taken to be the one whose players stay closer to
    the ball over the block.
    """
    data = json.loads(Path(path).read_text())
    plays = []
    for event in data.get("events", []):
        eid = event.get("eventId", event.get("eventid", "?"))
        frames, keys = [], []
        for moment in event.get("moments", [])[::subsample]:
            ents = moment[5]
            ball = [e for e in ents if e[0] == -1]
            players = sorted((e for e in ents if e[0] != -1), key=lambda e: (e[0], e[1]))
            if len(ball) != 1 or len(players) != 10:
                continue
            keys.append(tuple((e[0], e[1]) for e in players))
            frames.append((np.array([e[2:5] for e in players], dtype=np.float64),
                           np.array(ball[0][2:5], dtype=np.float64)))
        start = 0
        block = 0
        while start + PLAY_STEPS <= len(frames):
            if len(set(keys[start:start + PLAY_STEPS])) != 1:
                start += 1
                continue
            chunk = frames[start:start + PLAY_STEPS]
            xyz = np.stack([c[0] for c in chunk])  # [50, 10, 3]
            ball = np.stack([c[1] for c in chunk])
            teams = [k[0] for k in keys[start]]
            team_ids = sorted(set(teams))
            if len(team_ids) != 2:
                start += PLAY_STEPS
                continue
            dist = np.linalg.norm(xyz[:, :, :2] - ball[:, None, :2], axis=-1).mean(axis=0)
            cols = {t: [i for i, tt in enumerate(teams) if tt == t] for t in team_ids}
            atk = min(team_ids, key=lambda t: dist[cols[t]].mean())
            dfn = [t for t in team_ids if t != atk][0]
            order = cols[atk] + cols[dfn]
            plays.append(PlayRecord(f"{data.get('gameid', 'game')}-{eid}-{block}",
                                    xyz[:, order, :2].copy(), ball))
            block += 1
            start += PLAY_STEPS
    return plays


# --- synthetic coordinated agents --------------------------------------

SYNTH_GRID = SceneGrid(0.0, 0.0, 10.0, 10.0, rows=10, cols=10)


def _cell_bounds(grid: SceneGrid, cell: int) -> tuple[np.ndarray, np.ndarray]:
    row, col = divmod(int(cell), grid.cols)
    w = (grid.x_max - grid.x_min) / grid.cols
    h = (grid.y_max - grid.y_min) / grid.rows
    lo = np.array([grid.x_min + col * w, grid.y_min + row * h])
    return lo, lo + np.array([w, h])


def generate_synthetic(seed: int, n_scenes: int, n_agents: int, T: int, coordination: float = 1.0,
                       noise: float = 0.05, grid: SceneGrid = SYNTH_GRID,
                       travel: tuple[float, float] = (2.0, 5.0),
                       arrival: tuple[float, float] = (0.6, 1.0)) -> list[Scene]:
    """Agents heading for goal cells, optionally shared by the whole group.

    Each agent walks in a straight line from its start to a point inside its
    goal cell, arriving at a step drawn uniformly from the ``arrival``
    fraction of the window, then stays put. With probability ``coordination`` the goal is the group goal,
    otherwise an individually drawn cell. ``noise`` scales a smooth
    sideways perturbation that vanishes at both ends of the walk.
    """
    if n_scenes < 1 or n_agents < 1 or T < 2:
        raise ValueError("n_scenes, n_agents must be >= 1 and T >= 2")
    rng = np.random.default_rng(seed)
    lo_w = np.array([grid.x_min, grid.y_min])
    hi_w = np.array([grid.x_max, grid.y_max])
    t = np.arange(T, dtype=np.float64)
    scenes = []
    for s in range(n_scenes):
        team_cell = int(rng.integers(grid.K))
        pos = np.zeros((n_agents, T, 2))
        for i in range(n_agents):
            cell = team_cell if rng.random() < coordination else int(rng.integers(grid.K))
            lo, hi = _cell_bounds(grid, cell)
            pad = 0.1 * (hi - lo)
            target = rng.uniform(lo + pad, hi - pad)
            angle = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(*travel)
            start = np.clip(target + dist * np.array([np.cos(angle), np.sin(angle)]), lo_w, hi_w)
            arrive = int(rng.integers(int(np.ceil(arrival[0] * (T - 1))), int(arrival[1] * (T - 1)) + 1))
            frac = np.minimum(t / max(arrive, 1), 1.0)[:, None]
            path = start + (target - start) * frac
            # two sine harmonics along the walk: smooth, zero at both ends
            coef = rng.normal(0.0, 1.0, size=(2, 2))
            phase = np.pi * frac
            path += noise * (np.sin(phase) * coef[0] + np.sin(2 * phase) * coef[1])
            path[frac[:, 0] >= 1.0] = target
            pos[i] = path
        scenes.append(Scene(
            positions=pos,
            mask=np.ones((n_agents, T), dtype=bool),
            kind="synthetic",
            frame_rate=SDD_FRAME_RATE,
            grid=grid,
            scene_id=f"synth-{seed}-{s}",
            agent_ids=list(range(s * n_agents, (s + 1) * n_agents)),
        ))
    return scenes


def final_cells(scene: Scene) -> np.ndarray:
    return position_to_cell(scene.grid, scene.positions[:, -1])
