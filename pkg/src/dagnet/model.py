"""Goal-conditioned variational recurrent network with two graph refiners.

Three variants share this code path:

* ``vanilla``: plain VRNN, no goals and no agent graph.
* ``avrnn``: hidden states are refined over the agent graph after each step.
* ``dagnet``: additionally proposes a goal cell per agent, refines the
  proposals over a goal graph, and conditions prior/encoder/decoder on goals.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Scene
from .gaussian import GaussianParams, cross_entropy_categorical, kl_divergence, log_prob
from .goals import SceneGrid, extract_goals
from .graph import GraphRefiner, GraphTopology, build_topology
from .nn import MLP, GRUCell, Module

DISPOSITION_DIM = 4


class ModelVariant(str, enum.Enum):
    VANILLA = "vanilla"
    AVRNN = "avrnn"
    DAGNET = "dagnet"

    @property
    def uses_goals(self) -> bool:
        return self is ModelVariant.DAGNET

    @property
    def uses_hidden_graph(self) -> bool:
        return self is not ModelVariant.VANILLA

    @property
    def label(self) -> str:
        return {"vanilla": "Vanilla VRNN", "avrnn": "A-VRNN", "dagnet": "DAG-Net"}[self.value]


@dataclass
class ModelConfig:
    variant: str = "dagnet"
    n_cells: int = 100
    hidden: int = 64
    latent: int = 32
    features: int = 64
    head_hidden: int = 64
    goal_hidden: int = 64
    graph_hidden: int = 8
    heads: int = 4
    activation: str = "relu"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class GraphOptions:
    """How per-step agent graphs are built."""

    threshold: float = 3.0
    goal_graph: str = "complete"  # or "distance"


class DagNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        self.variant = ModelVariant(config.variant)
        c = config
        rng = np.random.default_rng(c.seed)
        g = c.n_cells if self.variant.uses_goals else 0
        act = c.activation
        self.phi_x = MLP([2, c.features], rng, act)
        self.phi_z = MLP([c.latent, c.features], rng, act)
        self.enc = MLP([c.features + c.hidden + g, c.head_hidden, 2 * c.latent], rng, act, final_activation=False)
        self.prior = MLP([c.hidden + g, c.head_hidden, 2 * c.latent], rng, act, final_activation=False)
        self.dec = MLP([c.features + c.hidden + g, c.head_hidden, 4], rng, act, final_activation=False)
        self.gru = GRUCell(2 * c.features, c.hidden, rng)
        # goal-only modules come last; goal-free variants draw exactly the
        # same initial weights whatever the grid size
        self.hidden_refiner = GraphRefiner(c.hidden, c.graph_hidden, rng, c.heads) \
            if self.variant.uses_hidden_graph else None
        if self.variant.uses_goals:
            self.goal_net = MLP([c.n_cells + DISPOSITION_DIM + c.hidden, c.goal_hidden, c.n_cells], rng, act,
                                final_activation=False)
            self.goal_refiner = GraphRefiner(c.n_cells, c.graph_hidden, rng, c.heads)
        else:
            self.goal_net = None
            self.goal_refiner = None

    # -- per-step building blocks ------------------------------------

    def _cond(self, parts: list, goal) -> Tensor:
        if self.variant.uses_goals:
            parts = parts + [ad._as_tensor(goal)]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def prior_step(self, h_prev: Tensor, goal=None) -> GaussianParams:
        return GaussianParams.from_head(self.prior(self._cond([h_prev], goal)))

    def encode_features(self, x_feat: Tensor, h_prev: Tensor, goal=None) -> GaussianParams:
        return GaussianParams.from_head(self.enc(self._cond([x_feat, h_prev], goal)))

    def encode_step(self, x_t, h_prev: Tensor, goal=None) -> GaussianParams:
        return self.encode_features(self.phi_x(ad._as_tensor(x_t)), h_prev, goal)

    def decode_features(self, z_feat: Tensor, h_prev: Tensor, goal=None) -> GaussianParams:
        return GaussianParams.from_head(self.dec(self._cond([z_feat, h_prev], goal)))

    def decode_step(self, z_t, h_prev: Tensor, goal=None) -> GaussianParams:
        return self.decode_features(self.phi_z(ad._as_tensor(z_t)), h_prev, goal)

    def propose_goal(self, prev_goal, disposition, h_prev: Tensor) -> Tensor:
        x = ad.concat([ad._as_tensor(prev_goal), ad._as_tensor(disposition), h_prev], axis=1)
        return ad.softmax(self.goal_net(x), axis=1)

    def refine_goals(self, proposed: Tensor, topo: GraphTopology) -> Tensor:
        """Refined goals, renormalized onto the simplex."""
        return ad.softmax(self.goal_refiner(proposed, topo), axis=1)

    def recur(self, x_feat: Tensor, z_feat: Tensor, h_prev: Tensor) -> Tensor:
        return self.gru(ad.concat([x_feat, z_feat], axis=1), h_prev)

    def refine_hidden(self, h: Tensor, topo: GraphTopology) -> Tensor:
        if self.hidden_refiner is None:
            return h
        return self.hidden_refiner(h, topo)


# -- batches of scenes ----------------------------------------------------

def regrid(grid: SceneGrid, rows: int, cols: int) -> SceneGrid:
    return SceneGrid(grid.x_min, grid.y_min, grid.x_max, grid.y_max, rows, cols)


@dataclass
class SceneBatch:
    """Several scenes stacked along the agent axis.

    Agent graphs are built per scene and joined as a disjoint union, so no
    edge ever crosses scenes.
    """

    positions: np.ndarray  # [N, T, 2]
    mask: np.ndarray  # [N, T]
    slices: list  # per-scene (start, stop)
    grids: list
    goals: np.ndarray | None = None  # [N, T, K]
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_scenes(cls, scenes: list[Scene], grid_shape: tuple[int, int] | None = None,
                    window: int | None = None) -> "SceneBatch":
        Ts = {s.T for s in scenes}
        if len(Ts) != 1:
            raise ValueError(f"scenes in a batch must share a length, got {sorted(Ts)}")
        slices, grids = [], []
        start = 0
        for s in scenes:
            slices.append((start, start + s.n_agents))
            start += s.n_agents
            grid = s.grid if s.grid is not None else SceneGrid.around(s.positions[s.mask])
            if grid_shape is not None:
                grid = regrid(grid, *grid_shape)
            grids.append(grid)
        batch = cls(
            positions=np.concatenate([s.positions for s in scenes]),
            mask=np.concatenate([s.mask for s in scenes]),
            slices=slices,
            grids=grids,
        )
        if window is not None:
            batch.goals = np.concatenate([
                extract_goals(g, batch.positions[a:b], window) for g, (a, b) in zip(grids, slices)
            ])
        return batch

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def T(self) -> int:
        return self.positions.shape[1]

    def topology(self, positions: np.ndarray, present: np.ndarray, threshold: float) -> GraphTopology:
        return GraphTopology.union([
            build_topology(positions[a:b], threshold, present[a:b]) for a, b in self.slices
        ])

    def cached_topology(self, key, positions, present, threshold) -> GraphTopology:
        k = (key, threshold)
        if k not in self._cache:
            self._cache[k] = self.topology(positions, present, threshold)
        return self._cache[k]

    def cached_disposition(self, t: int) -> np.ndarray:
        k = ("d", t)
        if k not in self._cache:
            self._cache[k] = self.disposition(self.positions[:, t], self.mask[:, t])
        return self._cache[k]

    def disposition(self, positions: np.ndarray, present: np.ndarray) -> np.ndarray:
        """Per agent: mean and max of the *other* present agents' positions.

        Positions are first mapped to [-1, 1] by the scene grid. Agents with
        no present companions get zeros.
        """
        out = np.zeros((self.n_agents, DISPOSITION_DIM))
        for (a, b), grid in zip(self.slices, self.grids):
            q = (positions[a:b] - grid.center) / grid.half_extent
            m = b - a
            others = present[a:b][None, :] & ~np.eye(m, dtype=bool)  # [i, j]
            count = others.sum(axis=1)
            vals = np.where(others[:, :, None], q[None, :, :], 0.0)  # [i, j, 2]
            total = np.sort(np.moveaxis(vals, 1, -1), axis=-1).sum(axis=-1)  # [i, 2]
            mean = total / np.maximum(count, 1)[:, None]
            mx = np.where(others[:, :, None], q[None, :, :], -np.inf).max(axis=1)
            has = count > 0
            out[a:b, :2] = np.where(has[:, None], mean, 0.0)
            out[a:b, 2:] = np.where(has[:, None], mx, 0.0)
        return out


def _col(v: np.ndarray, width: int) -> np.ndarray:
    return np.repeat(v.astype(np.float64)[:, None], width, axis=1)


@dataclass
class StepTrace:
    rec: float
    kl: float
    ce: float


def training_loss(model: DagNet, batch: SceneBatch, rng: np.random.Generator, graph: GraphOptions,
                  ce_weight: float = 1e-2, teacher_forcing: bool = True) -> tuple[Tensor, dict]:
    """Negative goal-augmented ELBO over every step of the batch.

    Summed over time, averaged over agents. Must run inside a ``Tape`` for
    gradients.
    """
    c = model.config
    v = model.variant
    if v.uses_goals and batch.goals is None:
        raise ValueError("dagnet training needs ground-truth goals on the batch")
    N, T = batch.n_agents, batch.T
    P, M = batch.positions, batch.mask
    h = Tensor._wrap(np.zeros((N, c.hidden)))
    prev_goal = np.full((N, c.n_cells), 1.0 / c.n_cells) if v.uses_goals else None
    terms = []
    rec_sum = kl_sum = ce_sum = 0.0
    for t in range(1, T):
        valid = M[:, t] & M[:, t - 1]
        vf = valid.astype(np.float64)
        x_t = np.where(valid[:, None], P[:, t] - P[:, t - 1], 0.0)
        goal = None
        ce = None
        if v.uses_goals:
            disp = batch.cached_disposition(t - 1)
            proposed = model.propose_goal(prev_goal, disp, h)
            gtopo = _goal_topology(batch, ("g", t - 1), P[:, t - 1], M[:, t - 1], graph)
            refined = model.refine_goals(proposed, gtopo)
            ce = cross_entropy_categorical(batch.goals[:, t], refined) * vf
            prev_goal = refined
            goal = batch.goals[:, t] if teacher_forcing else refined
        x_feat = model.phi_x(Tensor._wrap(x_t))
        prior = model.prior_step(h, goal)
        post = model.encode_features(x_feat, h, goal)
        eps = rng.standard_normal((N, c.latent))
        z = post.mean + ad.exp(post.log_var * 0.5) * eps
        z_feat = model.phi_z(z)
        out = model.decode_features(z_feat, h, goal)
        rec = log_prob(out, x_t) * vf
        kl = kl_divergence(post, prior) * vf
        step = ad.reduce_sum(kl - rec)
        if ce is not None:
            step = step + ad.reduce_sum(ce) * ce_weight
            ce_sum += float(ce.data.sum())
        if not np.isfinite(step.data):
            raise FloatingPointError(f"non-finite loss at time-step {t}")
        rec_sum += float(rec.data.sum())
        kl_sum += float(kl.data.sum())
        terms.append(step)
        h_new = model.recur(x_feat, z_feat, h)
        if v.uses_hidden_graph:
            htopo = batch.cached_topology(("h", t), P[:, t], M[:, t], graph.threshold)
            h_new = model.refine_hidden(h_new, htopo)
        keep = _col(valid, c.hidden)
        h = h_new * keep + h * (1.0 - keep) if not valid.all() else h_new
    n_agents = max(int((M[:, 1:] & M[:, :-1]).any(axis=1).sum()), 1)
    loss = ad.reduce_sum(ad.concat([ad.reshape(s, (1,)) for s in terms], axis=0)) * (1.0 / n_agents)
    metrics = {
        "loss": float(loss.data),
        "nll": -rec_sum / n_agents,
        "kl": kl_sum / n_agents,
        "ce": ce_sum / n_agents,
    }
    return loss, metrics


def _goal_topology(batch: SceneBatch, key, positions, present, graph: GraphOptions) -> GraphTopology:
    threshold = np.inf if graph.goal_graph == "complete" else graph.threshold
    if key is None:
        return batch.topology(positions, present, threshold)
    return batch.cached_topology(key, positions, present, threshold)


def rollout(model: DagNet, batch: SceneBatch, T_obs: int, T_pred: int, graph: GraphOptions,
            deterministic: bool = True, rng: np.random.Generator | None = None,
            goal_source: str = "predicted", return_goals: bool = False):
    """Burn in on ``T_obs`` observed positions, then generate ``T_pred`` more.

    Returns absolute positions ``[N, T_pred, 2]``. In deterministic mode the
    latent and the displacement are the distribution means; otherwise both
    are sampled using ``rng``.
    """
    if T_obs < 2:
        raise ValueError(f"need at least 2 observed positions, got T_obs={T_obs}")
    if batch.T < T_obs:
        raise ValueError(f"prefix too short: scenes have {batch.T} steps, T_obs={T_obs}")
    if not deterministic and rng is None:
        raise ValueError("sampling roll-outs need an rng")
    if goal_source == "truth" and batch.goals is None:
        raise ValueError("goal_source='truth' needs ground-truth goals on the batch")
    c = model.config
    v = model.variant
    N = batch.n_agents
    P, M = batch.positions, batch.mask
    h = Tensor._wrap(np.zeros((N, c.hidden)))
    prev_goal = np.full((N, c.n_cells), 1.0 / c.n_cells) if v.uses_goals else None
    goal_trace = []

    def draw(dist: GaussianParams) -> np.ndarray:
        if deterministic:
            return dist.mean.data
        return dist.mean.data + dist.std * rng.standard_normal(dist.mean.shape)

    def goals_for(t, pos_prev, present):
        nonlocal prev_goal
        disp = batch.disposition(pos_prev, present)
        proposed = model.propose_goal(prev_goal, disp, h)
        gtopo = _goal_topology(batch, None, pos_prev, present, graph)
        refined = model.refine_goals(proposed, gtopo).data
        prev_goal = refined
        goal_trace.append(refined)
        if goal_source == "truth" and t < batch.T:
            return batch.goals[:, t]
        return refined

    for t in range(1, T_obs):
        valid = M[:, t] & M[:, t - 1]
        x_t = np.where(valid[:, None], P[:, t] - P[:, t - 1], 0.0)
        goal = goals_for(t, P[:, t - 1], M[:, t - 1]) if v.uses_goals else None
        x_feat = model.phi_x(Tensor._wrap(x_t))
        z = draw(model.encode_features(x_feat, h, goal))
        z_feat = model.phi_z(Tensor._wrap(z))
        h_new = model.recur(x_feat, z_feat, h)
        if v.uses_hidden_graph:
            h_new = model.refine_hidden(h_new, batch.topology(P[:, t], M[:, t], graph.threshold))
        keep = _col(valid, c.hidden)
        h = Tensor._wrap(np.where(keep > 0, h_new.data, h.data))

    present = M[:, T_obs - 1]
    current = P[:, T_obs - 1].copy()
    disps = np.zeros((N, T_pred, 2))
    for k in range(T_pred):
        t = T_obs + k
        goal = goals_for(t, current, present) if v.uses_goals else None
        z = draw(model.prior_step(h, goal))
        z_feat = model.phi_z(Tensor._wrap(z))
        x_hat = draw(model.decode_features(z_feat, h, goal))
        x_hat = np.where(present[:, None], x_hat, 0.0)
        disps[:, k] = x_hat
        current = current + x_hat
        x_feat = model.phi_x(Tensor._wrap(x_hat))
        h_new = model.recur(x_feat, z_feat, h)
        if v.uses_hidden_graph:
            h_new = model.refine_hidden(h_new, batch.topology(current, present, graph.threshold))
        h = h_new
    anchor = P[:, T_obs - 1][:, None, :]
    pred = np.cumsum(np.concatenate([anchor, disps], axis=1), axis=1)[:, 1:]
    if return_goals:
        return pred, (np.stack(goal_trace, axis=1) if goal_trace else None)
    return pred
