"""Distance-based agent graphs and multi-head graph attention.

Neighbourhood sums (softmax denominators and attention-weighted aggregates)
are taken over value-sorted terms, which makes every node's output a function
of the *set* of its neighbours. Relabeling the nodes therefore permutes the
outputs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import ACTIVATIONS, Linear, Module, xavier_uniform


@dataclass
class GraphTopology:
    adjacency: np.ndarray  # [n, n] bool, symmetric, self-loops on the diagonal
    distances: np.ndarray  # [n, n]
    _table: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    def neighbor_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded neighbour indices ``[n, D]`` and their validity mask.

        Padding points at index ``n``, one past the last node.
        """
        if self._table is None:
            adj = self.adjacency
            n = adj.shape[0]
            deg = adj.sum(axis=1)
            if np.any(deg == 0):
                raise AssertionError("graph node without neighbours (missing self-loop)")
            D = int(deg.max())
            order = np.argsort(~adj, axis=1, kind="stable")[:, :D]
            valid = np.arange(D)[None, :] < deg[:, None]
            self._table = (np.where(valid, order, n), valid)
        return self._table

    @classmethod
    def union(cls, topos: list["GraphTopology"]) -> "GraphTopology":
        """Disjoint union (block-diagonal adjacency) of several graphs."""
        tables = [t.neighbor_table() for t in topos]
        n = sum(t.num_nodes for t in topos)
        D = max(valid.shape[1] for _, valid in tables)
        adj = np.zeros((n, n), dtype=bool)
        dist = np.full((n, n), np.inf)
        nbr = np.full((n, D), n, dtype=np.int64)
        valid = np.zeros((n, D), dtype=bool)
        start = 0
        for t, (nb, va) in zip(topos, tables):
            stop = start + t.num_nodes
            adj[start:stop, start:stop] = t.adjacency
            dist[start:stop, start:stop] = t.distances
            nbr[start:stop, :va.shape[1]] = np.where(va, nb + start, n)
            valid[start:stop, :va.shape[1]] = va
            start = stop
        return cls(adj, dist, (nbr, valid))


def build_topology(positions, threshold: float, mask=None) -> GraphTopology:
    """Edges join present agents within ``threshold`` of each other.

    Every node keeps its self-loop; absent agents have no other edges.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ShapeError(f"positions must be [n, 2], got {pos.shape}")
    n = pos.shape[0]
    if n == 0:
        raise ValueError("cannot build a graph over zero agents")
    if threshold < 0:
        raise ValueError(f"negative adjacency threshold {threshold}")
    present = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    adj = (dist <= threshold) & present[:, None] & present[None, :]
    adj |= np.eye(n, dtype=bool)
    return GraphTopology(adj, dist)


def complete_topology(n: int, mask=None) -> GraphTopology:
    return build_topology(np.zeros((n, 2)), np.inf, mask)


def _sorted_sum(x: np.ndarray) -> np.ndarray:
    return np.sort(x, axis=-1).sum(axis=-1)


def graph_attention(wh: Tensor, a_src: Tensor, a_dst: Tensor, topo: GraphTopology,
                    slope: float = 0.2) -> tuple[Tensor, np.ndarray]:
    """Attention-weighted neighbour aggregation for every head.

    ``wh`` is the projected node features ``[n, H, F]``; ``a_src``/``a_dst``
    ``[H, F]`` are the two halves of each head's scoring vector. Returns the
    aggregate ``[n, H, F]`` and the padded attention weights ``[n, D, H]``
    aligned with ``topo.neighbor_table()``.
    """
    n, H, F = wh.shape
    if a_src.shape != (H, F) or a_dst.shape != (H, F):
        raise ShapeError(f"attention vectors {a_src.shape}/{a_dst.shape} do not match heads {(H, F)}")
    if topo.num_nodes != n:
        raise ShapeError(f"topology has {topo.num_nodes} nodes, features have {n}")
    nbr, valid = topo.neighbor_table()
    W = wh.data
    Wp = np.concatenate([W, np.zeros((1, H, F))])  # padded row for index n
    s = (W * a_src.data).sum(axis=-1)  # [n, H]
    d = (W * a_dst.data).sum(axis=-1)
    dp = np.concatenate([d, np.zeros((1, H))])
    pre = s[:, None, :] + dp[nbr]  # [n, D, H]
    score = np.where(pre > 0, pre, slope * pre)
    score = np.where(valid[:, :, None], score, -np.inf)
    ex = np.exp(score - score.max(axis=1, keepdims=True))
    denom = _sorted_sum(np.moveaxis(ex, 1, -1))  # [n, H]
    alpha = ex / denom[:, None, :]  # [n, D, H], exactly 0 on padding
    gathered = Wp[nbr]  # [n, D, H, F]
    terms = alpha[..., None] * gathered
    out = _sorted_sum(np.moveaxis(terms, 1, -1))  # [n, H, F]

    rows = np.repeat(np.arange(n), nbr.shape[1])
    cols = nbr.reshape(-1)

    def scatter(vals: np.ndarray) -> np.ndarray:
        # [n, D, H] -> dense [H, n, n]; (row, neighbour) pairs are unique
        dense = np.zeros((H, n, n + 1))
        dense[:, rows, cols] = vals.reshape(-1, H).T
        return dense[:, :, :n]

    def bw(g):
        # g: [n, H, F]
        dalpha = (g[:, None, :, :] * gathered).sum(axis=-1)  # [n, D, H]
        A = scatter(alpha)
        dW = np.matmul(A.transpose(0, 2, 1), g.transpose(1, 0, 2)).transpose(1, 0, 2)
        dscore = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dpre = np.where(pre > 0, dscore, slope * dscore) * valid[:, :, None]
        ds = dpre.sum(axis=1)  # [n, H]
        dd = scatter(dpre).sum(axis=1).T  # [n, H]
        dW += ds[..., None] * a_src.data + dd[..., None] * a_dst.data
        da_src = (ds[..., None] * W).sum(axis=0)
        da_dst = (dd[..., None] * W).sum(axis=0)
        return dW, da_src, da_dst

    return ad.custom_op(out, (wh, a_src, a_dst), bw, "graph_attention"), alpha


def dense_attention(alpha: np.ndarray, topo: GraphTopology) -> np.ndarray:
    """Scatter padded attention weights into a dense ``[H, n, n]`` array."""
    nbr, _ = topo.neighbor_table()
    n, D, H = alpha.shape
    dense = np.zeros((H, n, n + 1))
    rows = np.repeat(np.arange(n), D)
    for h in range(H):
        dense[h, rows, nbr.reshape(-1)] = alpha[:, :, h].reshape(-1)
    return dense[:, :, :n]


class GATLayer(Module):
    """Multi-head graph attention layer.

    Heads are concatenated (``merge="concat"``) or averaged (``merge="mean"``),
    then ``activation`` is applied.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 heads: int = 4, merge: str = "concat", activation: str = "elu", slope: float = 0.2):
        if merge not in ("concat", "mean"):
            raise ValueError(f"unknown head merge {merge!r}")
        self.in_features = in_features
        self.out_features = out_features
        self.heads = heads
        self.merge = merge
        self.activation = activation
        self.slope = slope
        self.weight = Tensor(xavier_uniform(rng, heads * out_features, in_features), requires_grad=True)
        a = np.stack([xavier_uniform(rng, 1, 2 * out_features)[0] for _ in range(heads)])
        self.att_src = Tensor(a[:, :out_features].copy(), requires_grad=True)
        self.att_dst = Tensor(a[:, out_features:].copy(), requires_grad=True)
        self._last: tuple | None = None

    @property
    def last_attention(self) -> np.ndarray | None:
        """Dense ``[H, n, n]`` attention from the most recent call."""
        return None if self._last is None else dense_attention(*self._last)

    @property
    def output_size(self) -> int:
        return self.heads * self.out_features if self.merge == "concat" else self.out_features

    def __call__(self, x: Tensor, topo: GraphTopology) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"gat: features {x.shape} do not match input size {self.in_features}")
        n = x.shape[0]
        wh = ad.reshape(ad.linear(x, self.weight), (n, self.heads, self.out_features))
        agg, alpha = graph_attention(wh, self.att_src, self.att_dst, topo, self.slope)
        self._last = (alpha, topo)
        if self.merge == "concat":
            merged = ad.reshape(agg, (n, self.heads * self.out_features))
        else:
            merged = ad.reduce_mean(agg, axis=1)
        return ACTIVATIONS[self.activation](merged)


class GraphRefiner(Module):
    """Two attention layers, then a linear map of ``[features ∥ distilled]``
    back to the feature size."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, heads: int = 4):
        self.dim = dim
        self.gat = [
            GATLayer(dim, hidden, rng, heads=heads, merge="concat", activation="elu"),
            GATLayer(heads * hidden, dim, rng, heads=heads, merge="mean", activation="identity"),
        ]
        self.projection = Linear(2 * dim, dim, rng)

    def distill(self, features: Tensor, topo: GraphTopology) -> Tensor:
        x = features
        for layer in self.gat:
            x = layer(x, topo)
        return x

    def __call__(self, features: Tensor, topo: GraphTopology) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ShapeError(f"refine: features {features.shape} do not match dimension {self.dim}")
        distilled = self.distill(features, topo)
        return self.projection(ad.concat([features, distilled], axis=1))

    def set_passthrough(self) -> None:
        """Make the projection ``[I | 0]`` so refinement returns its input."""
        w = np.zeros((self.dim, 2 * self.dim))
        w[:, :self.dim] = np.eye(self.dim)
        self.projection.weight.data = w
        self.projection.bias.data = np.zeros(self.dim)
