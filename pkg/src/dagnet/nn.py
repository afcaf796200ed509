"""Layers, optimizer and checkpoint I/O built on :mod:`dagnet.autodiff`."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"DAGNET-CKPT-v1"

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "elu": ad.elu,
    "leaky_relu": lambda x: ad.leaky_relu(x, 0.2),
    "identity": lambda x: x,
}


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; submodules
    and lists of submodules are walked recursively in attribute order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self.named_parameters():
            if name in out:
                raise KeyError(f"duplicate parameter name {name!r}")
            out[name] = p.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(name: str, value, seen: set[int]):
    if isinstance(value, Tensor):
        if value.requires_grad and id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        for sub, p in value.named_parameters(prefix=f"{name}."):
            if id(p) not in seen:
                seen.add(id(p))
                yield sub, p
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item, seen)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(xavier_uniform(rng, out_features, in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class MLP(Module):
    """Linear layers with ``activation`` after each one.

    With ``final_activation=False`` the last layer stays linear, which is what
    the Gaussian heads need.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator, activation: str = "relu",
                 final_activation: bool = True):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = act(x)
        return x


class GRUCell(Module):
    """Single-layer GRU cell.

    r = σ(W_r x + U_r h + b_r), u = σ(W_u x + U_u h + b_u),
    c = tanh(W_c x + U_c (r ⊙ h) + b_c), h' = u ⊙ h + (1 − u) ⊙ c.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        w_x = np.concatenate([xavier_uniform(rng, H, input_size) for _ in range(3)])
        w_h = np.concatenate([xavier_uniform(rng, H, H) for _ in range(2)])
        # gate order in the stacked matrices: reset, update, candidate
        self.w_x = Tensor(w_x, requires_grad=True)
        self.b_x = Tensor(np.zeros(3 * H), requires_grad=True)
        self.w_h = Tensor(w_h, requires_grad=True)
        self.w_c = Tensor(xavier_uniform(rng, H, H), requires_grad=True)

    def __call__(self, x: Tensor, h_prev: Tensor) -> Tensor:
        H = self.hidden_size
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ShapeError(f"gru: input {x.shape} does not match input size {self.input_size}")
        if h_prev.shape != (x.shape[0], H):
            raise ShapeError(f"gru: hidden {h_prev.shape} does not match ({x.shape[0]}, {H})")
        gx = ad.linear(x, self.w_x, self.b_x)
        gh = ad.linear(h_prev, self.w_h)
        r = ad.sigmoid(gx[:, :H] + gh[:, :H])
        u = ad.sigmoid(gx[:, H:2 * H] + gh[:, H:])
        c = ad.tanh(gx[:, 2 * H:] + ad.linear(r * h_prev, self.w_c))
        return u * h_prev + (1.0 - u) * c


class Adam:
    """Bias-corrected Adam over a fixed, named parameter list."""

    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"adam: parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write the magic line, a length-prefixed JSON manifest, then the payload.

    Manifest entries carry ``name``, ``shape`` and ``offset`` (in bytes from the
    start of the payload). The payload is little-endian float64.
    """
    entries = []
    offset = 0
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    head = CHECKPOINT_MAGIC + b"\n"
    if not raw.startswith(head):
        raise ValueError(f"{path}: not a DAGNET-CKPT-v1 checkpoint")
    pos = len(head)
    (mlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    manifest = json.loads(raw[pos:pos + mlen])
    payload = memoryview(raw)[pos + mlen:]
    state: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise ValueError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(payload[start:start + 8 * count], dtype="<f8")
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return state, manifest["meta"]
