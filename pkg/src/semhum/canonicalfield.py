"""Canonical neural field: encoded 3D position -> (color, density, part logits).

The field is view-independent by construction (position is the only
input), which is what makes rendered part labels agree across viewpoints.
All three heads branch from the final trunk feature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class PositionalEncoding:
    num_frequencies: int = 6
    include_input: bool = True

    @property
    def out_dim(self) -> int:
        return 3 * ((1 if self.include_input else 0) + 2 * self.num_frequencies)


def encode(x: T.Tensor, pe: PositionalEncoding) -> T.Tensor:
    """[x?, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...] per component."""
    x = T.as_tensor(x)
    parts = []
    if pe.include_input:
        parts.append(x)
    for j in range(pe.num_frequencies):
        f = np.pi * (2.0**j)
        scaled = x * f
        parts.append(T.sin(scaled))
        parts.append(T.cos(scaled))
    return T.concat(parts, axis=-1)


def _he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class CanonicalMLP:
    """ReLU trunk with one encoded-input skip; sigmoid color head, softplus
    density head, raw semantic logits head.

    Head weights and biases start at zero: a fresh field is mid-gray,
    density softplus(0), and semantically uniform.
    """

    def __init__(
        self,
        num_classes: int = 5,
        width: int = 128,
        depth: int = 6,
        skip_at: int = 3,
        pe: PositionalEncoding | None = None,
        rng: np.random.Generator | None = None,
    ):
        if rng is None:
            rng = np.random.default_rng(0)
        self.pe = pe if pe is not None else PositionalEncoding()
        self.num_classes = num_classes
        self.width = width
        self.depth = depth
        self.skip_at = skip_at
        in_dim = self.pe.out_dim
        self.trunk = []
        last = in_dim
        for i in range(depth):
            if i == skip_at:
                last += in_dim
            w = T.Tensor(_he_init(rng, last, width), requires_grad=True)
            b = T.Tensor(np.zeros(width), requires_grad=True)
            self.trunk.append((w, b))
            last = width
        self.color = self._zero_head(width, 3)
        self.density = self._zero_head(width, 1)
        self.semantic = self._zero_head(width, num_classes)

    @staticmethod
    def _zero_head(fan_in: int, fan_out: int):
        return (
            T.Tensor(np.zeros((fan_in, fan_out)), requires_grad=True),
            T.Tensor(np.zeros(fan_out), requires_grad=True),
        )

    def named_tensors(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(self.trunk):
            out[f"canon.trunk{i}.w"] = w
            out[f"canon.trunk{i}.b"] = b
        for name, (w, b) in (
            ("color", self.color),
            ("density", self.density),
            ("semantic", self.semantic),
        ):
            out[f"canon.{name}.w"] = w
            out[f"canon.{name}.b"] = b
        return out

    def query(self, x: T.Tensor):
        """Batched field query: x (M,3) -> (color (M,3), density (M,1), logits (M,L))."""
        enc = encode(x, self.pe)
        h = enc
        for i, (w, b) in enumerate(self.trunk):
            if i == self.skip_at:
                h = T.concat([h, enc], axis=1)
            h = T.relu(T.matmul(h, w) + b)
        cw, cb = self.color
        dw, db = self.density
        sw, sb = self.semantic
        color = T.sigmoid(T.matmul(h, cw) + cb)
        density = T.softplus(T.matmul(h, dw) + db)
        logits = T.matmul(h, sw) + sb
        return color, density, logits


def query_field(mlp: CanonicalMLP, x_c) -> tuple:
    """Single-point query: returns (rgb (3,), sigma float, logits (L,)) arrays."""
    x = T.as_tensor(np.asarray(x_c, dtype=np.float64).reshape(1, 3))
    color, density, logits = mlp.query(x)
    return color.data[0], float(density.data[0, 0]), logits.data[0]


def semantic_distribution(logits) -> np.ndarray:
    """Softmax over class logits (numpy convenience for callers off the tape)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
