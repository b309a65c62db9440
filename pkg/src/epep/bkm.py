"""Block-wise Kronecker-like multiplication and low-rank block-factored prompts.

A ``d x l`` matrix ``B`` is viewed as an ``m x m`` grid of ``(d/m) x (l/m)``
blocks.  ``bkm_multiply(a, B)`` scales block ``(i, j)`` by the scalar
``a[i, j]``.  Internally a matrix is reshaped to ``(m, d/m, m, l/m)`` so that
block ``(i, j)`` is ``view[i, :, j, :]``; nothing of size ``d*l*m^2`` is ever
formed.

Every function also accepts a stack of weight matrices ``a`` of shape
``(..., m, m)``; the leading axes broadcast through to the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class BlockPartition:
    m: int
    d: int
    l: int

    def __post_init__(self):
        if self.m < 1 or self.d < 1 or self.l < 1:
            raise ConfigError(f"partition sizes must be positive, got m={self.m} d={self.d} l={self.l}")
        if self.d % self.m or self.l % self.m:
            raise ShapeError(f"m={self.m} must divide both d={self.d} and l={self.l}")

    @property
    def block_rows(self) -> int:
        return self.d // self.m

    @property
    def block_cols(self) -> int:
        return self.l // self.m

    def blocks(self, b: np.ndarray) -> np.ndarray:
        """View ``(..., d, l)`` as ``(..., m, d/m, m, l/m)``."""
        lead = b.shape[:-2]
        return b.reshape(*lead, self.m, self.block_rows, self.m, self.block_cols)

    def unblock(self, blocks: np.ndarray) -> np.ndarray:
        lead = blocks.shape[:-4]
        return blocks.reshape(*lead, self.d, self.l)


@dataclass
class LowRankPrompt:
    """Comprehensive prompt stored as per-block rank-``r`` factors.

    ``u[i, j]`` is the ``(d/m) x r`` left factor of block ``(i, j)`` and
    ``v[i, j]`` the ``(l/m) x r`` right factor; the block is ``u[i, j] @ v[i, j].T``.
    """

    partition: BlockPartition
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        p = self.partition
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.ndim != 4 or self.u.shape[:3] != (p.m, p.m, p.block_rows):
            raise ShapeError(f"u must have shape ({p.m}, {p.m}, {p.block_rows}, r), got {self.u.shape}")
        r = self.u.shape[3]
        if self.v.shape != (p.m, p.m, p.block_cols, r):
            raise ShapeError(f"v must have shape ({p.m}, {p.m}, {p.block_cols}, {r}), got {self.v.shape}")
        if not 1 <= r <= min(p.block_rows, p.block_cols):
            raise ConfigError(f"rank r={r} must lie in [1, {min(p.block_rows, p.block_cols)}]")

    @property
    def rank(self) -> int:
        return self.u.shape[3]

    @property
    def num_params(self) -> int:
        return self.u.size + self.v.size

    @classmethod
    def random(cls, partition: BlockPartition, r: int, rng: np.random.Generator) -> "LowRankPrompt":
        # entries ~ N(0, 1/sqrt(r)) in standard deviation, so each block entry has O(1) variance
        p = partition
        scale = 1.0 / np.sqrt(r)
        u = rng.normal(0.0, scale, size=(p.m, p.m, p.block_rows, r))
        v = rng.normal(0.0, scale, size=(p.m, p.m, p.block_cols, r))
        return cls(partition, u, v)


def _check_weights(a: np.ndarray, partition: BlockPartition) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-2:] != (partition.m, partition.m):
        raise ShapeError(f"weight matrix must be {partition.m}x{partition.m}, got {a.shape}")
    return a


def bkm_multiply(a, b, partition: BlockPartition | None = None) -> np.ndarray:
    """Scale block ``(i, j)`` of ``b`` by ``a[i, j]``; the result has ``b``'s shape."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"b must be a matrix, got shape {b.shape}")
    a_arr = np.asarray(a, dtype=np.float64)
    if a_arr.ndim < 2:
        raise ShapeError(f"a must be a square matrix, got shape {a_arr.shape}")
    if partition is None:
        partition = BlockPartition(a_arr.shape[-1], *b.shape)
    elif (partition.d, partition.l) != b.shape:
        raise ShapeError(f"partition expects {partition.d}x{partition.l}, b is {b.shape[0]}x{b.shape[1]}")
    a_arr = _check_weights(a_arr, partition)
    scaled = a_arr[..., :, None, :, None] * partition.blocks(b)
    return partition.unblock(scaled)


def block_outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """All blocks ``u[i,j] @ v[i,j].T`` laid out as ``(m, d/m, m, l/m)``."""
    return np.einsum("ijar,ijbr->iajb", u, v)


def materialize(prompt: LowRankPrompt) -> np.ndarray:
    """Dense ``d x l`` comprehensive prompt."""
    return prompt.partition.unblock(block_outer(prompt.u, prompt.v))


def bkm_gradients(a, prompt: LowRankPrompt, upstream):
    """Gradients of ``<upstream, bkm_multiply(a, materialize(prompt))>``.

    Returns ``(grad_a, grad_u, grad_v)``.  With stacked ``a`` of shape
    ``(..., m, m)`` and matching ``upstream`` of shape ``(..., d, l)``,
    ``grad_a`` keeps the leading axes while ``grad_u``/``grad_v`` are summed
    over them (the factors are shared).
    """
    p = prompt.partition
    a = _check_weights(a, p)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != a.shape[:-2] + (p.d, p.l):
        raise ShapeError(f"upstream shape {g.shape} does not match {a.shape[:-2] + (p.d, p.l)}")
    g_blocks = p.blocks(g)
    b_blocks = block_outer(prompt.u, prompt.v)
    # Frobenius inner product of each upstream block with the matching B block
    grad_a = np.einsum("...iajb,iajb->...ij", g_blocks, b_blocks)
    # sum_n a_n[i,j] * G_n[i,j]: the effective upstream seen by B
    lead = "".join(chr(ord("n") + k) for k in range(a.ndim - 2))
    scaled = np.einsum(f"{lead}ij,{lead}iajb->iajb", a, g_blocks)
    grad_u = np.einsum("iajb,ijbr->ijar", scaled, prompt.v)
    grad_v = np.einsum("iajb,ijar->ijbr", scaled, prompt.u)
    return grad_a, grad_u, grad_v
