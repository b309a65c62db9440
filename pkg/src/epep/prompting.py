"""Missing-aware prompt providers and the prompt parameter-count analyser.

A provider maps a batch's missing-modality mask ``(N, m)`` to prompt tokens
``(N, l, d)`` plus a boolean ``inject`` vector; samples with ``inject`` false
receive no prompt tokens at all.

``PromptBank`` is the low-rank scheme: one ``m x m`` weight matrix per
modality, summed over a sample's missing modalities and applied to the shared
comprehensive prompt with :func:`epep.bkm.bkm_multiply`.  ``BaselinePromptSet``
holds dense per-case (MAP) or per-modality (MSP) prompts for comparison.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import bkm
from .data import check_pattern
from .errors import ConfigError, ShapeError
from .serialization import decode_array, encode_array


class CompleteSamplePolicy(str, enum.Enum):
    """What a sample with every modality present receives as its prompt."""

    ZERO = "ZeroPrompt"
    SKIP = "SkipPrompt"
    ALL = "AllWeights"


# training missing rate at and above which complete samples still get (zero) prompts
POLICY_THRESHOLD = 0.3


def default_policy(train_missing_rate: float) -> CompleteSamplePolicy:
    if train_missing_rate >= POLICY_THRESHOLD:
        return CompleteSamplePolicy.ZERO
    return CompleteSamplePolicy.SKIP


class _BKMPrompt(torch.autograd.Function):
    """Batched ``a_n ⊛ (block outer products of u, v)`` with closed-form backward."""

    @staticmethod
    def forward(ctx, a, u, v, partition):
        prompt = bkm.LowRankPrompt(partition, u.detach().cpu().numpy(), v.detach().cpu().numpy())
        a_np = a.detach().cpu().numpy()
        ctx.partition = partition
        ctx.save_for_backward(a, u, v)
        out = bkm.bkm_multiply(a_np, bkm.materialize(prompt), partition)
        return torch.from_numpy(out).to(a.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        a, u, v = ctx.saved_tensors
        prompt = bkm.LowRankPrompt(ctx.partition, u.detach().numpy(), v.detach().numpy())
        ga, gu, gv = bkm.bkm_gradients(a.detach().numpy(), prompt, grad_out.detach().numpy())
        as_t = lambda x: torch.from_numpy(np.ascontiguousarray(x)).to(a.dtype)  # noqa: E731
        return as_t(ga), as_t(gu), as_t(gv), None


def bkm_prompt(a: torch.Tensor, u: torch.Tensor, v: torch.Tensor, partition: bkm.BlockPartition) -> torch.Tensor:
    return _BKMPrompt.apply(a, u, v, partition)


def _weight_indicator(missing: torch.Tensor, policy: CompleteSamplePolicy) -> tuple[torch.Tensor, torch.Tensor]:
    """Rows of 0/1 selecting which weight matrices to sum, and the inject flags."""
    missing = missing.bool()
    complete = ~missing.any(dim=1)
    ind = missing.to(torch.float64)
    if policy is CompleteSamplePolicy.ALL:
        ind = torch.where(complete[:, None], torch.ones_like(ind), ind)
    inject = ~complete if policy is CompleteSamplePolicy.SKIP else torch.ones_like(complete)
    return ind, inject


class PromptBank(nn.Module):
    def __init__(self, m: int, d: int, l: int, r: int, policy=CompleteSamplePolicy.ZERO, rng=None):
        super().__init__()
        self.partition = bkm.BlockPartition(m, d, l)
        self.policy = CompleteSamplePolicy(policy)
        rng = rng if rng is not None else np.random.default_rng(0)
        low_rank = bkm.LowRankPrompt.random(self.partition, r, rng)
        # identity plus small noise: every modality starts on B's diagonal blocks
        weights = np.eye(m)[None] + rng.normal(0.0, 0.02, size=(m, m, m))
        self.weights = nn.Parameter(torch.from_numpy(weights))
        self.u = nn.Parameter(torch.from_numpy(low_rank.u))
        self.v = nn.Parameter(torch.from_numpy(low_rank.v))

    @property
    def m(self) -> int:
        return self.partition.m

    @property
    def rank(self) -> int:
        return self.u.shape[-1]

    @property
    def comprehensive(self) -> bkm.LowRankPrompt:
        return bkm.LowRankPrompt(self.partition, self.u.detach().numpy(), self.v.detach().numpy())

    def weight_matrices(self) -> list[np.ndarray]:
        return [w for w in self.weights.detach().numpy()]

    def assemble_weight(self, pattern) -> np.ndarray:
        """Sum of the weight matrices of the missing modalities (zero when none)."""
        pattern = check_pattern(pattern, self.m)
        out = np.zeros((self.m, self.m))
        for i in sorted(pattern):
            out = out + self.weights[i].detach().numpy()
        return out

    def assemble_prompt(self, pattern) -> np.ndarray | None:
        """Dense ``d x l`` prompt for one pattern, or ``None`` when the policy skips it."""
        pattern = check_pattern(pattern, self.m)
        if not pattern:
            if self.policy is CompleteSamplePolicy.SKIP:
                return None
            if self.policy is CompleteSamplePolicy.ALL:
                pattern = frozenset(range(self.m))
        return bkm.bkm_multiply(self.assemble_weight(pattern), bkm.materialize(self.comprehensive), self.partition)

    def forward(self, missing: torch.Tensor):
        if missing.shape[1] != self.m:
            raise ShapeError(f"mask has {missing.shape[1]} modalities, bank has {self.m}")
        ind, inject = _weight_indicator(missing, self.policy)
        a = (ind @ self.weights.reshape(self.m, -1)).reshape(-1, self.m, self.m)
        prompts = bkm_prompt(a, self.u, self.v, self.partition)
        return prompts.transpose(1, 2), inject

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def state(self) -> dict:
        p = self.partition
        return {
            "scheme": "EPEP",
            "m": p.m,
            "d": p.d,
            "l": p.l,
            "r": self.rank,
            "policy": self.policy.value,
            "weights": encode_array(self.weights.detach().numpy()),
            "u": encode_array(self.u.detach().numpy()),
            "v": encode_array(self.v.detach().numpy()),
        }

    @classmethod
    def from_state(cls, st: dict) -> "PromptBank":
        bank = cls(st["m"], st["d"], st["l"], st["r"], st["policy"])
        with torch.no_grad():
            bank.weights.copy_(torch.from_numpy(decode_array(st["weights"])))
            bank.u.copy_(torch.from_numpy(decode_array(st["u"])))
            bank.v.copy_(torch.from_numpy(decode_array(st["v"])))
        return bank


class BaselinePromptSet(nn.Module):
    """Dense prompts: ``2^m - 1`` per missing case (MAP) or ``m`` per modality (MSP)."""

    def __init__(self, kind: str, m: int, d: int, l: int, policy=CompleteSamplePolicy.ZERO, rng=None):
        super().__init__()
        if kind not in ("MAP", "MSP"):
            raise ConfigError(f"unknown baseline kind {kind!r}")
        self.kind, self.m, self.d, self.l = kind, m, d, l
        self.policy = CompleteSamplePolicy(policy)
        count = 2**m - 1 if kind == "MAP" else m
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prompts = nn.Parameter(torch.from_numpy(rng.normal(0.0, 1.0, size=(count, d, l))))

    @property
    def count(self) -> int:
        return self.prompts.shape[0]

    def _case_index(self, pattern: frozenset) -> int:
        return sum(1 << i for i in pattern) - 1

    def prompt(self, pattern) -> np.ndarray | None:
        """Dense prompt for one missing pattern (MAP lookup / MSP sum)."""
        pattern = check_pattern(pattern, self.m)
        if not pattern:
            if self.policy is CompleteSamplePolicy.SKIP:
                return None
            if self.policy is CompleteSamplePolicy.ZERO:
                return np.zeros((self.d, self.l))
            pattern = frozenset(range(self.m))
        dense = self.prompts.detach().numpy()
        if self.kind == "MAP":
            return dense[self._case_index(pattern)].copy()
        return dense[sorted(pattern)].sum(axis=0)

    def forward(self, missing: torch.Tensor):
        ind, inject = _weight_indicator(missing, self.policy)
        if self.kind == "MSP":
            out = (ind @ self.prompts.reshape(self.m, -1)).reshape(-1, self.d, self.l)
        else:
            weights = torch.tensor([1 << i for i in range(self.m)], dtype=torch.float64)
            code = (ind @ weights).long()
            zero = torch.zeros((1, self.d, self.l), dtype=torch.float64)
            table = torch.cat([zero, self.prompts], dim=0)
            out = table[code]
        return out.transpose(1, 2), inject

    def state(self) -> dict:
        return {
            "scheme": self.kind,
            "m": self.m,
            "d": self.d,
            "l": self.l,
            "policy": self.policy.value,
            "prompts": encode_array(self.prompts.detach().numpy()),
        }

    @classmethod
    def from_state(cls, st: dict) -> "BaselinePromptSet":
        obj = cls(st["scheme"], st["m"], st["d"], st["l"], st["policy"])
        with torch.no_grad():
            obj.prompts.copy_(torch.from_numpy(decode_array(st["prompts"])))
        return obj


def provider_from_state(st: dict) -> nn.Module:
    if st["scheme"] == "EPEP":
        return PromptBank.from_state(st)
    return BaselinePromptSet.from_state(st)


# --- parameter accounting ---------------------------------------------------

METHODS = ("MAP", "MSP", "EPEP")
COMPLEXITY = {"MAP": "O(d*l)", "MSP": "O(d*l)", "EPEP": "O(d+l)"}


def _check_dims(**dims):
    for name, val in dims.items():
        if not isinstance(val, (int, np.integer)) or val < 1:
            raise ConfigError(f"{name} must be a positive integer, got {val!r}")


def param_count(m: int, d: int, l: int, r: int | None = None, method: str = "EPEP") -> int:
    """Prompt parameter count of a scheme, using the closed forms of the comparison table.

    For ``EPEP`` this is ``(d + l) * r + m**3``; see :func:`epep_factor_count`
    for the count implied by per-block factors.
    """
    _check_dims(m=m, d=d, l=l)
    if method == "MAP":
        return (2**m - 1) * d * l
    if method == "MSP":
        return m * d * l
    if method == "EPEP":
        _check_dims(r=r)
        if d % m or l % m:
            raise ConfigError(f"m={m} must divide d={d} and l={l}")
        return (d + l) * r + m**3
    raise ConfigError(f"unknown method {method!r}")


def epep_factor_count(m: int, d: int, l: int, r: int) -> int:
    """Parameters actually held by ``m^2`` rank-``r`` block factors plus ``m`` weight matrices."""
    _check_dims(m=m, d=d, l=l, r=r)
    if d % m or l % m:
        raise ConfigError(f"m={m} must divide d={d} and l={l}")
    return (d + l) * r * m + m**3


@dataclass(frozen=True)
class ParamRow:
    method: str
    count: int
    complexity: str
    note: str = ""


def param_report(m: int, d: int, l: int, r: int) -> list[ParamRow]:
    """Rows for MAP, MSP and EPEP; EPEP raises ``ConfigError`` when ``m`` does not divide ``d``/``l``."""
    rows = [ParamRow(k, param_count(m, d, l, method=k), COMPLEXITY[k]) for k in ("MAP", "MSP")]
    table = param_count(m, d, l, r, "EPEP")
    held = epep_factor_count(m, d, l, r)
    note = ""
    if held != table:
        note = f"per-block factors hold (d+l)*r*m + m^3 = {held}"
    rows.append(ParamRow("EPEP", table, COMPLEXITY["EPEP"], note))
    return rows
