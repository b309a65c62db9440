"""Run configuration: nested dataclasses with strict JSON loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evidential import DEFAULT_LAMBDA

METHODS = ("EPEP", "MAP", "MSP", "NoPrompt")
LOSSES = ("evidential", "ce")
POLICIES = ("ZeroPrompt", "SkipPrompt", "AllWeights")


@dataclass
class TaskSection:
    num_classes: int = 2
    text_len: int = 16
    num_patches: int = 16
    patch_dim: int = 16
    bins: int = 8
    text_strength: float = 1.0
    image_strength: float = 1.0
    noise: float = 0.3
    projection_seed: int = 1234


@dataclass
class ModelSection:
    d_model: int = 64
    layers: int = 6
    heads: int = 4
    mlp_ratio: int = 2
    text_vocab: int | None = None
    prompt_len: int = 8
    prompt_layers: int | None = None
    per_layer_prompts: bool = False


@dataclass
class PromptSection:
    rank: int = 4
    policy: str | None = None


@dataclass
class DataSection:
    source: str = "synthetic"
    train_path: str | None = None
    test_path: str | None = None
    n_train: int = 2000
    n_test: int = 1000
    n_pretrain: int = 2000
    train_availability: list[float] = field(default_factory=lambda: [0.7, 0.7])
    test_availability: list[float] = field(default_factory=lambda: [0.7, 0.7])


@dataclass
class OptimSection:
    lr: float = 1e-2
    weight_decay: float = 2e-3
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 64
    warmup_epochs: int = 10
    warmup_lr: float = 1e-3
    warmup_weight_decay: float = 0.0
    eval_train: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "EPEP"
    loss: str = "evidential"
    lam: float = DEFAULT_LAMBDA
    out_dir: str | None = None
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.prompt.policy is not None and self.prompt.policy not in POLICIES:
            raise ConfigError(f"prompt.policy must be one of {POLICIES}, got {self.prompt.policy!r}")
        if self.data.source not in ("synthetic", "jsonl"):
            raise ConfigError(f"data.source must be 'synthetic' or 'jsonl', got {self.data.source!r}")
        if self.optim.epochs < 0 or self.optim.warmup_epochs < 0:
            raise ConfigError("optim.epochs and optim.warmup_epochs must be non-negative")
        if self.optim.batch_size < 1:
            raise ConfigError("optim.batch_size must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(raw)

    def with_overrides(self, **dotted) -> "RunConfig":
        """Copy with ``{"optim.lr": 0.1, ...}``-style overrides applied (``None`` values ignored)."""
        raw = self.to_dict()
        for key, val in dotted.items():
            if val is None:
                continue
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config field {key!r}")
            node[leaf] = val
        return RunConfig.from_dict(raw)


def _build(cls, raw, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config field {prefix + unknown[0]!r}")
    kwargs = {}
    for name, val in raw.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        kwargs[name] = _build(sub, val, f"{name}.") if sub is not None else val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


_SECTIONS = {
    "task": TaskSection,
    "model": ModelSection,
    "prompt": PromptSection,
    "data": DataSection,
    "optim": OptimSection,
}
