"""A small multimodal transformer encoder with per-layer prompt injection.

Text tokens and image patches are embedded (plus position and modality-type
embeddings) and concatenated into one sequence of ``text_len + num_patches``
tokens.  For each of the first ``prompt_layers`` layers the ``l`` prompt
tokens are prepended, the layer is applied, and the transformed prompt slots
are dropped again, so every injected layer sees ``base + l`` tokens and the
later layers see ``base`` tokens.  The output is mean-pooled over the base
tokens and passed through a tanh pooler and a linear head.

Backbone = embeddings + encoder layers + final norm; the trainable head
(``pooler`` and ``classifier``) and the prompt provider are the only modules
updated after :meth:`MultimodalEncoder.freeze_backbone`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset
from .errors import ConfigError, FormatError, ShapeError, TrainingError
from .serialization import decode_array, encode_array

DTYPE = torch.float64


@dataclass(frozen=True)
class EncoderConfig:
    m: int = 2
    d_model: int = 64
    layers: int = 6
    heads: int = 4
    mlp_ratio: int = 2
    text_len: int = 16
    num_patches: int = 16
    patch_dim: int = 16
    text_vocab: int = 17
    num_classes: int = 2
    prompt_len: int = 8
    prompt_layers: int | None = None

    def __post_init__(self):
        if self.prompt_layers is None:
            object.__setattr__(self, "prompt_layers", min(6, self.layers))
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0 <= self.prompt_layers <= self.layers:
            raise ConfigError(f"prompt_layers={self.prompt_layers} must lie in [0, layers={self.layers}]")
        if self.m != 2:
            raise ConfigError("the encoder embeds exactly two modalities (text, image)")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")

    @property
    def base_tokens(self) -> int:
        return self.text_len + self.num_patches

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + MLP block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim, dtype=DTYPE)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, t, dim = x.shape
        hd = dim // self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(n, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(n, t, dim))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class MultimodalEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, prompts: nn.Module | list | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            d = cfg.d_model
            self.text_embed = nn.Embedding(cfg.text_vocab, d, dtype=DTYPE)
            self.image_proj = nn.Linear(cfg.patch_dim, d, dtype=DTYPE)
            self.text_pos = nn.Parameter(0.02 * torch.randn(cfg.text_len, d, dtype=DTYPE))
            self.image_pos = nn.Parameter(0.02 * torch.randn(cfg.num_patches, d, dtype=DTYPE))
            self.type_embed = nn.Parameter(0.02 * torch.randn(cfg.m, d, dtype=DTYPE))
            self.blocks = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
            self.final_norm = nn.LayerNorm(d, dtype=DTYPE)
            self.pooler = nn.Linear(d, d, dtype=DTYPE)
            self.classifier = nn.Linear(d, cfg.num_classes, dtype=DTYPE)
        self.prompts = None
        self.set_prompts(prompts)
        self.seq_lens: list[int] = []

    # --- parameter groups -------------------------------------------------

    def set_prompts(self, prompts) -> None:
        """Attach a prompt provider (or a list, one per injected layer); ``None`` disables prompting."""
        if prompts is None:
            self.prompts = None
            return
        providers = list(prompts) if isinstance(prompts, (list, tuple, nn.ModuleList)) else [prompts]
        if len(providers) not in (1, self.cfg.prompt_layers):
            raise ConfigError(f"need 1 or {self.cfg.prompt_layers} prompt providers, got {len(providers)}")
        for p in providers:
            dims = (p.partition.d, p.partition.l) if hasattr(p, "partition") else (p.d, p.l)
            if dims != (self.cfg.d_model, self.cfg.prompt_len):
                raise ShapeError(
                    f"prompt is {dims[0]}x{dims[1]}, encoder expects {self.cfg.d_model}x{self.cfg.prompt_len}"
                )
        self.prompts = nn.ModuleList(providers)

    def head_modules(self) -> list[nn.Module]:
        return [self.pooler, self.classifier]

    def backbone_parameters(self) -> list[nn.Parameter]:
        head = {id(p) for mod in self.head_modules() for p in mod.parameters()}
        prompt = {id(p) for p in self.prompts.parameters()} if self.prompts is not None else set()
        return [p for p in self.parameters() if id(p) not in head and id(p) not in prompt]

    def trainable_named_parameters(self) -> dict[str, nn.Parameter]:
        """Prompt and head parameters, keyed by their module path."""
        out = {}
        for name, p in self.named_parameters():
            if name.startswith(("prompts.", "pooler.", "classifier.")):
                out[name] = p
        return out

    def reset_classifier(self, seed: int) -> None:
        """Fresh downstream classifier; the pooler keeps its warm-up weights."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.classifier.reset_parameters()

    def freeze_backbone(self) -> None:
        for p in self.backbone_parameters():
            p.requires_grad_(False)

    # --- forward ----------------------------------------------------------

    def embed(self, text: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        t = self.text_embed(text) + self.text_pos + self.type_embed[0]
        i = self.image_proj(image) + self.image_pos + self.type_embed[1]
        return torch.cat([t, i], dim=1)

    def _encode(self, x: torch.Tensor, prompt_tokens: list[torch.Tensor] | None) -> torch.Tensor:
        trace = []
        for i, block in enumerate(self.blocks):
            if prompt_tokens is not None and i < self.cfg.prompt_layers:
                p = prompt_tokens[0] if len(prompt_tokens) == 1 else prompt_tokens[i]
                h = torch.cat([p, x], dim=1)
                trace.append(h.shape[1])
                x = block(h)[:, p.shape[1] :]
            else:
                trace.append(x.shape[1])
                x = block(x)
        self.seq_lens = trace
        return self.final_norm(x)

    def features(self, text, image, missing) -> torch.Tensor:
        """Pooled base-token representation, shape ``(N, d_model)``."""
        x = self.embed(text, image)
        if self.prompts is None:
            return self._encode(x, None).mean(dim=1)
        outs = [provider(missing) for provider in self.prompts]
        tokens = [o[0] for o in outs]
        inject = outs[0][1]
        if bool(inject.all()):
            return self._encode(x, tokens).mean(dim=1)
        if not bool(inject.any()):
            return self._encode(x, None).mean(dim=1)
        # samples are independent, so prompted and unprompted rows run separately
        on = torch.nonzero(inject).squeeze(1)
        off = torch.nonzero(~inject).squeeze(1)
        h_on = self._encode(x[on], [t[on] for t in tokens]).mean(dim=1)
        h_off = self._encode(x[off], None).mean(dim=1)
        out = torch.empty((x.shape[0], h_on.shape[1]), dtype=DTYPE)
        out[on] = h_on
        out[off] = h_off
        return out

    def forward(self, text, image, missing) -> torch.Tensor:
        h = self.features(text, image, missing)
        return self.classifier(torch.tanh(self.pooler(h)))

    def logits(self, data: Dataset, batch_size: int = 256) -> np.ndarray:
        """Inference over a whole dataset (no gradients)."""
        self._check_data(data)
        out = []
        with torch.no_grad():
            for start in range(0, len(data), batch_size):
                sl = slice(start, start + batch_size)
                t, i, mi = batch_tensors(data, sl)
                out.append(self(t, i, mi).numpy())
        if not out:
            return np.zeros((0, self.cfg.num_classes))
        return np.concatenate(out)

    def _check_data(self, data: Dataset) -> None:
        c = self.cfg
        if data.num_classes != c.num_classes:
            raise ShapeError(f"dataset has {data.num_classes} classes, model predicts {c.num_classes}")
        if (data.text_len, data.num_patches, data.patch_dim) != (c.text_len, c.num_patches, c.patch_dim):
            raise ShapeError(
                f"dataset inputs are text {data.text_len}, image {data.num_patches}x{data.patch_dim};"
                f" model expects text {c.text_len}, image {c.num_patches}x{c.patch_dim}"
            )
        if data.text.size and data.text.max() >= c.text_vocab:
            raise ShapeError(f"token id {data.text.max()} exceeds vocabulary of {c.text_vocab}")


def batch_tensors(data: Dataset, idx):
    return (
        torch.from_numpy(data.text[idx]),
        torch.from_numpy(data.image[idx]),
        torch.from_numpy(data.missing[idx]),
    )


def trainable_gradients(model: MultimodalEncoder, data: Dataset, loss_fn) -> dict[str, np.ndarray]:
    """Gradients of ``loss_fn(logits, data)`` for prompt and head parameters only."""
    params = model.trainable_named_parameters()
    model.zero_grad(set_to_none=True)
    t, i, mi = batch_tensors(data, slice(None))
    loss = loss_fn(model(t, i, mi), data)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss)} on a batch of {len(data)} samples")
    names = [n for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {
        n: (g.numpy().copy() if g is not None else np.zeros(tuple(params[n].shape)))
        for n, g in zip(names, grads)
    }


def model_state(model: MultimodalEncoder) -> dict:
    """JSON-ready snapshot: encoder config, non-prompt tensors and prompt provider state."""
    tensors = {
        name: encode_array(t.detach().numpy())
        for name, t in model.state_dict().items()
        if not name.startswith("prompts.")
    }
    providers = [p.state() for p in model.prompts] if model.prompts is not None else None
    return {"encoder": model.cfg.to_dict(), "tensors": tensors, "prompts": providers}


def model_from_state(state: dict) -> MultimodalEncoder:
    from .prompting import provider_from_state

    try:
        cfg = EncoderConfig(**state["encoder"])
        providers = state["prompts"]
        model = MultimodalEncoder(cfg, None)
        if providers is not None:
            model.set_prompts([provider_from_state(p) for p in providers])
        own = model.state_dict()
        missing = sorted(set(k for k in own if not k.startswith("prompts.")) - set(state["tensors"]))
        if missing:
            raise FormatError(f"checkpoint lacks tensor {missing[0]!r}")
        loaded = {k: torch.from_numpy(decode_array(v)) for k, v in state["tensors"].items()}
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed model checkpoint: {exc}") from None
    for name, t in loaded.items():
        if name not in own or own[name].shape != t.shape:
            raise FormatError(f"checkpoint tensor {name!r} does not fit the encoder")
    with torch.no_grad():
        for name, t in loaded.items():
            own[name].copy_(t)
    return model
