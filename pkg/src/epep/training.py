"""Optimiser, learning-rate schedule, evaluation and the two-phase training loop.

Phase one trains the whole encoder on complete-modality data with
cross-entropy and then freezes the backbone.  Phase two trains only the prompt
provider and the pooler/classifier under the missing-modality protocol.
"""

from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .data import Dataset, MissingProtocol, SyntheticTask, load_jsonl, make_split
from .errors import ConfigError, ShapeError, TrainingError
from .evidential import evidence_from_logits, evidential_loss_and_grad, predict_multilabel
from .losses import cross_entropy_loss, make_loss
from .metrics import auroc_macro, f1_macro
from .model import EncoderConfig, MultimodalEncoder, batch_tensors
from .numerics import derive_seed, make_rng
from .prompting import BaselinePromptSet, CompleteSamplePolicy, PromptBank, default_policy

HISTORY_FIELDS = (
    "epoch",
    "split",
    "f1_macro",
    "auroc",
    "loss_eb",
    "loss_kl",
    "mean_u_complete",
    "mean_u_missing",
)


def cosine_lr(t: int, total: int, lr_max: float) -> float:
    """``lr_max * (1 + cos(pi * t / total)) / 2``, held at 0 once ``t >= total``."""
    if total <= 0:
        return 0.0
    t = min(max(t, 0), total)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """Adam with decoupled weight decay on a cosine schedule.

    The decay ``w <- w * (1 - lr * wd)`` is applied before the bias-corrected
    moment step.  ``params`` maps names to tensors updated in place.
    """

    def __init__(
        self,
        params: dict[str, torch.Tensor],
        lr: float = 1e-2,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 2e-3,
        total_steps: int = 1,
    ):
        self.params = dict(params)
        self.lr_max = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.t = 0
        self.exp_avg = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @property
    def lr(self) -> float:
        return cosine_lr(self.t, self.total_steps, self.lr_max)

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor | None]) -> float:
        lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not bool(torch.isfinite(g).all()):
                raise TrainingError(f"non-finite gradient for parameter {name!r} at step {self.t}")
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.mul_(1.0 - lr * self.weight_decay)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
        return lr


@dataclass
class EvalReport:
    f1_macro: float
    auroc: float
    loss_eb: float
    loss_kl: float
    mean_u_complete: float
    mean_u_missing: float
    n: int

    def row(self, epoch: int, split: str) -> dict:
        return {"epoch": epoch, "split": split, **{k: getattr(self, k) for k in HISTORY_FIELDS[2:]}}

    def to_dict(self) -> dict:
        return asdict(self)


def uncertainty(logits: np.ndarray, loss_kind: str) -> np.ndarray:
    """``K / S`` for evidential heads; normalised softmax entropy for cross-entropy heads."""
    if loss_kind == "evidential":
        return np.asarray(evidence_from_logits(logits).uncertainty, dtype=np.float64).reshape(-1)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    ent = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
    return ent / math.log(logits.shape[1])


def class_probs(logits: np.ndarray, loss_kind: str, multilabel: bool) -> np.ndarray:
    if loss_kind == "evidential":
        return evidence_from_logits(logits).probs
    if multilabel:
        return 1.0 / (1.0 + np.exp(-logits))
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def evaluate(model: MultimodalEncoder, data: Dataset, loss_kind: str = "evidential", lam: float = 0.004) -> EvalReport:
    if len(data) == 0:
        raise ShapeError("cannot evaluate on an empty dataset")
    logits = model.logits(data)
    y = data.label_matrix()
    probs = class_probs(logits, loss_kind, data.multilabel)
    if data.multilabel:
        preds = predict_multilabel(evidence_from_logits(logits)) if loss_kind == "evidential" else probs > 0.5
    else:
        preds = probs.argmax(axis=1)
    l_eb, l_kl, _ = evidential_loss_and_grad(logits, y, lam)
    u = uncertainty(logits, loss_kind)
    missing = data.missing.any(axis=1)
    mean = lambda x: float(np.mean(x)) if len(x) else float("nan")  # noqa: E731
    return EvalReport(
        f1_macro=f1_macro(preds, data.labels, data.num_classes),
        auroc=auroc_macro(probs, y),
        loss_eb=float(np.mean(l_eb)),
        loss_kl=float(np.mean(l_kl)),
        mean_u_complete=mean(u[~missing]),
        mean_u_missing=mean(u[missing]),
        n=len(data),
    )


# --- building blocks --------------------------------------------------------


def task_from_config(cfg: RunConfig) -> SyntheticTask:
    return SyntheticTask(**asdict(cfg.task))


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    t, mc = cfg.task, cfg.model
    vocab = mc.text_vocab if mc.text_vocab is not None else task_from_config(cfg).vocab_size
    return EncoderConfig(
        d_model=mc.d_model,
        layers=mc.layers,
        heads=mc.heads,
        mlp_ratio=mc.mlp_ratio,
        text_len=t.text_len,
        num_patches=t.num_patches,
        patch_dim=t.patch_dim,
        text_vocab=vocab,
        num_classes=t.num_classes,
        prompt_len=mc.prompt_len,
        prompt_layers=mc.prompt_layers,
    )


def resolve_policy(cfg: RunConfig) -> CompleteSamplePolicy:
    if cfg.prompt.policy is not None:
        return CompleteSamplePolicy(cfg.prompt.policy)
    return default_policy(MissingProtocol(tuple(cfg.data.train_availability)).missing_rate)


def build_prompts(cfg: RunConfig, enc: EncoderConfig):
    """Prompt provider(s) for ``cfg.method``; ``None`` for the unprompted baseline."""
    if cfg.method == "NoPrompt":
        return None
    rng = make_rng(cfg.seed, "prompt-init")
    policy = resolve_policy(cfg)
    count = enc.prompt_layers if cfg.model.per_layer_prompts else 1

    def one():
        if cfg.method == "EPEP":
            return PromptBank(enc.m, enc.d_model, enc.prompt_len, cfg.prompt.rank, policy, rng)
        return BaselinePromptSet(cfg.method, enc.m, enc.d_model, enc.prompt_len, policy, rng)

    providers = [one() for _ in range(count)]
    return providers if count > 1 else providers[0]


@dataclass
class Splits:
    pretrain: Dataset
    train: Dataset
    test: Dataset


def load_splits(cfg: RunConfig) -> Splits:
    dc = cfg.data
    if dc.source == "jsonl":
        for name in ("train_path", "test_path"):
            if getattr(dc, name) is None:
                raise ConfigError(f"data.{name} is required when data.source is 'jsonl'")
        shapes = dict(
            num_classes=cfg.task.num_classes,
            text_len=cfg.task.text_len,
            num_patches=cfg.task.num_patches,
            patch_dim=cfg.task.patch_dim,
        )
        train = load_jsonl(dc.train_path, **shapes)
        test = load_jsonl(dc.test_path, **shapes)
        complete = ~train.missing.any(axis=1)
        pretrain = train.subset(complete) if complete.any() else train
        return Splits(pretrain, train, test)
    task = task_from_config(cfg)
    full = MissingProtocol((1.0, 1.0))
    return Splits(
        pretrain=make_split(task, dc.n_pretrain, full, cfg.seed, "pretrain"),
        train=make_split(task, dc.n_train, MissingProtocol(tuple(dc.train_availability)), cfg.seed, "train"),
        test=make_split(task, dc.n_test, MissingProtocol(tuple(dc.test_availability)), cfg.seed, "test"),
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _run_epochs(model, params, data: Dataset, loss_fn, opt: AdamW, epochs: int, batch_size: int, rng, on_epoch=None):
    targets = torch.from_numpy(data.label_matrix())
    for epoch in range(1, epochs + 1):
        snapshot = {k: p.detach().clone() for k, p in params.items()}
        for idx in _batches(len(data), batch_size, rng):
            t, i, mi = batch_tensors(data, idx)
            loss = loss_fn(model(t, i, mi), targets[idx])
            if not bool(torch.isfinite(loss)):
                err = TrainingError(f"loss became {loss.item()} in epoch {epoch} at step {opt.t}")
                err.last_good = snapshot
                raise err
            # skip-prompt batches with no incomplete sample leave the prompts unused
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            opt.step(dict(zip(params, grads)))
        if on_epoch is not None:
            on_epoch(epoch)


def pretrain_backbone(cfg: RunConfig, splits: Splits | None = None) -> dict:
    """Warm-up run on complete-modality data; returns the encoder state dict."""
    splits = splits or load_splits(cfg)
    enc = encoder_config(cfg)
    model = MultimodalEncoder(enc, None, seed=derive_seed(cfg.seed, "model-init"))
    oc = cfg.optim
    params = dict(model.named_parameters())
    steps = oc.warmup_epochs * math.ceil(len(splits.pretrain) / oc.batch_size)
    opt = AdamW(params, oc.warmup_lr, tuple(oc.betas), oc.eps, oc.warmup_weight_decay, steps)
    _run_epochs(
        model,
        params,
        splits.pretrain,
        lambda z, y: cross_entropy_loss(z, y),
        opt,
        oc.warmup_epochs,
        oc.batch_size,
        make_rng(cfg.seed, "shuffle/pretrain"),
    )
    return copy.deepcopy(model.state_dict())


@dataclass
class TrainResult:
    model: MultimodalEncoder
    history: list[dict]
    final: EvalReport
    backbone_state: dict = field(repr=False, default_factory=dict)


def train(cfg: RunConfig, backbone_state: dict | None = None, splits: Splits | None = None) -> TrainResult:
    """Full two-phase run; ``backbone_state`` reuses a previous warm-up."""
    splits = splits or load_splits(cfg)
    if backbone_state is None:
        backbone_state = pretrain_backbone(cfg, splits)
    enc = encoder_config(cfg)
    model = MultimodalEncoder(enc, None, seed=derive_seed(cfg.seed, "model-init"))
    model.load_state_dict(backbone_state)
    model.reset_classifier(derive_seed(cfg.seed, "head-init"))
    model.set_prompts(build_prompts(cfg, enc))
    model.freeze_backbone()

    params = {k: p for k, p in model.trainable_named_parameters().items() if p.requires_grad}
    oc = cfg.optim
    steps = oc.epochs * math.ceil(len(splits.train) / oc.batch_size)
    opt = AdamW(params, oc.lr, tuple(oc.betas), oc.eps, oc.weight_decay, steps)
    loss_fn = make_loss(cfg.loss, cfg.lam)

    history: list[dict] = []

    def record(epoch: int) -> None:
        if oc.eval_train:
            history.append(evaluate(model, splits.train, cfg.loss, cfg.lam).row(epoch, "train"))
        history.append(evaluate(model, splits.test, cfg.loss, cfg.lam).row(epoch, "test"))

    record(0)
    try:
        _run_epochs(model, params, splits.train, loss_fn, opt, oc.epochs, oc.batch_size, make_rng(cfg.seed, "shuffle/train"), record)
    except TrainingError as err:
        # roll back to the start of the failing epoch so callers can save it
        last_good = getattr(err, "last_good", None)
        if last_good is not None:
            with torch.no_grad():
                for name, value in last_good.items():
                    params[name].copy_(value)
        err.model, err.history = model, history
        raise
    final = evaluate(model, splits.test, cfg.loss, cfg.lam)
    return TrainResult(model, history, final, backbone_state)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
