"""Synthetic two-modality tasks, missing-modality protocols and JSONL ingestion.

Modality 0 is text-like (integer tokens, token 0 is padding) and modality 1 is
image-like (real-valued patch vectors).  A missing modality is replaced by its
dummy input: an all-padding token sequence or all-zero patches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, FormatError, PatternError, ProtocolError
from .numerics import make_rng

TEXT, IMAGE = 0, 1
MODALITY_NAMES = ("text", "image")
PAD_TOKEN = 0

MissingPattern = frozenset


def check_pattern(pattern, m: int = 2) -> frozenset:
    pattern = frozenset(int(i) for i in pattern)
    bad = [i for i in pattern if not 0 <= i < m]
    if bad:
        raise PatternError(f"modality index {bad[0]} out of range for m={m}")
    return pattern


def pattern_name(pattern) -> str:
    return "+".join(MODALITY_NAMES[i] for i in sorted(pattern)) or "complete"


@dataclass(frozen=True)
class MissingProtocol:
    """Per-modality availability fractions, e.g. ``(1.0, 0.5)`` for text 100% / image 50%.

    Missing sets of different modalities go to disjoint groups of samples, so
    the missing rate is the sum of the per-modality missing fractions.
    """

    availability: tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self):
        avail = tuple(float(a) for a in self.availability)
        object.__setattr__(self, "availability", avail)
        if any(not 0.0 <= a <= 1.0 for a in avail):
            raise ProtocolError(f"availabilities must lie in [0, 1], got {avail}")
        if sum(1.0 - a for a in avail) > 1.0 + 1e-9:
            raise ProtocolError(
                f"protocol {avail} needs more than one missing modality per sample on average;"
                " disjoint missing sets are infeasible"
            )

    @property
    def m(self) -> int:
        return len(self.availability)

    @property
    def missing_rate(self) -> float:
        return sum(1.0 - a for a in self.availability)

    def missing_counts(self, n: int) -> list[int]:
        # the epsilon keeps e.g. 0.3 * 1000 from flooring to 299
        return [int(math.floor(n * (1.0 - a) + 1e-9)) for a in self.availability]


def sample_pattern(protocol: MissingProtocol, n: int, rng: np.random.Generator) -> list[frozenset]:
    """Exact-quota missing patterns for ``n`` samples in random order."""
    counts = protocol.missing_counts(n)
    if sum(counts) > n:
        raise ProtocolError(f"quotas {counts} exceed n={n}")
    order = rng.permutation(n)
    patterns = [frozenset()] * n
    start = 0
    for mod, c in enumerate(counts):
        for idx in order[start : start + c]:
            patterns[idx] = frozenset({mod})
        start += c
    return patterns


def patterns_to_mask(patterns: Sequence, m: int = 2) -> np.ndarray:
    mask = np.zeros((len(patterns), m), dtype=bool)
    for row, pat in enumerate(patterns):
        for i in check_pattern(pat, m):
            mask[row, i] = True
    return mask


@dataclass
class Sample:
    text: np.ndarray
    image: np.ndarray
    label: int | np.ndarray
    pattern: frozenset = frozenset()


@dataclass
class Dataset:
    """Column-stored samples; ``missing[n, i]`` marks modality ``i`` absent in sample ``n``."""

    text: np.ndarray
    image: np.ndarray
    labels: np.ndarray
    missing: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.int64)
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.missing = np.asarray(self.missing, dtype=bool)
        n = len(self.text)
        if not (len(self.image) == len(self.labels) == len(self.missing) == n):
            raise ConfigError("dataset columns have different lengths")
        if self.text.ndim != 2 or self.image.ndim != 3:
            raise ConfigError("text must be (n, T) and image must be (n, P, D)")

    def __len__(self) -> int:
        return len(self.text)

    def __getitem__(self, i: int) -> Sample:
        pattern = frozenset(int(k) for k in np.flatnonzero(self.missing[i]))
        return Sample(self.text[i], self.image[i], self.labels[i], pattern)

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    @property
    def text_len(self) -> int:
        return self.text.shape[1]

    @property
    def num_patches(self) -> int:
        return self.image.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.image.shape[2]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.text[idx], self.image[idx], self.labels[idx], self.missing[idx], self.num_classes)

    def label_matrix(self) -> np.ndarray:
        """Labels as ``(n, K)`` 0/1 rows."""
        if self.multilabel:
            return self.labels.astype(np.float64)
        out = np.zeros((len(self), self.num_classes))
        out[np.arange(len(self)), self.labels] = 1.0
        return out

    def with_patterns(self, patterns: Sequence) -> "Dataset":
        """Copy with ``patterns`` applied and dummy inputs substituted."""
        mask = patterns_to_mask(patterns, self.missing.shape[1])
        return substitute_dummy(
            Dataset(self.text.copy(), self.image.copy(), self.labels.copy(), mask, self.num_classes)
        )


def substitute_dummy(data):
    """Overwrite absent modalities with padding tokens / zero patches.

    Accepts a :class:`Dataset` (modified in place and returned) or a single
    :class:`Sample` (a new sample is returned).
    """
    if isinstance(data, Sample):
        pattern = check_pattern(data.pattern)
        text = np.full_like(data.text, PAD_TOKEN) if TEXT in pattern else data.text
        image = np.zeros_like(data.image) if IMAGE in pattern else data.image
        return Sample(text, image, data.label, pattern)
    data.text[data.missing[:, TEXT]] = PAD_TOKEN
    data.image[data.missing[:, IMAGE]] = 0.0
    return data


@dataclass(frozen=True)
class SyntheticTask:
    """Two-modality classification task with a label that needs both modalities.

    Each sample draws latents ``z_text, z_image ~ N(0, I_K)``; the label is
    ``argmax(text_strength * z_text + image_strength * z_image)``.  Text tokens
    quantise ``z_text`` (position ``t`` encodes coordinate ``t mod K`` with a
    per-position dither) and image patches are a fixed random linear map of
    ``z_image``.  ``noise`` is added to both latents before encoding.
    """

    num_classes: int = 2
    text_len: int = 16
    num_patches: int = 16
    patch_dim: int = 16
    bins: int = 8
    text_strength: float = 1.0
    image_strength: float = 1.0
    noise: float = 0.3
    projection_seed: int = 1234

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.text_len < self.num_classes:
            raise ConfigError("text_len must be at least num_classes")

    @property
    def vocab_size(self) -> int:
        return 1 + self.num_classes * self.bins

    def projection(self) -> np.ndarray:
        rng = make_rng(self.projection_seed, "image-projection")
        return rng.normal(0.0, 1.0, size=(self.num_patches, self.patch_dim, self.num_classes))

    def encode_text(self, z: np.ndarray) -> np.ndarray:
        k, t_len, bins = self.num_classes, self.text_len, self.bins
        pos = np.arange(t_len)
        coord = pos % k
        dither = (pos // k) / math.ceil(t_len / k)
        span = 3.0
        scaled = (z[:, coord] + span) / (2.0 * span) * bins + dither
        level = np.clip(np.floor(scaled), 0, bins - 1).astype(np.int64)
        return 1 + coord * bins + level

    def encode_image(self, z: np.ndarray) -> np.ndarray:
        return np.einsum("pdk,nk->npd", self.projection(), z)


def generate_task(task: SyntheticTask, n: int, rng: np.random.Generator) -> Dataset:
    """``n`` complete samples with exact per-class quotas (remainder to the lowest classes)."""
    k = task.num_classes
    quotas = [n // k + (1 if c < n % k else 0) for c in range(k)]
    chosen_t, chosen_i, labels = [], [], []
    filled = [0] * k
    while any(f < q for f, q in zip(filled, quotas)):
        batch = max(4 * n, 64)
        zt = rng.normal(size=(batch, k))
        zi = rng.normal(size=(batch, k))
        y = np.argmax(task.text_strength * zt + task.image_strength * zi, axis=1)
        for row in range(batch):
            c = int(y[row])
            if filled[c] < quotas[c]:
                filled[c] += 1
                chosen_t.append(zt[row])
                chosen_i.append(zi[row])
                labels.append(c)
    zt = np.array(chosen_t).reshape(-1, k)
    zi = np.array(chosen_i).reshape(-1, k)
    perm = rng.permutation(n)
    zt, zi, labels = zt[perm], zi[perm], np.array(labels, dtype=np.int64)[perm]
    zt_obs = zt + task.noise * rng.normal(size=zt.shape)
    zi_obs = zi + task.noise * rng.normal(size=zi.shape)
    return Dataset(
        text=task.encode_text(zt_obs),
        image=task.encode_image(zi_obs),
        labels=labels,
        missing=np.zeros((n, 2), dtype=bool),
        num_classes=k,
    )


def make_split(
    task: SyntheticTask, n: int, protocol: MissingProtocol, seed: int, split: str
) -> Dataset:
    """Generate a split and apply the protocol, using named sub-streams of ``seed``."""
    data = generate_task(task, n, make_rng(seed, f"data/{split}"))
    patterns = sample_pattern(protocol, n, make_rng(seed, f"pattern/{split}"))
    return data.with_patterns(patterns)


# --- JSONL -----------------------------------------------------------------


def write_jsonl(data: Dataset, path) -> None:
    """One JSON object per sample; absent modalities are written as ``null``."""
    lines = []
    for s in data:
        if data.multilabel:
            label = [int(c) for c in np.flatnonzero(s.label)]
        else:
            label = int(s.label)
        rec = {
            "text_tokens": None if TEXT in s.pattern else [int(t) for t in s.text],
            "image_patches": None if IMAGE in s.pattern else s.image.tolist(),
            "label": label,
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_jsonl(
    path,
    num_classes: int | None = None,
    text_len: int | None = None,
    num_patches: int | None = None,
    patch_dim: int | None = None,
) -> Dataset:
    """Read a JSONL dataset.

    Each line holds ``text_tokens`` (int list or null), ``image_patches``
    (list of float lists or null) and ``label`` (int, or a list of class
    indices for multi-label data).  Shorter token lists are right-padded.
    Shapes not given explicitly are inferred from the data.
    """
    path = Path(path)
    records = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise FormatError(f"{path}:{lineno}: expected a JSON object")
        for key in ("text_tokens", "image_patches", "label"):
            if key not in rec:
                raise FormatError(f"{path}:{lineno}: missing field '{key}'")
        text, image, label = rec["text_tokens"], rec["image_patches"], rec["label"]
        if text is None and image is None:
            raise ProtocolError(f"{path}:{lineno}: both modalities are null")
        try:
            if text is not None:
                text = np.asarray(text, dtype=np.int64)
                if text.ndim != 1:
                    raise ValueError
        except (TypeError, ValueError):
            raise FormatError(f"{path}:{lineno}: field 'text_tokens' must be an int array") from None
        try:
            if image is not None:
                image = np.asarray(image, dtype=np.float64)
                if image.ndim != 2:
                    raise ValueError
        except (TypeError, ValueError):
            raise FormatError(f"{path}:{lineno}: field 'image_patches' must be an array of arrays") from None
        if isinstance(label, bool) or not isinstance(label, (int, list)):
            raise FormatError(f"{path}:{lineno}: field 'label' must be an int or int array")
        if isinstance(label, list) and not all(isinstance(c, int) for c in label):
            raise FormatError(f"{path}:{lineno}: field 'label' must be an int or int array")
        records.append((lineno, text, image, label))

    if not records:
        k = num_classes or 2
        return Dataset(
            np.zeros((0, text_len or 1), dtype=np.int64),
            np.zeros((0, num_patches or 1, patch_dim or 1)),
            np.zeros(0, dtype=np.int64),
            np.zeros((0, 2), dtype=bool),
            k,
        )

    if text_len is None:
        text_len = max((len(t) for _, t, _, _ in records if t is not None), default=1)
    shapes = [im.shape for _, _, im, _ in records if im is not None]
    if num_patches is None or patch_dim is None:
        if not shapes:
            raise FormatError(f"{path}: no image present; pass num_patches and patch_dim")
        num_patches = num_patches or shapes[0][0]
        patch_dim = patch_dim or shapes[0][1]
    multilabel = any(isinstance(lab, list) for _, _, _, lab in records)
    max_label = max(max(lab, default=0) if isinstance(lab, list) else lab for _, _, _, lab in records)
    k = num_classes if num_classes is not None else max(2, max_label + 1)

    n = len(records)
    text_arr = np.full((n, text_len), PAD_TOKEN, dtype=np.int64)
    image_arr = np.zeros((n, num_patches, patch_dim))
    missing = np.zeros((n, 2), dtype=bool)
    labels = np.zeros((n, k)) if multilabel else np.zeros(n, dtype=np.int64)
    for row, (lineno, text, image, label) in enumerate(records):
        if text is None:
            missing[row, TEXT] = True
        else:
            if len(text) > text_len:
                raise FormatError(f"{path}:{lineno}: field 'text_tokens' longer than {text_len}")
            text_arr[row, : len(text)] = text
        if image is None:
            missing[row, IMAGE] = True
        else:
            if image.shape != (num_patches, patch_dim):
                raise FormatError(
                    f"{path}:{lineno}: field 'image_patches' has shape {image.shape},"
                    f" expected {(num_patches, patch_dim)}"
                )
            image_arr[row] = image
        classes = label if isinstance(label, list) else [label]
        if any(not 0 <= c < k for c in classes):
            raise FormatError(f"{path}:{lineno}: field 'label' out of range for {k} classes")
        if multilabel:
            labels[row, classes] = 1.0
        else:
            labels[row] = label
    return Dataset(text_arr, image_arr, labels, missing, k)
