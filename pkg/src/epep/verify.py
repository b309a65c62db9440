"""Self-contained oracle and gradient suites behind ``epep verify``.

Each suite is a list of named checks.  A check names the operation it
exercises so that a regression reports *which* routine broke.  Functions are
looked up through their modules at call time, so patching e.g.
``epep.bkm.bkm_gradients`` is visible here.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import bkm, evidential, metrics, numerics
from .numerics import finite_diff_grad, make_rng, max_rel_error

EULER_GAMMA = 0.5772156649015329


@dataclass
class CheckResult:
    operation: str
    ok: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def failing_operations(self) -> list[str]:
        return sorted({c.operation for c in self.checks if not c.ok})

    def line(self) -> str:
        if self.ok:
            return f"PASS {self.name} ({len(self.checks)} checks)"
        failed = [c for c in self.checks if not c.ok]
        return f"FAIL {self.name}: {failed[0].operation}: {failed[0].detail} ({len(failed)}/{len(self.checks)} checks failed)"


def _check(results: list, operation: str, ok: bool, detail: str = "") -> None:
    results.append(CheckResult(operation, bool(ok), detail))


def _guard(results: list, operation: str, fn) -> None:
    try:
        fn()
    except Exception as exc:  # a crash in a routine is a failed check, not a crashed run
        _check(results, operation, False, f"{type(exc).__name__}: {exc}")


# --- suites -----------------------------------------------------------------


def suite_numerics() -> list[CheckResult]:
    out: list[CheckResult] = []

    def values():
        err = abs(numerics.digamma(1.0) + EULER_GAMMA)
        _check(out, "digamma", err < 1e-12, f"digamma(1) off by {err:.2e}")
        err = abs(numerics.trigamma(1.0) - math.pi**2 / 6)
        _check(out, "trigamma", err < 1e-12, f"trigamma(1) off by {err:.2e}")
        for x in (0.5, 3.0, 7.5, 40.0, 1e4):
            err = abs(numerics.lgamma(x) - math.lgamma(x))
            _check(out, "lgamma", err < 1e-10 * max(1.0, abs(math.lgamma(x))), f"lgamma({x}) off by {err:.2e}")

    def recurrences():
        x = make_rng(0, "verify/numerics").uniform(0.05, 50.0, size=200)
        err = np.max(np.abs(numerics.digamma(x + 1) - numerics.digamma(x) - 1 / x))
        _check(out, "digamma", err < 1e-10, f"recurrence residual {err:.2e}")
        err = np.max(np.abs(numerics.trigamma(x) - numerics.trigamma(x + 1) - 1 / x**2) * x**2)
        _check(out, "trigamma", err < 1e-10, f"recurrence residual {err:.2e}")
        err = np.max(np.abs(numerics.lgamma(x + 1) - numerics.lgamma(x) - np.log(x)))
        _check(out, "lgamma", err < 1e-10, f"recurrence residual {err:.2e}")

    _guard(out, "special functions", values)
    _guard(out, "special function recurrences", recurrences)
    return out


def _naive_bkm(a: np.ndarray, b: np.ndarray, m: int) -> np.ndarray:
    d, l = b.shape
    p, q = d // m, l // m
    out = np.empty_like(b)
    for i in range(m):
        for j in range(m):
            out[i * p : (i + 1) * p, j * q : (j + 1) * q] = a[i, j] * b[i * p : (i + 1) * p, j * q : (j + 1) * q]
    return out


def suite_bkm() -> list[CheckResult]:
    out: list[CheckResult] = []
    rng = make_rng(0, "verify/bkm")

    def oracle():
        worst = 0.0
        for _ in range(100):
            m = int(rng.integers(1, 5))
            d, l = m * int(rng.integers(1, 5)), m * int(rng.integers(1, 5))
            a, b = rng.normal(size=(m, m)), rng.normal(size=(d, l))
            worst = max(worst, float(np.max(np.abs(bkm.bkm_multiply(a, b) - _naive_bkm(a, b, m)))))
        _check(out, "bkm_multiply", worst == 0.0, f"max deviation from blockwise loop {worst:.2e}")

    def gradients():
        for trial in range(10):
            m = int(rng.integers(1, 4))
            part = bkm.BlockPartition(m, m * int(rng.integers(1, 4)), m * int(rng.integers(1, 4)))
            r = int(rng.integers(1, min(part.block_rows, part.block_cols) + 1))
            prompt = bkm.LowRankPrompt.random(part, r, rng)
            a = rng.normal(size=(m, m))
            g = rng.normal(size=(part.d, part.l))
            ga, gu, gv = bkm.bkm_gradients(a, prompt, g)

            def f_a(x):
                return float(np.sum(g * bkm.bkm_multiply(x, bkm.materialize(prompt))))

            def f_u(x):
                return float(np.sum(g * bkm.bkm_multiply(a, bkm.materialize(bkm.LowRankPrompt(part, x, prompt.v)))))

            def f_v(x):
                return float(np.sum(g * bkm.bkm_multiply(a, bkm.materialize(bkm.LowRankPrompt(part, prompt.u, x)))))

            for label, got, f, x in (("a", ga, f_a, a), ("u", gu, f_u, prompt.u), ("v", gv, f_v, prompt.v)):
                err = max_rel_error(got, finite_diff_grad(f, x))
                _check(out, "bkm_gradients", err < 1e-5, f"d/d{label} rel error {err:.2e} (trial {trial})")

    _guard(out, "bkm_multiply", oracle)
    _guard(out, "bkm_gradients", gradients)
    return out


def suite_evidential() -> list[CheckResult]:
    out: list[CheckResult] = []

    def examples():
        ev = evidential.evidence_from_logits
        cases = [
            ("loss_eb", evidential.loss_eb(ev([0.0, 0.0]), [1, 0]), 1.0, 1e-10),
            ("loss_eb", evidential.loss_eb(ev([9.0, 0.0]), [1, 0]), 0.1, 1e-10),
            ("kl_to_uniform", evidential.kl_to_uniform([2.0, 1.0]), math.log(2) - 0.5, 1e-10),
            ("kl_to_uniform", evidential.kl_to_uniform(np.ones(5)), 0.0, 1e-12),
        ]
        for op, got, want, tol in cases:
            _check(out, op, abs(got - want) <= tol, f"got {got!r}, expected {want!r}")

    def gradients():
        rng = make_rng(0, "verify/evidential")
        for lam in (0.0, 0.004, 0.5, 1.0):
            done = 0
            while done < 20:
                k = int(rng.integers(2, 6))
                z = rng.normal(0.0, 3.0, size=k)
                if np.min(np.abs(z)) < 1e-3:
                    continue
                y = evidential.one_hot(int(rng.integers(k)), k)

                def f(x, y=y, lam=lam):
                    return evidential.loss_combined(evidential.evidence_from_logits(x), y, lam)

                err = max_rel_error(evidential.evidential_gradients(z, y, lam), finite_diff_grad(f, z))
                _check(out, "evidential_gradients", err < 1e-5, f"rel error {err:.2e} at lambda={lam}")
                done += 1

    _guard(out, "evidential examples", examples)
    _guard(out, "evidential_gradients", gradients)
    return out


def _pair_count_auroc(scores: np.ndarray, golds: np.ndarray) -> float:
    pos, neg = scores[golds == 1], scores[golds == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def suite_metrics() -> list[CheckResult]:
    out: list[CheckResult] = []

    def auroc_oracle():
        rng = make_rng(0, "verify/metrics")
        bad = 0
        for _ in range(1000):
            n = int(rng.integers(2, 51))
            golds = rng.integers(0, 2, size=n)
            golds[: 2] = (0, 1)
            # coarse scores so ties are common
            scores = rng.integers(0, 8, size=n) / 8.0
            if metrics.auroc(scores, golds) != _pair_count_auroc(scores, golds):
                bad += 1
        _check(out, "auroc", bad == 0, f"{bad}/1000 instances disagree with pair counting")
        got = metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        _check(out, "auroc", got == 0.75, f"textbook example gave {got!r}")

    def f1_fixtures():
        cases = [
            (metrics.f1_macro([0, 0, 0, 0], [0, 0, 1, 1], 2), 1 / 3),
            (metrics.f1_macro([0, 1, 1, 0], [0, 1, 1, 0], 2), 1.0),
            (metrics.f1_macro([1, 1, 0, 0], [0, 0, 1, 1], 2), 0.0),
        ]
        for got, want in cases:
            _check(out, "f1_macro", abs(got - want) < 1e-15, f"got {got!r}, expected {want!r}")

    _guard(out, "auroc", auroc_oracle)
    _guard(out, "f1_macro", f1_fixtures)
    return out


def suite_model_gradients() -> list[CheckResult]:
    from . import model as model_mod
    from .data import MissingProtocol, SyntheticTask, make_split
    from .losses import evidential_loss
    from .prompting import PromptBank

    out: list[CheckResult] = []

    def spot_check():
        task = SyntheticTask(text_len=6, num_patches=4, patch_dim=5)
        cfg = model_mod.EncoderConfig(
            d_model=8, layers=2, heads=2, text_len=6, num_patches=4, patch_dim=5, text_vocab=task.vocab_size, prompt_len=4
        )
        bank = PromptBank(2, 8, 4, 2, rng=make_rng(0, "verify/bank"))
        net = model_mod.MultimodalEncoder(cfg, bank, seed=0)
        net.freeze_backbone()
        data = make_split(task, 10, MissingProtocol((0.75, 0.75)), 0, "verify")
        y = torch.from_numpy(data.label_matrix())
        with torch.no_grad():
            net.classifier.bias.add_(3.0)  # keep logits off the relu kink

        def loss(z, d):
            return evidential_loss(z, y)

        grads = model_mod.trainable_gradients(net, data, loss)
        params = net.trainable_named_parameters()
        batch = model_mod.batch_tensors(data, slice(None))
        rng = make_rng(1, "verify/coords")
        names = ["prompts.0.weights", "prompts.0.u", "prompts.0.v"]
        h = 1e-5
        for _ in range(10):
            name = names[int(rng.integers(3))]
            p = params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                f_plus = float(loss(net(*batch), data))
                p[idx] = orig - h
                f_minus = float(loss(net(*batch), data))
                p[idx] = orig
            err = max_rel_error(grads[name][idx], (f_plus - f_minus) / (2 * h))
            _check(out, "trainable_gradients", err < 1e-4, f"{name}{list(idx)} rel error {err:.2e}")

    _guard(out, "trainable_gradients", spot_check)
    return out


SUITES = {
    "numerics": suite_numerics,
    "bkm": suite_bkm,
    "evidential": suite_evidential,
    "metrics": suite_metrics,
    "model-gradients": suite_model_gradients,
}


def run_suites(names=None) -> list[SuiteResult]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite {unknown[0]!r}; choose from {', '.join(SUITES)}")
    return [SuiteResult(n, SUITES[n]()) for n in names]
