"""Finite-difference gradient verification for the full model.

Central differences with h = 1e-5 against the analytic backward pass, on a
model small enough that every single parameter entry is checked in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import numcore
from .features import FeatureWindow
from .model import ModelConfig, ModelParams
from .training import bce_grad_from_logit, bce_loss_from_logit

REL_TOL = 1e-4
FLOOR = 1e-3


def max_relative_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps tiny grads comparable."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    n_checked: int = 0
    n_failed: int = 0
    worst_error: float = 0.0
    worst_entry: str = ""
    failures: list[str] = field(default_factory=list)
    per_tensor: dict = field(default_factory=dict)   # name -> (max_err, n_failed)

    @property
    def passed(self) -> bool:
        return self.n_failed == 0 and self.n_checked > 0

    def failed_tensors(self) -> list[str]:
        return [name for name, (_, bad) in self.per_tensor.items() if bad]


def check_parameter_gradients(
    params: list[numcore.Param],
    loss_fn,
    grad_fn,
    h: float = 1e-5,
    rel_tol: float = REL_TOL,
) -> GradCheckReport:
    """Compare grad_fn's analytic gradients to central differences of loss_fn.

    loss_fn() -> float evaluates the loss at the current parameter values;
    grad_fn() must zero grads, run backward, and leave dL/dtheta in .grad.
    Every entry of every parameter is checked.
    """
    grad_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    report = GradCheckReport()
    for p in params:
        rows, cols = p.value.shape
        tensor_max = 0.0
        tensor_failed = 0
        for r in range(rows):
            for c in range(cols):
                orig = p.value[r, c]
                p.value[r, c] = orig + h
                up = loss_fn()
                p.value[r, c] = orig - h
                down = loss_fn()
                p.value[r, c] = orig
                numeric = (up - down) / (2.0 * h)
                err = max_relative_error(analytic[p.name][r, c], numeric)
                report.n_checked += 1
                tensor_max = max(tensor_max, err)
                if err > report.worst_error:
                    report.worst_error = err
                    report.worst_entry = f"{p.name}[{r},{c}]"
                if err > rel_tol:
                    report.n_failed += 1
                    tensor_failed += 1
                    if len(report.failures) < 20:
                        report.failures.append(
                            f"{p.name}[{r},{c}]: analytic={analytic[p.name][r, c]:.6e} "
                            f"numeric={numeric:.6e} rel_err={err:.3e}"
                        )
        report.per_tensor[p.name] = (tensor_max, tensor_failed)
    return report


def tiny_model_setup(seed: int = 0) -> tuple[ModelParams, list[FeatureWindow]]:
    """A d=8 model plus three windows with pad prefixes 0, 2 and 4."""
    config = ModelConfig(d=8, n_heads=2, seq_len=6, n_questions=10, d_ff=16, d_e=8)
    rng = numcore.new_rng(seed)
    params = ModelParams.init(config, rng)
    windows = []
    for pad in (0, 2, 4):
        L = config.seq_len
        real = L - pad
        qids = rng.integers(1, config.n_questions + 1, size=L)
        parts = rng.integers(1, 8, size=L)
        corr = rng.integers(1, 3, size=L)
        qids[:pad] = 0
        parts[:pad] = 0
        corr[:pad] = 0
        corr[-1] = 3
        elapsed = rng.random(L)
        tdiff = rng.random(L)
        elapsed[:pad] = 0.0
        tdiff[:pad] = 0.0
        elapsed[-1] = 0.0
        pad_mask = np.zeros(L, dtype=bool)
        pad_mask[:pad] = True
        windows.append(FeatureWindow(
            question_id=qids, part=parts, correctness=corr,
            elapsed_norm=elapsed, tdiff_norm=tdiff, pad_mask=pad_mask,
            label=int(rng.integers(0, 2)), user_id=pad, end_index=real - 1,
        ))
    return params, windows


def tiny_model_check(seed: int = 0, h: float = 1e-5) -> GradCheckReport:
    """Exhaustive finite-difference check of every parameter of a tiny model."""
    params, windows = tiny_model_setup(seed)

    def loss_fn() -> float:
        total = 0.0
        for w in windows:
            logit, _ = model_mod.forward_logit(w, params)
            total += bce_loss_from_logit(logit, w.label)
        return total / len(windows)

    def grad_fn() -> None:
        params.zero_grads()
        for w in windows:
            logit, cache = model_mod.forward_logit(w, params)
            model_mod.backward_from_logit(
                bce_grad_from_logit(logit, w.label) / len(windows), cache, params
            )

    return check_parameter_gradients(params.params(), loss_fn, grad_fn, h=h)
