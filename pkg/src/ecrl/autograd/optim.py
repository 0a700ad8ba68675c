"""Adam optimizer and finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, default_dtype


class ConfigError(ValueError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to tensors whose ``.grad`` is populated; a missing
    grad counts as zero.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ConfigError(f"optimizer state for {name} has shape {m.shape}, param {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return params


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adam_step(self.params, self.state, self.lr, *self.betas, self.eps)


class GradCheckFailure(AssertionError):
    def __init__(self, report):
        self.report = report
        bad = ", ".join(f"{k} ({v:.3g})" for k, v in report.failures.items())
        super().__init__(f"gradient check failed for: {bad}")


@dataclass
class GradCheckReport:
    errors: dict
    tol: float

    @property
    def failures(self):
        return {k: e for k, e in self.errors.items() if not e < self.tol}

    @property
    def passed(self):
        return not self.failures

    def lines(self):
        for name, err in self.errors.items():
            status = "ok" if err < self.tol else "FAIL"
            yield f"{status:4s} {name:32s} max_rel_err={err:.3e}"


def grad_check(model_fn, params, tol=1e-4, h=1e-5, floor=1e-6, raise_on_failure=False):
    """Compare tape gradients with central finite differences, parameter by parameter.

    ``model_fn()`` must return a scalar tensor computed from ``params``. The
    relative error of entry k is ``|a - n| / max(|a|, |n|, floor * max(1, |loss|))``;
    the loss-scaled floor keeps entries below the resolution of the central
    difference from reporting pure rounding noise.
    """
    params = dict(params)
    for p in params.values():
        if p.data.dtype != np.float64:
            raise ConfigError("grad_check requires 64-bit parameters")
        p.grad = None
    with default_dtype(np.float64):
        with Tape() as tape:
            loss = model_fn()
            tape.backward(loss, params.values())
        floor = floor * max(1.0, abs(loss.item()))
        errors = {}
        for name, p in params.items():
            analytic = p.grad.copy()
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = model_fn().item()
                flat[k] = orig - h
                fm = model_fn().item()
                flat[k] = orig
                numeric[k] = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            errors[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    report = GradCheckReport(errors, tol)
    if raise_on_failure and not report.passed:
        raise GradCheckFailure(report)
    return report
