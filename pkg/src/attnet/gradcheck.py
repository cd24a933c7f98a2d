"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradientReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    failures: list = field(default_factory=list)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self):
        return not self.failures and self.max_error < self.tolerance

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        lines += [f"FAILED: {msg}" for msg in self.failures]
        return "\n".join(lines)


def relative_error(analytic, numeric):
    """``max|a - n| / max(max|a|, max|n|)`` (0 when both vanish)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _scalarize(out, rng):
    if out.size == 1:
        return out.sum()
    weights = Tensor(rng.standard_normal(out.shape), dtype=out.dtype)
    return (out * weights).sum()


def check_gradient(op, inputs, tolerance=1e-4, step=1e-5, seed=0, max_entries=None):
    """Compare the backward pass of ``op(*inputs)`` with central differences.

    ``inputs`` are tensors (or Parameters); only those with
    ``requires_grad`` are checked.  Non-scalar outputs are reduced with a
    fixed random projection.  ``max_entries`` caps the number of probed
    elements per input (chosen at random), which keeps large checks cheap.
    """
    inputs = list(inputs)
    report = GradientReport(tolerance=tolerance)
    proj_seed = np.random.SeedSequence(seed).generate_state(1)[0]

    def evaluate():
        out = op(*inputs)
        return _scalarize(out, np.random.default_rng(proj_seed))

    for t in inputs:
        t.grad = None
    loss = evaluate()
    if not np.isfinite(loss.data).all():
        report.failures.append("non-finite forward value")
        return report
    loss.backward()

    pick = np.random.default_rng(seed + 1)
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        name = getattr(t, "name", f"input{i}")
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = np.sort(pick.choice(flat.size, size=max_entries, replace=False))
        numeric = np.zeros(len(positions))
        for k, pos in enumerate(positions):
            original = flat[pos]
            flat[pos] = original + step
            plus = float(evaluate().data)
            flat[pos] = original - step
            minus = float(evaluate().data)
            flat[pos] = original
            numeric[k] = (plus - minus) / (2 * step)
        if not np.isfinite(numeric).all() or not np.isfinite(analytic).all():
            report.failures.append(f"{name}: non-finite gradient")
            continue
        report.errors[name] = relative_error(analytic.reshape(-1)[positions], numeric)
    return report
