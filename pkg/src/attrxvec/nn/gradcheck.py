"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> relative error
    abs_errors: dict = field(default_factory=dict)

    @property
    def max_rel_error(self):
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance):
        return self.max_rel_error < tolerance

    def __str__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"{len(self.errors)} tensors, max relative error {self.max_rel_error:.3e} ({worst})"


def relative_error(analytic, numeric, floor=1e-7):
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor)
    return float(diff / scale)


def numeric_gradient(loss_fn, array, h=1e-4):
    grad = np.zeros_like(array, dtype=np.float64)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn())
        flat[i] = orig - h
        down = float(loss_fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def grad_check(loss_fn, params, h=1e-4):
    """Compare analytic and central-difference gradients for every tensor in ``params``.

    ``loss_fn`` returns a scalar Tensor built from the current parameter values.
    ``params`` maps name -> Tensor (leaf, requires_grad).
    """
    report = GradCheckReport()
    if not params:
        return report
    for t in params.values():
        t.grad = None
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite loss at the probe point")
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for k, t in params.items()}

    def scalar():
        value = loss_fn().data
        if not np.all(np.isfinite(value)):
            raise NumericError("non-finite loss during finite differencing")
        return value

    for name, t in params.items():
        numeric = numeric_gradient(scalar, t.data, h)
        report.errors[name] = relative_error(analytic[name], numeric)
        report.abs_errors[name] = float(np.max(np.abs(analytic[name] - numeric), initial=0.0))
    return report
