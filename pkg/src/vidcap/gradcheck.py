"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad

# Entries whose analytic and numeric gradients both fall below this floor are
# compared in absolute terms. Central differences at h=1e-5 on an O(10) loss
# carry ~eps*|f|/h = 2e-10 of roundoff, so a 1e-4 floor keeps that noise at
# ~2e-6 relative, well under the usual 1e-4 tolerance.
ABS_FLOOR = 1e-4


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


@dataclass
class GradCheckReport:
    tol: float
    h: float
    max_rel_error: dict = field(default_factory=dict)
    worst_index: dict = field(default_factory=dict)
    n_checked: int = 0

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tol

    def lines(self):
        out = []
        for name, err in self.max_rel_error.items():
            flag = "ok" if err < self.tol else "FAIL"
            out.append(f"{name:<24} max_rel_err={err:.3e} {flag}")
        return out


def grad_check(f, params, h=1e-5, tol=1e-4, names=None, floor=ABS_FLOOR):
    """Compare the tape gradient of ``f(params)`` with central differences.

    ``f`` takes the :class:`ParameterStore` and returns a scalar Tensor; it must
    be deterministic. Every scalar of each checked parameter is perturbed by
    ``+-h``. Failures are reported, never raised.
    """
    names = params.trainable() if names is None else list(names)
    params.zero_grad()
    f(params).backward()
    analytic = {n: params.grad(n).copy() for n in names}
    report = GradCheckReport(tol=tol, h=h)
    with no_grad():
        for name in names:
            t = params[name]
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(params).item()
                flat[i] = orig - h
                fm = f(params).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
            err = relative_error(analytic[name], numeric, floor)
            report.max_rel_error[name] = float(err.max()) if err.size else 0.0
            report.worst_index[name] = int(err.argmax()) if err.size else -1
            report.n_checked += flat.size
    params.zero_grad()
    return report
