"""Central-difference verification of autodiff gradients."""
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    tolerance: float
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures


def _targets(obj):
    if isinstance(obj, Tensor):
        return [("x", obj)]
    if hasattr(obj, "named_parameters"):
        return [(n, p) for n, p in obj.named_parameters() if p.requires_grad]
    return [(n, t) for n, t in obj]


def _pick(sizes, n, rng):
    """Coordinates spread over every target, each target getting at least one."""
    total = sum(sizes)
    if total <= n:
        return [(t, i) for t, s in enumerate(sizes) for i in range(s)]
    out = [(t, int(rng.integers(s))) for t, s in enumerate(sizes) if s]
    offsets = np.cumsum([0] + sizes)
    seen = {offsets[t] + i for t, i in out}
    extra = [int(g) for g in rng.permutation(total) if int(g) not in seen][:max(0, n - len(out))]
    for g in extra:
        t = int(np.searchsorted(offsets, g, side="right") - 1)
        out.append((t, g - int(offsets[t])))
    return out


def finite_difference_check(model, loss_fn, epsilon=1e-5, tolerance=1e-3, n_coords=50, seed=0):
    """Compare autodiff and central-difference gradients on sampled coordinates.

    ``model`` is a Model (its trainable parameters are probed), a single
    Tensor, or a list of ``(name, Tensor)`` pairs; ``loss_fn(model)`` must
    return a scalar Tensor and be deterministic (freeze observers first).
    Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator. Offending
    coordinates are listed in the report rather than raised.
    """
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    targets = _targets(model)
    for _, t in targets:
        t.grad = np.zeros_like(t.data)
        t.requires_grad = True
    loss = loss_fn(model)
    loss.backward()
    analytic = [t.grad.copy() for _, t in targets]
    rng = np.random.default_rng(seed)
    coords = _pick([t.data.size for _, t in targets], n_coords, rng)
    failures, worst = [], 0.0
    for ti, flat in coords:
        name, t = targets[ti]
        idx = np.unravel_index(flat, t.data.shape)
        orig = t.data[idx].copy()
        with no_grad():
            t.data[idx] = orig + epsilon
            f_plus = float(loss_fn(model).data)
            t.data[idx] = orig - epsilon
            f_minus = float(loss_fn(model).data)
        t.data[idx] = orig
        numeric = (f_plus - f_minus) / (2 * epsilon)
        a = float(analytic[ti][idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
        if rel > tolerance:
            failures.append({"param": name, "index": [int(i) for i in idx], "analytic": a, "numeric": numeric,
                             "rel_error": rel})
    return GradCheckReport(len(coords), worst, tolerance, failures)
