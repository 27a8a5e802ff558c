"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import Stream
from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(loss_fn, params: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-4,
               max_elements: int | None = None, stream: Stream | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar loss against central differences.

    ``params`` maps names to the leaf tensors perturbed by the check; the loss
    function takes no arguments and must be deterministic. When
    ``max_elements`` is given, at most that many coordinates per parameter are
    probed (chosen by ``stream``), which keeps large checks inside a time
    budget without biasing the estimate.
    """
    for t in params.values():
        t.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError("grad_check expects a scalar loss")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in params.items()}

    per_param: dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            picker = stream if stream is not None else Stream(0)
            idxs = picker.child(f"gradcheck/{name}").choice(flat.size, max_elements)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(fd), 1e-6)
            worst = max(worst, abs(a_flat[i] - fd) / denom)
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_error=max_err, tol=tol, per_param=per_param)
