"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

from ..batch import Batch
from ..errors import GradMismatch
from ..model import MKTN


@dataclass
class GradReport:
    checked: int
    worst_path: str
    worst_error: float
    tol: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tol


def gradcheck(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
              eps: float = 1e-4, tol: float = 1e-4,
              analytic: Mapping[str, torch.Tensor] | None = None,
              raise_on_fail: bool = True) -> GradReport:
    """Compare gradients of ``loss_fn`` against central differences, entry by entry.

    ``params`` are leaf tensors that ``loss_fn`` reads in place.  The error
    per entry is ``|analytic - numeric| / max(1, |numeric|)``.  ``analytic``
    overrides the autograd gradients (used for fault injection).
    """
    if analytic is None:
        for p in params.values():
            p.grad = None
        loss = loss_fn()
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        analytic = {name: (torch.zeros_like(p) if g is None else g.detach())
                    for (name, p), g in zip(params.items(), grads)}

    worst = ("", 0.0, 0.0, 0.0)
    per_tensor: dict[str, float] = {}
    checked = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = analytic[name].reshape(-1)
            tensor_worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = float(g[i])
                err = abs(a - numeric) / max(1.0, abs(numeric))
                checked += 1
                tensor_worst = max(tensor_worst, err)
                if err > worst[3]:
                    worst = (f"{name}[{i}]", a, numeric, err)
            per_tensor[name] = tensor_worst
    report = GradReport(checked, worst[0], worst[3], tol, per_tensor)
    if raise_on_fail and not report.passed:
        raise GradMismatch(worst[0], worst[1], worst[2], worst[3])
    return report


def gradcheck_model(model: MKTN, batch: Batch, phi: float, eps: float = 1e-4, tol: float = 1e-4,
                    names: list[str] | None = None, raise_on_fail: bool = True) -> GradReport:
    """Finite-difference check of the total loss over the model's parameters in float64."""
    model = model.double()
    batch = batch.to(torch.float64)
    params = {n: p for n, p in model.named_parameters() if names is None or n in names}

    def loss_fn():
        return model(batch, phi).total

    return gradcheck(loss_fn, params, eps=eps, tol=tol, raise_on_fail=raise_on_fail)
