"""Finite-difference audits of composed model losses.

The op-level checker (tensor.grad_check) probes one tensor at a time. The
helpers here sweep a whole parameter registry: every parameter is promoted
to float64 for the duration of the audit so the central differences are not
drowned by float32 rounding, then each slot is probed with grad_check and
restored.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, grad_check


def audit_gradients(slots: "OrderedDict[str, tuple[dict, str]]", loss_builder,
                    eps: float = 1e-3, param_names=None) -> "OrderedDict[str, float]":
    """Max relative FD error of d(loss)/d(param) for each selected slot.

    ``slots`` maps a parameter name to its (params-dict, key) location, as
    produced by the models' ``param_slots``. ``loss_builder`` must recompute
    the scalar loss from the tensors currently sitting in those slots.
    """
    originals = {name: d[k] for name, (d, k) in slots.items()}
    results: "OrderedDict[str, float]" = OrderedDict()
    try:
        promoted = {}
        for name, (d, k) in slots.items():
            promoted[name] = Tensor(
                originals[name].data.astype(np.float64),
                requires_grad=True,
                dtype=np.float64,
            )
            d[k] = promoted[name]
        for name in param_names if param_names is not None else list(slots):
            d, k = slots[name]

            def probe(v, d=d, k=k):
                prev = d[k]
                d[k] = v
                try:
                    return loss_builder()
                finally:
                    d[k] = prev

            results[name] = grad_check(probe, promoted[name], eps)
    finally:
        for name, (d, k) in slots.items():
            d[k] = originals[name]
    return results


def nonzero_grad_norms(named_params: "OrderedDict[str, Tensor]") -> dict:
    """Gradient L2 norm per parameter (0.0 where no gradient arrived)."""
    return {
        name: (0.0 if t.grad is None else float(np.linalg.norm(t.grad)))
        for name, t in named_params.items()
    }
