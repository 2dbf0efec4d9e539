"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .tensor import GateRecorder, Graph, Tensor

NORM_FLOOR = 1e-8


@dataclass
class GradReport:
    name: str
    size: int
    grad_norm: float
    rel_error: float  # ||analytic - numeric|| / max(||analytic||, ||numeric||, NORM_FLOOR)
    max_abs_error: float


def central_difference(f: Callable[[], float], flat: np.ndarray, i: int, h: float, order: int) -> float:
    old = flat[i]
    try:
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        if order == 2:
            return (fp - fm) / (2 * h)
        flat[i] = old + 2 * h
        fp2 = f()
        flat[i] = old - 2 * h
        fm2 = f()
        return (8 * (fp - fm) - (fp2 - fm2)) / (12 * h)
    finally:
        flat[i] = old


def check_gradients(loss_fn: Callable[[], Tensor], params: Iterable[tuple[str, Tensor]], h: float = 1e-3,
                    order: int = 4, freeze_gates: bool = True) -> list[GradReport]:
    """Compare ``Graph.backward`` gradients with central differences of ``loss_fn``.

    ``loss_fn`` must rebuild the loss from the current parameter values. With
    ``freeze_gates`` the relu masks and max-pool argmaxes seen at the base point
    are replayed during the perturbed evaluations, so a step of size ``h`` never
    straddles a kink. ``order`` selects the 2- or 4-point central stencil.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    params = list(params)
    for _, p in params:
        p.grad = None
    rec = GateRecorder()
    with rec.record(), Graph() as g:
        loss = loss_fn()
    g.backward(loss, wrt=[p for _, p in params])

    def f() -> float:
        if freeze_gates:
            with rec.replay():
                return float(loss_fn().data)
        return float(loss_fn().data)

    reports = []
    for name, p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1).astype(np.float64)
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"parameter {name} is not contiguous")
        numeric = np.array([central_difference(f, flat, i, h, order) for i in range(flat.size)])
        diff = analytic - numeric
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
        reports.append(GradReport(name, flat.size, float(np.linalg.norm(analytic)),
                                  float(np.linalg.norm(diff) / denom), float(np.abs(diff).max())))
    return reports
