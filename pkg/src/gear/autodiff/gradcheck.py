"""Central-difference gradient checks.

Values routed through ``stop_gradient`` are recorded on the reference pass
and replayed as constants on every perturbed pass, so the numerical
derivative is taken of the same function the tape differentiates.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from gear.autodiff import tensor as _t
from gear.autodiff.tensor import Tape, Tensor, backward


@contextmanager
def _frozen():
    prev = _t._FREEZER
    fz = _t._Freezer()
    _t._FREEZER = fz
    try:
        yield fz
    finally:
        _t._FREEZER = prev


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def _tensor_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # norm-wise; immune to near-zero coordinates sitting under the roundoff floor
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences of ``f`` at ``x``."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with _frozen() as fz:
        with Tape():
            xt = Tensor(x0.copy(), grad_enabled=True)
            out = f(xt)
            grads = backward(out)
        analytic = grads.get(xt, np.zeros_like(x0))
        fz.recording = False

        def evaluate(v: np.ndarray) -> float:
            fz.cursor = 0
            return f(Tensor(v)).item()

        numeric = np.zeros_like(x0)
        flat = numeric.reshape(-1)
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            flat[i] = (evaluate(xp.reshape(x0.shape)) - evaluate(xm.reshape(x0.shape))) / (2 * h)
    return _rel_err(analytic, numeric)


def param_gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None,
                    per: str = "element") -> dict[str, float]:
    """Check ``loss_fn`` against every (or a sample of) coordinate of each parameter.

    ``loss_fn`` must rebuild its graph on each call from the current
    parameter values. Returns the relative error per parameter name:
    the max over coordinates (``per="element"``) or the norm-wise error of
    the whole gradient tensor (``per="tensor"``).
    """
    if per not in ("element", "tensor"):
        raise ValueError(f"per must be 'element' or 'tensor', got {per!r}")
    score = _rel_err if per == "element" else _tensor_rel_err
    with _frozen() as fz:
        with Tape():
            out = loss_fn()
            grads = backward(out)
        fz.recording = False
        report: dict[str, float] = {}
        for k, p in enumerate(params):
            analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                rng = rng or np.random.default_rng(0)
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(coords.size)
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                fz.cursor = 0
                fp = loss_fn().item()
                flat[i] = orig - h
                fz.cursor = 0
                fm = loss_fn().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * h)
            report[p.name or f"param{k}"] = score(analytic[coords], numeric)
    return report
