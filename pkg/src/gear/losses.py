"""Scalar objectives: MAE, GMAE, bias weights, IPW-reweighted MAE, total."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from gear.autodiff import Tensor, abs_, add, detach, mean, mul, softplus, sub
from gear.autodiff.tensor import as_tensor
from gear.errors import ConfigError, ContractError

# Which parameter group each term of the total objective is routed to.
ROUTING = {
    "l_ipw": "robust",
    "l_ipw_hat": "robust",
    "l_gmae": "biased",
    "l_gmae_hat": "biased",
}


def mae(y, y_pred) -> Tensor:
    """Per-sample |y - y_pred|."""
    return abs_(sub(as_tensor(y), as_tensor(y_pred)))


def gmae(y, y_bias) -> Tensor:
    """Per-sample GMAE, -2 ln(exp(e) + 1) + 2e with e = |y - y_bias|.

    Evaluated as -2 softplus(-e), which is the same function without the
    overflow of exp(e).
    """
    e = mae(y, y_bias)
    return mul(softplus(mul(e, -1.0)), -2.0)


def gmae_grad_weight(e) -> np.ndarray | float:
    """2 / (1 + exp(e)): the factor by which GMAE rescales the MAE gradient."""
    e_arr = np.asarray(e, dtype=np.float64)
    if np.any(e_arr < 0):
        raise ContractError("gmae_grad_weight requires e >= 0")
    w = 2.0 * np.exp(-np.logaddexp(0.0, e_arr))
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class BiasWeightStrategy:
    kind: Literal["min", "avg"] = "min"
    eps: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("min", "avg"):
            raise ConfigError(f"unknown bias-weight strategy {self.kind!r}")
        # eps == 0 reproduces the unguarded formula; negative is never valid
        if self.eps < 0:
            raise ConfigError("strategy eps must be non-negative")


def bias_weight(errs, strategy: BiasWeightStrategy = BiasWeightStrategy()) -> np.ndarray | float:
    """Bias weight psi from per-modality biased-head errors.

    ``errs`` has the modalities on its last axis. Min picks the most biased
    modality, Avg averages them; both invert.
    """
    e = np.asarray(errs, dtype=np.float64)
    if np.any(e < 0):
        raise ContractError("bias errors must be non-negative")
    agg = e.min(axis=-1) if strategy.kind == "min" else e.mean(axis=-1)
    with np.errstate(divide="ignore"):
        psi = 1.0 / (agg + strategy.eps)
    return float(psi) if np.ndim(psi) == 0 else psi


def ipw_factor(psi, err, c: float = 1.0) -> np.ndarray:
    """1 / (c * psi * err + 1), with err the detached prediction error."""
    if c <= 0:
        raise ConfigError("ipw proportionality constant must be positive")
    return 1.0 / (c * np.asarray(psi, dtype=np.float64) * np.asarray(err, dtype=np.float64) + 1.0)


def ipw_mae(y, y_pred, psi, c: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """IPW-reweighted MAE per sample and the (constant) reweighting factor.

    Only the undetached |y - y_pred| carries gradient.
    """
    err = mae(y, y_pred)
    factor = ipw_factor(psi, detach(err), c)
    return mul(err, factor), factor


@dataclass
class LossBreakdown:
    l_ipw: Tensor
    l_gmae: list[Tensor]
    l_ipw_hat: Tensor
    l_gmae_hat: list[Tensor]
    total: Tensor
    lam: float
    beta: float
    bias_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ipw_factors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    routing: dict = field(default_factory=lambda: dict(ROUTING))

    def scalars(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "l_ipw": self.l_ipw.item(),
            "l_ipw_hat": self.l_ipw_hat.item(),
            "l_gmae": [t.item() for t in self.l_gmae],
            "l_gmae_hat": [t.item() for t in self.l_gmae_hat],
        }


def _sum(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = add(out, t)
    return out


def total_loss(l_ipw: Tensor, l_gmae: Sequence[Tensor], l_ipw_hat: Tensor,
               l_gmae_hat: Sequence[Tensor], lam: float, beta: float, *,
               bias_weights=None, ipw_factors=None) -> LossBreakdown:
    """L_ipw + lam * sum_m L_gmae^m + beta * (L^_ipw + lam * sum_m L^_gmae^m).

    Inputs are batch-mean scalars.
    """
    if lam < 0 or beta < 0:
        raise ConfigError("lambda and beta must be non-negative")
    main = add(l_ipw, mul(_sum(l_gmae), lam))
    swapped = add(l_ipw_hat, mul(_sum(l_gmae_hat), lam))
    total = add(main, mul(swapped, beta))
    return LossBreakdown(
        l_ipw=l_ipw, l_gmae=list(l_gmae), l_ipw_hat=l_ipw_hat, l_gmae_hat=list(l_gmae_hat),
        total=total, lam=lam, beta=beta,
        bias_weights=np.zeros(0) if bias_weights is None else np.asarray(bias_weights),
        ipw_factors=np.zeros(0) if ipw_factors is None else np.asarray(ipw_factors),
    )


def batch_mean(per_sample: Tensor) -> Tensor:
    return mean(per_sample)
