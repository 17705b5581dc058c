"""Virtual adversarial perturbations and the VAT regularizer.

The posterior at clip level is a product of per-class Bernoullis, so the
divergence used throughout is the per-class Bernoulli KL summed over
classes. ``model`` arguments are callables ``model(params, x) -> y`` that
map a (B, ...) input tensor to (B, M) clip probabilities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7

Model = Callable[[Mapping[str, Tensor], Tensor], Tensor]


@dataclass
class VatConfig:
    epsilon: float = 0.5
    xi: float = 1e-6
    power_iterations: int = 1
    lam: float = 1.0
    # the xi-probe is evaluated at this precision; xi * unit-norm directions
    # vanish under 32-bit rounding of log-mel inputs
    probe_dtype: str = "float64"

    def __post_init__(self):
        if self.epsilon <= 0 or self.xi <= 0:
            raise ValueError("vat epsilon and xi must be positive")
        if self.power_iterations < 1:
            raise ValueError("vat power_iterations must be >= 1")
        if self.lam < 0:
            raise ValueError("vat lambda must be >= 0")


def binary_kl(p, q) -> np.ndarray:
    """Summed per-class Bernoulli KL[p || q] over the last axis (numpy)."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    q = np.clip(np.asarray(q, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    kl = p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))
    return kl.sum(axis=-1)


def binary_kl_tensor(p: np.ndarray, q: Tensor, nonneg: bool = True) -> Tensor:
    """Differentiable in ``q`` only; ``p`` is a constant reference. Returns (B,).

    ``nonneg`` clamps each item at zero; the xi-probe disables it because
    its divergences are O(xi^2) and a clamp would zero their gradient.
    """
    p = np.clip(np.asarray(p, dtype=q.dtype), PROB_EPS, 1 - PROB_EPS)
    q = ad.clip(q, PROB_EPS, 1 - PROB_EPS)
    const = p * np.log(p) + (1 - p) * np.log(1 - p)
    cross = ad.log(q) * p + ad.log(1.0 - q) * (1 - p)
    kl = ad.tsum(const - cross, axis=-1)
    # rounding can push a near-zero divergence slightly negative
    return ad.clip(kl, 0.0, np.inf) if nonneg else kl


def _unit(d: np.ndarray) -> np.ndarray:
    norms = np.sqrt((d.reshape(d.shape[0], -1) ** 2).sum(axis=1))
    return d / norms.reshape((-1,) + (1,) * (d.ndim - 1))


def vadv_perturbation(model: Model, params: Mapping[str, Tensor], x: np.ndarray,
                      config: VatConfig, rng: np.random.Generator) -> np.ndarray:
    """Power-iteration estimate of the KL-maximizing perturbation of norm epsilon.

    Each item along the leading axis gets its own direction with L2 norm
    ``config.epsilon``. Items whose KL gradient vanishes keep their random
    starting direction. The reference posterior is recomputed at probe
    precision so that rounding noise does not swamp the xi-scale difference.
    """
    dtype = np.dtype(config.probe_dtype)
    x = np.asarray(x)
    x64 = Tensor(x.astype(dtype))
    probe_params = {k: Tensor(v.data.astype(dtype)) for k, v in params.items()}
    p_probe = model(probe_params, x64).data
    d = _unit(rng.standard_normal(x.shape).astype(dtype))
    for _ in range(config.power_iterations):
        dt = Tensor(d, requires_grad=True)
        q = model(probe_params, x64 + dt * config.xi)
        kl = ad.tsum(binary_kl_tensor(p_probe, q, nonneg=False))
        (g,) = ad.grad(kl, [dt])
        gnorm = np.sqrt((g.reshape(g.shape[0], -1) ** 2).sum(axis=1))
        flat = gnorm == 0
        if np.any(flat):
            log.warning("zero KL gradient for %d of %d items; keeping random direction",
                        int(flat.sum()), len(flat))
        safe = np.where(flat, 1.0, gnorm).reshape((-1,) + (1,) * (d.ndim - 1))
        d = np.where(flat.reshape(safe.shape), d, g / safe)
    return (config.epsilon * d).astype(x.dtype)


def vat_loss(model: Model, params: Mapping[str, Tensor], x: np.ndarray, config: VatConfig,
             rng: np.random.Generator, p_ref: np.ndarray | None = None) -> Tensor:
    """Sum over items of KL[p(y|x) || p(y|x + r_vadv)].

    Gradients flow into ``params`` through the perturbed branch only; the
    reference distribution and the perturbation are constants.
    """
    x = np.asarray(x)
    if p_ref is None:
        p_ref = model({k: Tensor(v.data) for k, v in params.items()}, Tensor(x)).data
    r = vadv_perturbation(model, params, x, config, rng)
    return perturbed_kl(model, params, x, r, p_ref)


def perturbed_kl(model: Model, params: Mapping[str, Tensor], x: np.ndarray, r: np.ndarray,
                 p_ref: np.ndarray) -> Tensor:
    """Sum over items of KL[p_ref || p(y|x + r)] for a fixed perturbation ``r``."""
    q = model(params, Tensor(np.asarray(x) + r))
    return ad.tsum(binary_kl_tensor(p_ref, q))
