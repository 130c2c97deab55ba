"""Loss system: L1 reconstruction, Wasserstein critic with gradient
penalty, per-attribute BCE, and the weighted discriminator/generator
objectives the trainer minimizes.

The penalty differentiates through the critic's input gradient, which the
tensor core supports directly (graph-building backward); no
finite-difference fallback is needed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

BCE_EPS = 1e-7
_NORM_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_gp: float = 10.0
    lambda_1: float = 1.0    # attribute term in the discriminator objective
    lambda_2: float = 10.0   # attribute term in the generator objective
    lambda_3: float = 100.0  # reconstruction term in the generator objective

    def validate(self) -> "LossWeights":
        for name, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d).validate()


def reconstruction_loss(x: Tensor, x_rec: Tensor) -> Tensor:
    """Mean absolute difference over batch and elements."""
    if x.shape != x_rec.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    return T.tmean(T.absolute(T.sub(x, x_rec)))


def _check_binary(att: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(att)
    if not np.all(np.isin(arr, (0, 1))):
        raise ContractError(f"{what} must be binary 0/1 vectors")
    return arr


def bce_attributes(probs: Tensor, labels: np.ndarray, eps: float = BCE_EPS) -> Tensor:
    """Per-attribute binary cross-entropy, summed over attributes and
    averaged over the batch; probabilities clamped to [eps, 1-eps]."""
    arr = np.asarray(labels, dtype=probs.data.dtype)
    if probs.ndim != 2 or probs.shape != arr.shape:
        raise DimensionError(f"probs {probs.shape} vs labels {arr.shape}")
    p = T.clip(probs, eps, 1.0 - eps)
    y = T.constant(arr, dtype=probs.data.dtype)
    one = T.constant(np.asarray(1.0, dtype=probs.data.dtype))
    term = T.add(T.mul(y, T.log(p)), T.mul(T.sub(one, y), T.log(T.sub(one, p))))
    return T.neg(T.tmean(T.tsum(term, axis=(1,))))


def gradient_penalty(disc, x_real: Tensor, x_fake: Tensor,
                     rng: np.random.Generator) -> Tensor:
    """Mean squared distance of the critic's input-gradient norm from 1,
    evaluated on per-sample uniform interpolates of real and fake."""
    if x_real.shape != x_fake.shape:
        raise DimensionError(f"shape mismatch {x_real.shape} vs {x_fake.shape}")
    if not T.is_grad_enabled():
        raise ContractError("gradient_penalty needs graph recording enabled")
    n = x_real.shape[0]
    eps = rng.uniform(size=(n,) + (1,) * (x_real.ndim - 1)).astype(x_real.data.dtype)
    mix = eps * x_real.data + (1.0 - eps) * x_fake.data
    x_hat = T.tensor(mix, requires_grad=True, dtype=x_real.data.dtype)
    scores = disc.adv(x_hat)
    if scores.shape != (n,):
        raise ContractError(f"critic must score per sample, got {scores.shape}")
    (gx,) = T.grad_of(T.tsum(scores), [x_hat], create_graph=True)
    flat = T.reshape(gx, (n, -1))
    sq = T.tsum(T.mul(flat, flat), axis=(1,))
    norm = T.sqrt(T.add(sq, T.constant(np.asarray(_NORM_EPS, dtype=x_real.data.dtype))))
    d = T.sub(norm, T.constant(np.asarray(1.0, dtype=x_real.data.dtype)))
    return T.tmean(T.mul(d, d))


def d_adv_loss(disc, x_real: Tensor, x_fake: Tensor, lambda_gp: float,
               rng: np.random.Generator) -> Tensor:
    """Critic loss to minimize: -(E[D(real)] - E[D(fake)]) + gp weight."""
    wasserstein = T.sub(T.tmean(disc.adv(x_real)), T.tmean(disc.adv(x_fake)))
    gp = gradient_penalty(disc, x_real, x_fake, rng)
    lam = T.constant(np.asarray(lambda_gp, dtype=x_real.data.dtype))
    return T.add(T.neg(wasserstein), T.mul(lam, gp))


def g_adv_loss(disc, x_fake: Tensor) -> Tensor:
    """Generator-side critic loss to minimize: -E[D(fake)]."""
    return T.neg(T.tmean(disc.adv(x_fake)))


def d_att_loss(disc, x_real: Tensor, att_s: np.ndarray) -> Tensor:
    """BCE of the attribute head on real images against source labels."""
    labels = _check_binary(att_s, "source attributes")
    return bce_attributes(disc.att_probs(x_real), labels)


def g_att_loss(disc, y_hat: Tensor, att_t: np.ndarray) -> Tensor:
    """BCE of the attribute head on edited images against target labels."""
    labels = _check_binary(att_t, "target attributes")
    return bce_attributes(disc.att_probs(y_hat), labels)


def total_d_loss(disc, x_real: Tensor, att_s: np.ndarray, x_fake: Tensor,
                 weights: LossWeights,
                 rng: np.random.Generator) -> Tuple[Tensor, Dict[str, float]]:
    """Full discriminator objective plus its logged components."""
    wasserstein = T.sub(T.tmean(disc.adv(x_real)), T.tmean(disc.adv(x_fake)))
    gp = gradient_penalty(disc, x_real, x_fake, rng)
    att = d_att_loss(disc, x_real, att_s)
    dt = x_real.data.dtype
    total = T.add(
        T.add(T.neg(wasserstein),
              T.mul(T.constant(np.asarray(weights.lambda_gp, dtype=dt)), gp)),
        T.mul(T.constant(np.asarray(weights.lambda_1, dtype=dt)), att))
    parts = {"d_adv": -wasserstein.item(), "gp": gp.item(),
             "d_att": att.item(), "d_total": total.item()}
    return total, parts


def total_g_loss(disc, y_hat: Tensor, att_t: np.ndarray, x: Tensor,
                 x_rec: Tensor,
                 weights: LossWeights) -> Tuple[Tensor, Dict[str, float]]:
    """Full generator objective plus its logged components.

    ``x_rec`` must be the same-step zero-difference pass of the generator.
    """
    adv = g_adv_loss(disc, y_hat)
    att = g_att_loss(disc, y_hat, att_t)
    rec = reconstruction_loss(x, x_rec)
    dt = x.data.dtype
    total = T.add(
        T.add(adv, T.mul(T.constant(np.asarray(weights.lambda_2, dtype=dt)), att)),
        T.mul(T.constant(np.asarray(weights.lambda_3, dtype=dt)), rec))
    parts = {"g_adv": adv.item(), "g_att": att.item(), "rec": rec.item(),
             "g_total": total.item()}
    return total, parts
