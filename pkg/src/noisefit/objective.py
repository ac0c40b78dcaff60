"""Hybrid clean / soft-target / consistency objective.

All token-level terms are averaged over the ``N`` positions where the loss
mask is set (response tokens).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyTargetError, ShapeError
from .tensor import Tensor


@dataclass
class LossConfig:
    lambda_ce: float = 0.5
    lambda_consistency: float = 0.1
    temperature: float = 2.0
    soft_source: str = "first"  # "first" noisy pass or "mean" of both

    def __post_init__(self):
        if not 0.0 <= self.lambda_ce <= 1.0:
            raise ConfigError(f"lambda_ce must lie in [0, 1], got {self.lambda_ce}")
        if self.lambda_consistency < 0:
            raise ConfigError(f"lambda_consistency must be >= 0, got {self.lambda_consistency}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.soft_source not in ("first", "mean"):
            raise ConfigError(f"soft_source must be 'first' or 'mean', got {self.soft_source!r}")


@dataclass
class LossBundle:
    l_ce: Tensor
    l_soft: Tensor
    l_consistency: Tensor
    l_hybrid: Tensor
    l_final: Tensor
    n_valid_tokens: int = 0

    def values(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("l_ce", "l_soft", "l_consistency", "l_hybrid", "l_final")}


def _mask(mask, shape) -> np.ndarray:
    m = np.ones(shape, dtype=np.float64) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != tuple(shape):
        raise ShapeError("loss mask", m.shape, shape)
    if m.sum() == 0:
        raise EmptyTargetError("loss over zero valid tokens")
    return m


def _masked_mean(per_token: Tensor, m: np.ndarray) -> Tensor:
    return T.tsum(per_token * m) * (1.0 / m.sum())


def ce_loss(clean_logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` (B x L ids) over masked positions."""
    z = T.as_tensor(clean_logits)
    targets = np.asarray(targets, dtype=np.int64)
    if z.ndim != 3 or targets.shape != z.shape[:2]:
        raise ShapeError("ce_loss", z.shape, targets.shape)
    m = _mask(mask, targets.shape)
    V = z.shape[-1]
    safe = np.where(m > 0, targets, 0)
    if safe.min() < 0 or safe.max() >= V:
        raise ShapeError("ce_loss", z.shape, targets.shape, detail="target id out of range")
    onehot = np.zeros(z.shape)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    logp = T.tsum(T.log_softmax(z, axis=-1) * onehot, axis=-1)
    return -_masked_mean(logp, m)


def soft_targets(clean_logits, tau: float) -> np.ndarray:
    """Temperature-softened clean distribution, treated as a constant."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    z = clean_logits.data if isinstance(clean_logits, Tensor) else np.asarray(clean_logits, dtype=np.float64)
    with T.no_grad():
        return T.softmax(Tensor(z / tau), axis=-1).data


def soft_ce_loss(p_soft, noisy_logits, mask=None) -> Tensor:
    """Mean over masked tokens of KL(p_soft || softmax(noisy_logits))."""
    z = T.as_tensor(noisy_logits)
    p = T.as_tensor(p_soft)
    if p.shape != z.shape:
        raise ShapeError("soft_ce_loss", p.shape, z.shape)
    m = _mask(mask, z.shape[:2])
    return _masked_mean(T.kl_div(p, T.softmax(z, axis=-1)), m)


def consistency_loss(noisy_logits_1, noisy_logits_2, mask=None) -> Tensor:
    """Mean over masked tokens of KL(softmax(z1) || softmax(z2))."""
    z1, z2 = T.as_tensor(noisy_logits_1), T.as_tensor(noisy_logits_2)
    if z1.shape != z2.shape:
        raise ShapeError("consistency_loss", z1.shape, z2.shape)
    m = _mask(mask, z1.shape[:2])
    return _masked_mean(T.kl_div(T.softmax(z1, axis=-1), T.softmax(z2, axis=-1)), m)


def combine(l_ce, l_soft, l_cons, config: LossConfig, n_valid_tokens: int = 0) -> LossBundle:
    if config.lambda_consistency < 0:
        raise ConfigError("lambda_consistency must be >= 0")
    l_ce, l_soft, l_cons = T.as_tensor(l_ce), T.as_tensor(l_soft), T.as_tensor(l_cons)
    hybrid = config.lambda_ce * l_ce + (1.0 - config.lambda_ce) * l_soft
    final = hybrid + config.lambda_consistency * l_cons
    return LossBundle(l_ce, l_soft, l_cons, hybrid, final, n_valid_tokens)


def hybrid_objective(clean_logits, noisy_logits_1, noisy_logits_2, targets, mask, config: LossConfig) -> LossBundle:
    """Every term from one clean and two noisy passes of the same batch."""
    l_ce = ce_loss(clean_logits, targets, mask)
    p_soft = soft_targets(clean_logits, config.temperature)
    if config.soft_source == "mean":
        l_soft = 0.5 * (soft_ce_loss(p_soft, noisy_logits_1, mask) + soft_ce_loss(p_soft, noisy_logits_2, mask))
    else:
        l_soft = soft_ce_loss(p_soft, noisy_logits_1, mask)
    l_cons = consistency_loss(noisy_logits_1, noisy_logits_2, mask)
    n = int(np.asarray(mask).sum()) if mask is not None else int(np.prod(np.asarray(targets).shape))
    return combine(l_ce, l_soft, l_cons, config, n)
