"""Adaptive Gaussian noise injection into hidden states.

For one token vector ``h`` of width H the injected perturbation is

    sigma_eff = sigma_base * alpha * gate * MAD(h) * w(h) * eta
    h_tilde   = h + sigma_eff * xi,          xi ~ N(0, I_H)

with ``w(h) = exp(-beta * |h - median(h)| / (MAD(h) + eps))`` applied
elementwise and ``eta`` an uncertainty factor (from hidden-state variance or
from output entropy).  Median and MAD are taken per token over the hidden
axis.  Gradients flow through ``alpha`` and through the statistics of ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericError
from .tensor import Rng, Tensor

ETA_MODES = ("variance", "logits")


@dataclass
class NoiseConfig:
    sigma_base: float = 0.01
    beta: float = 1.0
    epsilon: float = 1e-6
    eta_mode: str = "variance"
    eta_clamp: tuple = (1.0, 10.0)
    gate_schedule: str = "constant:1.0"

    def __post_init__(self):
        self.sigma_base = float(self.sigma_base)
        self.beta = float(self.beta)
        self.epsilon = float(self.epsilon)
        self.eta_clamp = tuple(float(v) for v in self.eta_clamp)
        if self.sigma_base < 0 or not np.isfinite(self.sigma_base):
            raise ConfigError(f"sigma_base must be a finite value >= 0, got {self.sigma_base}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.eta_mode not in ETA_MODES:
            raise ConfigError(f"eta_mode must be one of {ETA_MODES}, got {self.eta_mode!r}")
        lo, hi = self.eta_clamp if len(self.eta_clamp) == 2 else (None, None)
        if lo is None or not 0 < lo <= hi:
            raise ConfigError(f"eta_clamp must be (lo, hi) with 0 < lo <= hi, got {self.eta_clamp}")
        parse_gate_schedule(self.gate_schedule)

    def gate_at(self, step: int, total_steps: int) -> float:
        return gate_value(self.gate_schedule, step, total_steps)


def parse_gate_schedule(desc: str) -> tuple[str, list[float]]:
    """``constant:G`` or ``linear:START:END`` (interpolated over the run)."""
    kind, _, rest = str(desc).partition(":")
    try:
        args = [float(v) for v in rest.split(":")] if rest else []
    except ValueError:
        raise ConfigError(f"bad gate schedule {desc!r}") from None
    if kind == "constant" and len(args) == 1:
        pass
    elif kind == "linear" and len(args) == 2:
        pass
    else:
        raise ConfigError(f"bad gate schedule {desc!r}; use constant:G or linear:START:END")
    if any(not 0.0 <= a <= 1.0 for a in args):
        raise ConfigError(f"gate values must lie in [0, 1]: {desc!r}")
    return kind, args


def gate_value(desc: str, step: int, total_steps: int) -> float:
    kind, args = parse_gate_schedule(desc)
    if kind == "constant":
        return args[0]
    frac = 0.0 if total_steps <= 1 else min(max(step / (total_steps - 1), 0.0), 1.0)
    return args[0] + (args[1] - args[0]) * frac


class NoiseState:
    """Learnable gain ``alpha`` and the external gate in [0, 1]."""

    def __init__(self, alpha: float = 1.0, noise_gate: float = 1.0):
        self.alpha = Tensor(np.array(float(alpha)), requires_grad=True, name="noise.alpha")
        self._gate = 1.0
        self.noise_gate = noise_gate

    @property
    def noise_gate(self) -> float:
        return self._gate

    @noise_gate.setter
    def noise_gate(self, value: float):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"noise_gate must lie in [0, 1], got {value}")
        self._gate = value


@dataclass
class NoisePlan:
    """Which layers receive noise, and with what settings.

    ``reference_logits`` (B x L x V, detached) feeds the logits-mode
    uncertainty factor; it is normally the clean pass of the same batch.
    """

    layer_indices: tuple
    config: NoiseConfig
    state: NoiseState = field(default_factory=NoiseState)
    reference_logits: np.ndarray | None = None

    def __post_init__(self):
        idx = [int(i) for i in self.layer_indices]
        if len(set(idx)) != len(idx):
            raise ConfigError(f"duplicate layer indices in noise plan: {idx}")
        if any(i < 0 for i in idx):
            raise ConfigError(f"negative layer index in noise plan: {idx}")
        self.layer_indices = tuple(sorted(idx))

    @property
    def active(self) -> bool:
        """False when injection is provably the identity (zero scale or no layers)."""
        return bool(self.layer_indices) and self.config.sigma_base > 0 and self.state.noise_gate > 0


# -- statistics ---------------------------------------------------------------------


def robust_stats(h, eps: float = 1e-6) -> tuple[float, float]:
    """Median and median absolute deviation of a single vector."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64).reshape(-1)
    if h.size == 0:
        raise InputError("robust_stats of an empty vector")
    med = float(np.median(h))
    return med, float(np.median(np.abs(h - med)))


def weighting(h, mu_med, mad, beta: float = 1.0, eps: float = 1e-6):
    """``exp(-beta * |h - mu_med| / (mad + eps))`` elementwise; Tensor in, Tensor out."""
    if isinstance(h, Tensor) or isinstance(mu_med, Tensor) or isinstance(mad, Tensor):
        dev = T.tabs(T.as_tensor(h) - mu_med)
        return T.exp(-beta * dev / (T.as_tensor(mad) + eps))
    h = np.asarray(h, dtype=np.float64)
    return np.exp(-beta * np.abs(h - mu_med) / (mad + eps))


def noise_factor_variance(h: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-token ``exp(Var(h_t) / (mean_t Var(h_t) + eps))``, shape B x L (unclamped)."""
    h = T.as_tensor(h)
    if h.ndim != 3 or h.shape[0] * h.shape[1] == 0:
        raise InputError(f"noise_factor_variance expects a nonempty B x L x H tensor, got {h.shape}")
    v = T.var(h, axis=-1)
    return T.exp(v / (T.mean(v) + eps))


def noise_factor_logits(z, eps: float = 1e-6) -> Tensor:
    """Per-sequence ``exp(mean_t H_t)`` with ``H_t = -sum_k p log(p + eps)``, shape B."""
    z = T.as_tensor(z)
    if z.ndim != 3:
        raise InputError(f"noise_factor_logits expects B x L x V logits, got {z.shape}")
    if not np.all(np.isfinite(z.data)):
        raise InputError("noise_factor_logits: non-finite logits")
    p = T.softmax(z, axis=-1)
    ent = -T.tsum(p * T.log(p + eps), axis=-1)
    return T.exp(T.mean(ent, axis=-1))


def _uncertainty(h: Tensor, config: NoiseConfig, reference_logits) -> Tensor:
    if config.eta_mode == "variance":
        eta = noise_factor_variance(h, config.epsilon)
    else:
        if reference_logits is None:
            raise ConfigError("eta_mode='logits' needs reference logits from a clean pass")
        ref = np.asarray(reference_logits.data if isinstance(reference_logits, Tensor) else reference_logits)
        eta_seq = noise_factor_logits(Tensor(ref), config.epsilon).data
        if eta_seq.shape[0] != h.shape[0]:
            raise InputError("reference logits batch size does not match hidden states")
        eta = Tensor(np.broadcast_to(eta_seq[:, None], h.shape[:2]).copy())
    lo, hi = config.eta_clamp
    return T.clip(eta, lo, hi)


def effective_sigma(h: Tensor, config: NoiseConfig, state: NoiseState, uncertainty=None,
                    reference_logits=None) -> Tensor:
    """Elementwise noise scale for every token of a B x L x H tensor.

    ``uncertainty`` overrides the computed eta (shape B x L or B, already
    clamped by the caller if desired).
    """
    h = T.as_tensor(h)
    if h.ndim != 3:
        raise InputError(f"expected B x L x H hidden states, got {h.shape}")
    eps = config.epsilon
    med = T.median(h, axis=-1, keepdims=True)
    dev = T.tabs(h - med)
    mad = T.median(dev, axis=-1, keepdims=True)
    w = T.exp(-config.beta * dev / (mad + eps))
    if uncertainty is None:
        eta = _uncertainty(h, config, reference_logits)
    else:
        eta = T.as_tensor(uncertainty)
        if eta.ndim == 1:
            eta = Tensor(np.broadcast_to(eta.data[:, None], h.shape[:2]).copy())
    eta = T.reshape(eta, h.shape[:2] + (1,))
    scale = (config.sigma_base * state.noise_gate) * state.alpha
    return scale * mad * w * eta


def inject(h: Tensor, config: NoiseConfig, state: NoiseState, rng: Rng, uncertainty=None,
           reference_logits=None, layer: int | None = None) -> Tensor:
    """Return ``h + sigma_eff * xi`` with fresh ``xi`` from ``rng``.

    Zero base scale or a closed gate returns ``h`` itself, bit for bit.
    """
    h = T.as_tensor(h)
    if not 0.0 <= state.noise_gate <= 1.0:
        raise ConfigError(f"noise_gate must lie in [0, 1], got {state.noise_gate}")
    if config.sigma_base == 0.0 or state.noise_gate == 0.0:
        return h
    sigma = effective_sigma(h, config, state, uncertainty, reference_logits)
    bad = ~np.isfinite(sigma.data)
    if bad.any():
        b, t, i = (int(v) for v in np.argwhere(bad)[0])
        where = f"layer {layer}, " if layer is not None else ""
        raise NumericError(f"non-finite sigma_eff at {where}batch {b}, token {t}, coordinate {i}")
    xi = rng.normal(h.shape)
    return h + sigma * xi
