"""Per-layer signal-to-noise profiling and layer selection."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .noise import NoiseConfig, NoisePlan, NoiseState
from .tensor import Rng, Tensor

SNR_MODES = ("highest", "lowest")
SNR_EPS = 1e-6


@dataclass
class LayerSNR:
    layer: int
    S: float
    N: float
    snr: float


@dataclass
class SNRReport:
    records: list
    selected: list = field(default_factory=list)
    mode: str = "highest"
    k: int = 0
    n_noisy_passes: int = 0
    sigma_base: float | None = None

    @property
    def snr(self) -> np.ndarray:
        return np.array([r.snr for r in self.records])

    def to_text(self) -> str:
        lines = [f"# mode={self.mode} k={self.k} n_noisy_passes={self.n_noisy_passes} sigma_base={self.sigma_base}",
                 "layer\tS\tN\tsnr"]
        for r in self.records:
            lines.append(f"{r.layer}\t{r.S!r}\t{r.N!r}\t{r.snr!r}")
        lines.append("selected\t" + ",".join(str(i) for i in self.selected))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records], "selected": list(self.selected),
                "mode": self.mode, "k": self.k, "n_noisy_passes": self.n_noisy_passes,
                "sigma_base": self.sigma_base}

    @classmethod
    def from_dict(cls, d: dict) -> "SNRReport":
        return cls([LayerSNR(**r) for r in d["records"]], list(d["selected"]), d["mode"], d["k"],
                   d["n_noisy_passes"], d.get("sigma_base"))


def _array(h):
    a = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    return a


def signal_metric(h_clean) -> float:
    """Mean absolute activation over every entry."""
    h = _array(h_clean)
    if h.size == 0:
        raise InputError("signal_metric of an empty tensor")
    return float(np.abs(h).mean())


def noise_metric(h_noisy, h_clean) -> float:
    """Mean absolute clean/noisy difference; ``h_noisy`` may be a list of passes (averaged)."""
    clean = _array(h_clean)
    passes = h_noisy if isinstance(h_noisy, (list, tuple)) else [h_noisy]
    if not passes:
        raise InputError("noise_metric needs at least one noisy pass")
    vals = []
    for h in passes:
        h = _array(h)
        if h.shape != clean.shape:
            raise InputError(f"noise_metric: shape {h.shape} does not match clean shape {clean.shape}")
        if h.size == 0:
            raise InputError("noise_metric of an empty tensor")
        vals.append(float(np.abs(h - clean).mean()))
    return float(np.mean(vals))


def snr_value(S: float, N: float, eps: float = SNR_EPS) -> float:
    return S / (N + eps)


def select_layers(report_or_snr, k: int, mode: str = "highest") -> list[int]:
    """Indices of the ``k`` highest/lowest SNR layers; ties go to the lower index."""
    if mode not in SNR_MODES:
        raise ConfigError(f"snr mode must be one of {SNR_MODES}, got {mode!r}")
    snr = report_or_snr.snr if isinstance(report_or_snr, SNRReport) else np.asarray(report_or_snr, dtype=float)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    n = len(snr)
    if k > n:
        warnings.warn(f"k={k} exceeds the number of layers ({n}); selecting all layers", stacklevel=2)
        k = n
    if mode == "highest":
        order = sorted(range(n), key=lambda i: (-snr[i], i))
    else:
        order = sorted(range(n), key=lambda i: (snr[i], i))
    return order[:k]


def profile(model, batches, noise_config: NoiseConfig, n_passes: int = 3, *, k: int | None = None,
            mode: str = "highest", seed: int = 0, eps: float = SNR_EPS) -> SNRReport:
    """Clean pass plus ``n_passes`` noisy passes (noise on every layer) per batch.

    S and N are averaged per batch, then across batches with equal weight.
    Dropout stays off; weights are only read.
    """
    if n_passes < 1:
        raise ConfigError("n_passes must be >= 1")
    batches = list(batches)
    if not batches:
        raise InputError("profile needs at least one calibration batch")
    L_total = model.config.n_layers
    state = NoiseState(alpha=1.0, noise_gate=1.0)
    rng = Rng(seed).child("snr-profile")
    S = np.zeros(L_total)
    N = np.zeros(L_total)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            for b, tokens in enumerate(batches):
                clean = model.forward(tokens)
                plan = NoisePlan(tuple(range(L_total)), noise_config, state,
                                 reference_logits=clean.logits.data)
                noisy = [model.forward(tokens, plan, rng.child(b, p)) for p in range(n_passes)]
                for l in range(L_total):
                    S[l] += signal_metric(clean.hidden_states[l])
                    N[l] += noise_metric([tr.hidden_states[l] for tr in noisy], clean.hidden_states[l])
    finally:
        model.train(was_training)
    S /= len(batches)
    N /= len(batches)
    records = [LayerSNR(l, float(S[l]), float(N[l]), float(snr_value(S[l], N[l], eps))) for l in range(L_total)]
    report = SNRReport(records, [], mode, 0, n_passes, noise_config.sigma_base)
    if k is not None:
        report.selected = select_layers(report, k, mode)
        report.k = len(report.selected)
    return report
