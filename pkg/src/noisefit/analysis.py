"""Layer-wise diagnostics and two-sample distribution tests."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats
from scipy.special import xlogy

from .errors import ConfigError, InputError, StatisticalError
from .tensor import Tensor

DEFAULT_T_POINTS = (0.4, 0.8)


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# -- layer metrics -------------------------------------------------------------------


@dataclass
class LayerStats:
    layer: int
    sparsity: float
    variance: float
    mean_l2: float
    rank: int
    attention_entropy: float | None = None


@dataclass
class LayerMetrics:
    layers: list
    logit_entropy: dict

    def to_rows(self) -> list[dict]:
        return [asdict(s) for s in self.layers]

    def to_text(self) -> str:
        head = "layer\tsparsity\tvariance\tmean_l2\trank\tattention_entropy"
        rows = [f"{s.layer}\t{s.sparsity:.6g}\t{s.variance:.6g}\t{s.mean_l2:.6g}\t{s.rank}\t"
                f"{'' if s.attention_entropy is None else format(s.attention_entropy, '.6g')}"
                for s in self.layers]
        ent = " ".join(f"{k}={v:.6g}" for k, v in self.logit_entropy.items())
        return "\n".join([head, *rows, f"# logit_entropy {ent}"]) + "\n"


def sparsity(h, zero_tol: float = 1e-6) -> float:
    """Fraction of entries with ``|value| < zero_tol``."""
    if zero_tol < 0:
        raise ConfigError("zero_tol must be >= 0")
    h = _np(h)
    return float(np.mean(np.abs(h) < zero_tol)) if h.size else 0.0


def mean_l2(h) -> float:
    h = _np(h)
    return float(np.linalg.norm(h.reshape(-1, h.shape[-1]), axis=-1).mean())


def effective_rank(h) -> int:
    """Singular values above ``max_dim * s_max * machine_eps`` of the tokens x H matrix."""
    h = _np(h)
    mat = h.reshape(-1, h.shape[-1])
    if not np.any(mat):
        return 0
    return int(np.linalg.matrix_rank(mat))


def token_entropy(logits, eps: float = 1e-6) -> np.ndarray:
    """``-sum_k p log(p + eps)`` per position of the softmax of ``logits``."""
    z = _np(logits)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return -(p * np.log(p + eps)).sum(axis=-1)


def attention_entropy(weights) -> float:
    """Mean over rows of ``-sum a log a`` (zero weights contribute nothing)."""
    a = _np(weights)
    return float((-xlogy(a, a).sum(axis=-1)).mean())


def layer_metrics(trace, zero_tol: float = 1e-6, entropy_eps: float = 1e-6) -> LayerMetrics:
    if zero_tol < 0:
        raise ConfigError("zero_tol must be >= 0")
    attn = trace.attention_weights
    out = []
    for l, h in enumerate(trace.hidden_states):
        h = _np(h)
        out.append(LayerStats(l, sparsity(h, zero_tol), float(h.var()), mean_l2(h), effective_rank(h),
                              attention_entropy(attn[l]) if attn else None))
    ent = token_entropy(trace.logits, entropy_eps)
    summary = {"mean": float(ent.mean()), "std": float(ent.std()), "min": float(ent.min()),
               "max": float(ent.max())}
    return LayerMetrics(out, summary)


# -- two-sample tests ---------------------------------------------------------------


@dataclass
class TestResult:
    statistic: float
    p_raw: float
    p_adjusted: float
    significant: bool
    alpha: float = 0.05
    t_points: tuple = DEFAULT_T_POINTS
    small_sample_corrected: bool = False

    __test__ = False  # not a pytest class


def epps_singleton(sample_a, sample_b, t_points=DEFAULT_T_POINTS, alpha: float = 0.05) -> TestResult:
    """Epps-Singleton two-sample test on the empirical characteristic functions.

    The characteristic functions are evaluated at ``t_points`` divided by
    half the pooled interquartile range.  The statistic is asymptotically
    chi-square with ``2 * len(t_points)`` degrees of freedom; when both
    samples have fewer than 25 points the usual small-sample factor is
    applied.
    """
    x = np.asarray(sample_a, dtype=np.float64).reshape(-1)
    y = np.asarray(sample_b, dtype=np.float64).reshape(-1)
    t = np.asarray(t_points, dtype=np.float64).reshape(-1)
    nx, ny = x.size, y.size
    if nx < 5 or ny < 5:
        raise StatisticalError(f"each sample needs at least 5 values (got {nx} and {ny})")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise StatisticalError("samples contain non-finite values")
    if t.size == 0 or np.any(t <= 0):
        raise StatisticalError("t_points must be positive")
    n = nx + ny
    q75, q25 = np.percentile(np.concatenate([x, y]), [75, 25])
    scale = (q75 - q25) / 2.0
    if scale <= 0:
        raise StatisticalError("pooled sample has zero interquartile range")
    ts = t[:, None] / scale
    gx = np.vstack([np.cos(ts * x), np.sin(ts * x)]).T
    gy = np.vstack([np.cos(ts * y), np.sin(ts * y)]).T
    cov = (n / nx) * np.cov(gx.T, bias=True) + (n / ny) * np.cov(gy.T, bias=True)
    cov_inv = np.linalg.pinv(cov)
    df = 2 * t.size
    if np.linalg.matrix_rank(cov_inv) < df:
        warnings.warn("Epps-Singleton covariance estimate is rank deficient", RuntimeWarning, stacklevel=2)
    diff = gx.mean(axis=0) - gy.mean(axis=0)
    w = float(n * diff @ cov_inv @ diff)
    corrected = max(nx, ny) < 25
    if corrected:
        w *= 1.0 / (1.0 + n**-0.45 + 10.1 * (nx**-1.7 + ny**-1.7))
    p = float(stats.chi2.sf(w, df))
    return TestResult(w, p, p, p < alpha, alpha, tuple(float(v) for v in t), corrected)


def holm_adjust(p_values, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Holm step-down adjusted p-values and the ``adjusted < alpha`` flags."""
    p = np.asarray(p_values, dtype=np.float64).reshape(-1)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise InputError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adj_sorted = np.minimum(1.0, (m - np.arange(m)) * p[order])
    adj_sorted = np.maximum.accumulate(adj_sorted)
    adj = np.empty(m)
    adj[order] = adj_sorted
    return adj, adj < alpha


def compare_families(experiments: dict, baseline, alpha: float = 0.05,
                     t_points=DEFAULT_T_POINTS) -> list[dict]:
    """Epps-Singleton of each experiment's scores against ``baseline``, Holm-corrected.

    Rows mirror the usual reporting columns.
    """
    names = list(experiments)
    raw = [epps_singleton(experiments[k], baseline, t_points, alpha) for k in names]
    adj, sig = holm_adjust([r.p_raw for r in raw], alpha)
    rows = []
    for name, r, pa, s in zip(names, raw, adj, sig):
        r.p_adjusted, r.significant = float(pa), bool(s)
        rows.append({
            "Experiment": name,
            "Test used": "Epps-Singleton",
            "Statistic": r.statistic,
            "P-value raw": r.p_raw,
            "P-value adjusted": r.p_adjusted,
            "Significant": r.significant,
            "Interpretation": ("distributions differ" if r.significant
                               else "no significant difference") + f" at alpha={alpha}",
        })
    return rows
