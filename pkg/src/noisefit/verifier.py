"""Desk-scale empirical checks of the noise-injection theory.

Each check is deterministic given its seed and returns a ``CheckRecord``
carrying the measured quantity, the tolerance it was held to and the
verdict.  ``run_all`` bundles them into a ``VerificationReport``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import tensor as T
from .data import make_copy_task, collate
from .errors import ConfigError
from .model import ModelConfig, TransformerModel
from .noise import NoiseConfig, NoisePlan, NoiseState, effective_sigma, inject
from .objective import ce_loss
from .tensor import Rng, Tensor, no_grad

Z_BAND = 4.0  # standard errors; two-sided false-failure rate ~6e-5


@dataclass
class CheckRecord:
    name: str
    quantity: str
    tolerance: float
    observed: float
    passed: bool
    n_samples: int
    seed: int
    detail: dict = field(default_factory=dict)


@dataclass
class VerificationReport:
    records: list = field(default_factory=list)
    symbols: dict = field(default_factory=dict)  # sigma_max, L_sigma, C, beta_smooth

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def add(self, record: CheckRecord) -> CheckRecord:
        self.records.append(record)
        return record

    def to_text(self) -> str:
        lines = []
        for r in self.records:
            verdict = "PASS" if r.passed else "FAIL"
            lines.append(f"[{verdict}] {r.name}: {r.quantity} observed={r.observed:.6g} "
                         f"tolerance={r.tolerance:.6g} n={r.n_samples} seed={r.seed}")
        for k, v in self.symbols.items():
            lines.append(f"# {k} = {v:.6g}")
        lines.append(f"# overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "quantity", "tolerance", "observed", "pass", "n_samples", "seed"])
        for r in self.records:
            w.writerow([r.name, r.quantity, repr(r.tolerance), repr(r.observed), int(r.passed),
                        r.n_samples, r.seed])
        return buf.getvalue()


def z_band(n: int, z: float = Z_BAND) -> float:
    """Critical value with the tail mass of ``z`` normal SEs, widened by Student t for small ``n``."""
    tail = stats.norm.sf(z)
    return float(stats.t.isf(tail, df=max(n - 1, 1)))


def _probe_vector(rng: Rng, H: int) -> np.ndarray:
    return rng.child("probe").normal((H,))


def _inject_many(h: np.ndarray, n: int, sigma_base: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """``n`` independent injections of the same vector; returns (perturbations, sigma_eff)."""
    cfg = NoiseConfig(sigma_base=sigma_base) if sigma_base > 0 else NoiseConfig(sigma_base=0.0)
    state = NoiseState()
    batch = np.broadcast_to(h, (n, 1, h.size)).copy()
    with no_grad():
        out = inject(Tensor(batch), cfg, state, rng.child("xi"))
        sig = effective_sigma(Tensor(h[None, None, :]), cfg, state, uncertainty=_eta_single(h, cfg)).data[0, 0]
    return out.data[:, 0, :] - h, sig


def _eta_single(h: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    # variance-mode eta of one token inside a batch of identical tokens
    v = float(np.var(h))
    lo, hi = cfg.eta_clamp
    return np.array([[min(max(math.exp(v / (v + cfg.epsilon)), lo), hi)]])


# -- B.2 / B.1 ----------------------------------------------------------------------


def check_unbiasedness(n: int = 100_000, sigma_base: float = 0.1, seed: int = 0, hidden: int = 16) -> CheckRecord:
    """Per-coordinate mean of the injected perturbation is zero within a z-band."""
    rng = Rng(seed).child("unbiased")
    h = _probe_vector(rng, hidden)
    delta, _ = _inject_many(h, n, sigma_base, rng)
    mean = delta.mean(axis=0)
    se = delta.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(hidden)
    crit = z_band(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        zscores = np.where(se > 0, np.abs(mean) / np.where(se > 0, se, 1.0), 0.0)
    exact_zero = bool(np.all(mean == 0))
    ok = bool(np.all((se > 0) & (zscores <= crit)) or (exact_zero and np.all(se == 0)))
    return CheckRecord("unbiasedness", "max |mean(h_tilde - h)| / SE", crit, float(zscores.max()), ok, n, seed,
                       {"max_abs_mean": float(np.abs(mean).max())})


# -- B.3 ----------------------------------------------------------------------------


def check_variance(n: int = 100_000, sigma_base: float = 0.1, seed: int = 0, hidden: int = 16,
                   rel_tol: float = 0.05) -> CheckRecord:
    """Per-coordinate variance matches sigma_eff^2; cross covariances vanish."""
    rng = Rng(seed).child("variance")
    h = _probe_vector(rng, hidden)
    delta, sig = _inject_many(h, n, sigma_base, rng)
    if sigma_base == 0:
        ok = bool(np.all(delta == 0))
        return CheckRecord("variance", "max |var - sigma_eff^2|", 0.0, float(np.abs(delta).max()), ok, n, seed)
    crit = z_band(n)
    # small n: a 5% band is tighter than sampling error allows
    var_tol = max(rel_tol, crit * math.sqrt(2.0 / max(n - 1, 1)))
    var = delta.var(axis=0, ddof=1)
    rel = np.abs(var / sig**2 - 1.0)
    c = delta - delta.mean(axis=0)
    iu = np.triu_indices(hidden, k=1)
    prods = c[:, iu[0]] * c[:, iu[1]]
    cov = prods.sum(axis=0) / max(n - 1, 1)
    cov_se = prods.std(axis=0, ddof=1) / math.sqrt(n)
    cov_z = np.abs(cov) / cov_se
    ok = bool(np.all(rel <= var_tol) and np.all(cov_z <= crit))
    return CheckRecord("variance", "max |var/sigma_eff^2 - 1|", var_tol, float(rel.max()), ok, n, seed,
                       {"max_cov_z": float(cov_z.max()), "cov_z_band": crit})


# -- B.4 ----------------------------------------------------------------------------


def sigma_map(rows: np.ndarray, config: NoiseConfig | None = None) -> np.ndarray:
    """sigma_eff of each row treated as a lone token (rows: m x H)."""
    config = config or NoiseConfig(sigma_base=0.1)
    rows = np.asarray(rows, dtype=np.float64)
    v = rows.var(axis=-1)
    lo, hi = config.eta_clamp
    eta = np.clip(np.exp(v / (v + config.epsilon)), lo, hi)
    with no_grad():
        return effective_sigma(Tensor(rows[:, None, :]), config, NoiseState(),
                               uncertainty=eta[:, None]).data[:, 0, :]


def _pairs(rng: Rng, m: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    h1 = rng.child("h1").normal((m, H))
    # separations log-uniform over three decades
    scale = 10.0 ** (rng.child("scale").uniform((m, 1)) * 3.0 - 3.0)
    return h1, h1 + scale * rng.child("dir").normal((m, H))


def check_lipschitz(m: int = 10_000, seed: int = 0, hidden: int = 16, sigma_fn=None,
                    n_probe: int = 4096) -> CheckRecord:
    """``||T(h1) - T(h2)|| <= (1 + L_sigma ||xi||) ||h1 - h2||`` for a fixed draw ``xi``.

    ``L_sigma`` is the largest difference quotient of the sigma map over an
    independent set of probe pairs.  ``sigma_fn`` replaces the adaptive map
    (e.g. a constant, for the plain additive case).
    """
    rng = Rng(seed).child("lipschitz")
    fn = sigma_fn or sigma_map
    xi = rng.child("xi").normal((hidden,))
    p1, p2 = _pairs(rng.child("probe"), n_probe, hidden)
    dp = np.linalg.norm(p1 - p2, axis=1)
    ds = np.linalg.norm(fn(p1) - fn(p2), axis=1)
    l_sigma = float(np.max(np.where(dp > 0, ds / np.where(dp > 0, dp, 1.0), 0.0)))
    h1, h2 = _pairs(rng.child("test"), m, hidden)
    if m:
        h2[0] = h1[0]  # include an identical pair
    lhs = np.linalg.norm((h1 + fn(h1) * xi) - (h2 + fn(h2) * xi), axis=1)
    rhs = (1.0 + l_sigma * np.linalg.norm(xi)) * np.linalg.norm(h1 - h2, axis=1)
    slack = 1e-12 * (1.0 + rhs)
    violations = int(np.sum(lhs > rhs + slack))
    ratio = float(np.max(np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), 0.0))) if m else 0.0
    return CheckRecord("lipschitz", "violations of the Lipschitz bound", 0.0, float(violations),
                       violations == 0, m, seed, {"L_sigma": l_sigma, "max_lhs_over_rhs": ratio})


# -- B.5 / B.7 ----------------------------------------------------------------------


def tiny_model(seed: int = 0, n_layers: int = 2, hidden: int = 16, vocab: int = 32) -> TransformerModel:
    cfg = ModelConfig(n_layers=n_layers, hidden_dim=hidden, n_heads=2, vocab_size=vocab, max_seq_len=32,
                      lora_rank=0, init_std=0.3)
    model = TransformerModel(cfg, seed)
    model.set_finetune_mode("full")
    return model.eval()


def tiny_batch(seed: int = 0, batch: int = 2, length: int = 8, vocab: int = 32):
    rng = Rng(seed).child("batch")
    tokens = rng.generator.integers(0, vocab, (batch, length + 1))
    return tokens[:, :-1], tokens[:, 1:], np.ones((batch, length))


class _Negated:
    """Rng stand-in returning the negated normal draws of ``base`` (antithetic pairs)."""

    def __init__(self, base: Rng):
        self.base = base

    def child(self, *key):
        return _Negated(self.base.child(*key))

    def normal(self, shape):
        return -self.base.normal(shape)


def _param_grads(model, inputs, targets, mask, plan=None, rng=None) -> np.ndarray:
    model.zero_grad()
    trace = model.forward(inputs, plan, rng)
    T.backward(ce_loss(trace.logits, targets, mask))
    return np.concatenate([p.grad.ravel() for p in model.params.values()])


def check_gradient_stability(sigmas=(1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1), seed: int = 0,
                             n_draws: int = 8, slope_range=(0.8, 1.2)) -> CheckRecord:
    """Slope of log ||grad_clean - grad_noisy|| against log sigma_base."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas <= 0) or sigmas.size < 2:
        raise ConfigError("need at least two positive sigma values")
    model = tiny_model(seed)
    inputs, targets, mask = tiny_batch(seed)
    g_clean = _param_grads(model, inputs, targets, mask)
    layers = tuple(range(model.config.n_layers))
    diffs = []
    for s in sigmas:
        plan = NoisePlan(layers, NoiseConfig(sigma_base=float(s)), NoiseState())
        d = [np.linalg.norm(_param_grads(model, inputs, targets, mask, plan, Rng(seed).child("draw", j)) - g_clean)
             for j in range(n_draws)]
        diffs.append(float(np.mean(d)))
    diffs = np.array(diffs)
    slope = float(np.polyfit(np.log(sigmas), np.log(diffs), 1)[0])
    ok = bool(slope_range[0] <= slope <= slope_range[1])
    return CheckRecord("gradient_stability", "log-log slope of grad difference vs sigma",
                       float(slope_range[1] - 1.0), slope, ok, n_draws * sigmas.size, seed,
                       {"sigmas": sigmas.tolist(), "diffs": diffs.tolist(), "slope_lo": slope_range[0],
                        "slope_hi": slope_range[1]})


def loss_deviation(model, inputs, targets, mask, sigma_base: float, n: int, seed: int) -> tuple[float, float]:
    """Antithetic estimate of ``E[L(h + delta)] - L(h)`` and the largest sigma_eff seen."""
    layers = tuple(range(model.config.n_layers))
    with no_grad():
        base = model.forward(inputs)
        l0 = float(ce_loss(base.logits, targets, mask).data)
        if sigma_base == 0:
            return 0.0, 0.0
        cfg = NoiseConfig(sigma_base=sigma_base)
        state = NoiseState()
        sigma_max = max(float(effective_sigma(h, cfg, state).data.max()) for h in base.hidden_states)
        plan = NoisePlan(layers, cfg, state)
        acc = 0.0
        for j in range(n):
            r = Rng(seed).child("pair", j)
            lp = float(ce_loss(model.forward(inputs, plan, r).logits, targets, mask).data)
            lm = float(ce_loss(model.forward(inputs, plan, _Negated(r)).logits, targets, mask).data)
            acc += 0.5 * (lp + lm) - l0
    return acc / n, sigma_max


def check_loss_bound(sigmas=(1e-4, 1e-3, 1e-2, 1e-1), n: int = 32, seed: int = 0,
                     max_spread: float = 10.0) -> CheckRecord:
    """``|E[dL]| / sigma_max^2`` stays bounded by one constant across the grid."""
    model = tiny_model(seed)
    inputs, targets, mask = tiny_batch(seed)
    ratios, devs, smax = [], [], []
    for s in sigmas:
        d, sm = loss_deviation(model, inputs, targets, mask, float(s), n, seed)
        devs.append(d)
        smax.append(sm)
        ratios.append(abs(d) / sm**2 if sm > 0 else 0.0)
    pos = [r for r in ratios if r > 0]
    spread = max(pos) / min(pos) if pos else 1.0
    C = max(ratios)
    return CheckRecord("loss_bound", "spread of |E dL| / sigma_max^2 over the grid", max_spread, spread,
                       bool(spread < max_spread and np.isfinite(C)), n * len(sigmas), seed,
                       {"C": C, "ratios": ratios, "deviations": devs, "sigma_max": smax, "sigmas": list(sigmas)})


# -- B.6 ----------------------------------------------------------------------------


def check_kl(n: int = 10_000, vocab: int = 8, seed: int = 0) -> CheckRecord:
    """KL between softmaxes is nonnegative, and zero on logits differing by a row constant."""
    rng = Rng(seed).child("kl")
    a = rng.child("a").normal((n, vocab)) * 3.0
    b = rng.child("b").normal((n, vocab)) * 3.0
    shift = rng.child("shift").normal((n, 1)) * 10.0
    with no_grad():
        kl = T.kl_div(T.softmax(Tensor(a)), T.softmax(Tensor(b))).data
        same = T.kl_div(T.softmax(Tensor(a)), T.softmax(Tensor(a + shift))).data
    worst = float(max(-kl.min(), np.abs(same).max()))
    return CheckRecord("kl_consistency", "max(-min KL, max |KL(p, p)|)", 1e-12, worst, worst <= 1e-12, n, seed)


# -- B.8 ----------------------------------------------------------------------------


def check_convergence(objective: str = "quadratic", steps: int = 2000, seed: int = 0, lr: float | None = None,
                      schedule: str = "inv_sqrt", sigma: float = 0.1, window: float = 0.1,
                      threshold: float = 0.1) -> CheckRecord:
    """Trailing-window mean gradient norm falls below ``threshold`` x the initial gradient norm.

    ``quadratic`` runs SGD on a 10-d bowl whose gradient is evaluated at an
    unbiased, bounded-variance perturbation of the iterate.  ``transformer``
    trains a tiny model on a small copy task with noise injected into every
    layer.  ``schedule`` is ``inv_sqrt`` (lr / sqrt(t)) or ``constant``; the
    default ``lr`` is 0.5 for the bowl and 0.01 for the Adam-direction model.
    """
    if lr is None:
        lr = 0.01 if objective == "transformer" else 0.5
    if schedule not in ("inv_sqrt", "constant"):
        raise ConfigError(f"unknown schedule {schedule!r}")
    rng = Rng(seed).child("convergence")
    lr_at = (lambda t: lr / math.sqrt(t)) if schedule == "inv_sqrt" else (lambda t: lr)
    if objective == "quadratic":
        norms, smooth = _run_quadratic(rng, steps, lr_at, sigma)
    elif objective == "transformer":
        norms, smooth = _run_transformer(rng, steps, lr_at, sigma, seed)
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    w = max(1, int(round(window * len(norms))))
    head, tail = float(norms[0]), float(np.mean(norms[-w:]))
    ratio = tail / head if np.isfinite(tail) and head > 0 else float("inf")
    return CheckRecord(f"convergence_{objective}", "trailing mean / initial gradient norm", threshold,
                       ratio, bool(ratio < threshold), steps, seed,
                       {"schedule": schedule, "lr": lr, "beta_smooth": smooth})


def _run_quadratic(rng: Rng, steps: int, lr_at, sigma: float):
    d = 10
    eig = np.linspace(0.5, 2.0, d)
    q, _ = np.linalg.qr(rng.child("basis").normal((d, d)))
    A = (q * eig) @ q.T
    theta = rng.child("init").normal((d,)) * 5.0
    norms = []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, steps + 1):
            xi = rng.child("xi", t).normal((d,))
            g = A @ (theta + sigma * xi)
            norms.append(float(np.linalg.norm(A @ theta)))
            theta = theta - lr_at(t) * g
    return np.nan_to_num(np.array(norms), nan=np.inf), float(eig.max())


def _run_transformer(rng: Rng, steps: int, lr_at, sigma: float, seed: int):
    train_r, _ = make_copy_task(8, 0, length=3, seed=seed)
    cfg = ModelConfig(n_layers=2, hidden_dim=32, n_heads=2, vocab_size=256, max_seq_len=96, lora_rank=0)
    model = TransformerModel(cfg, seed)
    model.set_finetune_mode("full")
    model.eval()
    batch = collate(train_r, cfg.max_seq_len)
    plan = NoisePlan(tuple(range(cfg.n_layers)), NoiseConfig(sigma_base=sigma), NoiseState())
    params = model.trainable_parameters()
    m = {k: np.zeros_like(p.data) for k, p in params.items()}
    v = {k: np.zeros_like(p.data) for k, p in params.items()}
    norms = []
    for t in range(1, steps + 1):
        model.zero_grad()
        trace = model.forward(batch.inputs, plan, rng.child("noise", t))
        T.backward(ce_loss(trace.logits, batch.targets, batch.mask))
        grads = {k: p.grad for k, p in params.items()}
        norms.append(float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))))
        for k, p in params.items():
            # Adam direction with a decaying step
            m[k] = 0.9 * m[k] + 0.1 * grads[k]
            v[k] = 0.999 * v[k] + 0.001 * grads[k] ** 2
            mh, vh = m[k] / (1 - 0.9**t), v[k] / (1 - 0.999**t)
            p.data = p.data - lr_at(t) * mh / (np.sqrt(vh) + 1e-8)
    return np.array(norms), float("nan")


# -- suite --------------------------------------------------------------------------


def run_all(seed: int = 0, quick: bool = False) -> VerificationReport:
    n = 10_000 if quick else 100_000
    report = VerificationReport()
    report.add(check_unbiasedness(n, 0.1, seed))
    report.add(check_variance(n, 0.1, seed))
    lip = report.add(check_lipschitz(2_000 if quick else 10_000, seed))
    report.add(check_gradient_stability(seed=seed, n_draws=4 if quick else 8))
    lb = report.add(check_loss_bound(n=8 if quick else 32, seed=seed))
    report.add(check_kl(seed=seed))
    conv = report.add(check_convergence("quadratic", seed=seed))
    report.symbols = {
        "sigma_max": float(max(lb.detail["sigma_max"])),
        "L_sigma": float(lip.detail["L_sigma"]),
        "C": float(lb.detail["C"]),
        "beta_smooth": float(conv.detail["beta_smooth"]),
    }
    return report


def record_dict(record: CheckRecord) -> dict:
    return asdict(record)
