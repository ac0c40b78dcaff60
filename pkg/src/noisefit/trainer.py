"""Training loop: SNR layer selection, clean + two noisy passes, hybrid loss, AdamW.

Randomness is keyed, not sequential: dropout and noise for micro-batch ``j``
of optimizer step ``s`` come from ``Rng(seed).child("step", s, j)``, and the
data order of epoch ``e`` from ``Rng(seed).child("shuffle", e)``.  Resuming
from a checkpoint therefore needs only the step counter to continue the
exact same trajectory.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetRecord, collate, decode, encode, epoch_batches, prompt_text, TURN_CLOSE
from .errors import CheckpointError, ConfigError, InputError, NumericError
from .io import append_line, atomic_write_text
from .model import TransformerModel, greedy_generate_batch
from .noise import NoiseConfig, NoisePlan, NoiseState, effective_sigma
from .objective import LossConfig, ce_loss, hybrid_objective
from .snr import SNR_MODES, SNRReport, profile
from .tensor import Rng

log = logging.getLogger(__name__)

OBJECTIVES = ("noisefit", "ce")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    schedule: str = "cosine"
    batch_size: int = 4
    grad_accum: int = 4
    clip_norm: float = 1.0
    epochs: int = 5
    max_steps: int = 1000
    k_layers: int = 3
    snr_mode: str = "highest"
    seed: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    finetune_mode: str = "peft"
    objective: str = "noisefit"
    profile_batches: int = 4
    profile_passes: int = 3
    reprofile_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "grad_accum", "clip_norm", "epochs", "max_steps", "k_layers",
                     "profile_batches", "profile_passes"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.snr_mode not in SNR_MODES:
            raise ConfigError(f"snr_mode must be one of {SNR_MODES}, got {self.snr_mode!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.finetune_mode not in ("peft", "full"):
            raise ConfigError(f"finetune_mode must be 'peft' or 'full', got {self.finetune_mode!r}")
        if self.weight_decay < 0 or self.reprofile_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("weight_decay, reprofile_every and checkpoint_every must be >= 0")


# -- schedule, clipping, optimizer ------------------------------------------------------


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    """``base_lr * 0.5 * (1 + cos(pi * step / total))``, no warmup."""
    if total <= 0:
        return base_lr
    s = min(max(step, 0), total)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * s / total))


def global_grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    norm = global_grad_norm(p.grad for p in params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def optimizer_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
                   weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One AdamW update for a single array; returns new (param, m, v).

    Decay is decoupled: ``param *= 1 - lr * weight_decay`` before the
    bias-corrected adaptive step.
    """
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient reached the optimizer")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    if weight_decay:
        param = param * (1.0 - lr * weight_decay)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, lr: float) -> None:
        self.t += 1
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            p.data, self.m[name], self.v[name] = optimizer_step(
                p.data, p.grad, m, v, self.t, lr, self.weight_decay, self.beta1, self.beta2, self.eps)


# -- state ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: TransformerModel
    noise_state: NoiseState
    optimizer: AdamW
    step: int = 0
    total_steps: int = 0
    seed: int = 0
    selected_layers: list = field(default_factory=list)
    snr_report: SNRReport | None = None
    metrics: list = field(default_factory=list)
    last_checkpoint: str | None = None
    best_checkpoint: str | None = None
    best_loss: float = math.inf

    def trainable(self) -> dict:
        params = dict(self.model.trainable_parameters())
        params["noise.alpha"] = self.noise_state.alpha
        return params


def steps_per_epoch(n_records: int, cfg: TrainConfig) -> int:
    n_batches = math.ceil(n_records / cfg.batch_size)
    return max(1, n_batches // cfg.grad_accum)


def total_steps(n_records: int, cfg: TrainConfig) -> int:
    return min(cfg.epochs * steps_per_epoch(n_records, cfg), cfg.max_steps)


def _config_meta(train_cfg, noise_cfg, loss_cfg) -> dict:
    # JSON round trip so tuples compare equal to what a checkpoint header holds
    return json.loads(json.dumps({"train": asdict(train_cfg), "noise": asdict(noise_cfg),
                                  "loss": asdict(loss_cfg)}))


def state_to_checkpoint(state: TrainState, train_cfg, noise_cfg, loss_cfg) -> tuple[dict, dict]:
    arrays = {f"model/{n}": a for n, a in state.model.state_arrays().items()}
    arrays["noise/alpha"] = state.noise_state.alpha.data
    for n in sorted(state.optimizer.m):
        arrays[f"opt/m/{n}"] = state.optimizer.m[n]
        arrays[f"opt/v/{n}"] = state.optimizer.v[n]
    meta = {
        "config": _config_meta(train_cfg, noise_cfg, loss_cfg),
        "model_config": asdict(state.model.config),
        "finetune_mode": state.model.finetune_mode,
        "step": state.step,
        "total_steps": state.total_steps,
        "optimizer_t": state.optimizer.t,
        "rng": Rng(state.seed).get_state(),
        "selected_layers": list(state.selected_layers),
        "snr_report": state.snr_report.to_dict() if state.snr_report else None,
        "metrics": state.metrics,
        "best_loss": state.best_loss if math.isfinite(state.best_loss) else None,
        "noise_gate": state.noise_state.noise_gate,
    }
    return meta, arrays


def checkpoint_save(state: TrainState, path, train_cfg, noise_cfg, loss_cfg) -> None:
    meta, arrays = state_to_checkpoint(state, train_cfg, noise_cfg, loss_cfg)
    save_checkpoint(path, meta, arrays)


def checkpoint_load(path, model: TransformerModel | None = None) -> tuple[TrainState, dict]:
    """Rebuild a TrainState; nothing is mutated unless the whole file decodes cleanly."""
    from .model import ModelConfig, TransformerModel as _TM

    meta, arrays = load_checkpoint(path)
    try:
        weights = {k[len("model/"):]: a for k, a in arrays.items() if k.startswith("model/")}
        if model is None:
            model = _TM(ModelConfig(**meta["model_config"]))
            for n, a in weights.items():
                if n not in model.params:
                    model.params[n] = T.Tensor(a, name=n)
            rank = meta["model_config"]["lora_rank"]
            model.lora_rank = rank
            model.lora_scale = meta["model_config"]["lora_alpha"] / rank if rank else 0.0
        model.load_arrays(weights)
        model.set_finetune_mode(meta["finetune_mode"])
        noise_state = NoiseState(alpha=float(arrays["noise/alpha"]), noise_gate=meta["noise_gate"])
        tc = meta["config"]["train"]
        opt = AdamW(tc["beta1"], tc["beta2"], tc["adam_eps"], tc["weight_decay"])
        opt.t = meta["optimizer_t"]
        for k, a in arrays.items():
            if k.startswith("opt/m/"):
                opt.m[k[len("opt/m/"):]] = a
            elif k.startswith("opt/v/"):
                opt.v[k[len("opt/v/"):]] = a
    except (KeyError, TypeError, ValueError, InputError) as exc:
        raise CheckpointError(f"checkpoint content invalid: {exc}") from None
    state = TrainState(model, noise_state, opt, meta["step"], meta["total_steps"], meta["rng"]["seed"],
                       list(meta["selected_layers"]),
                       SNRReport.from_dict(meta["snr_report"]) if meta["snr_report"] else None,
                       list(meta["metrics"]), str(path), None,
                       meta["best_loss"] if meta["best_loss"] is not None else math.inf)
    return state, meta


# -- training ------------------------------------------------------------------------


def calibration_batches(records, cfg: TrainConfig, max_seq_len: int) -> list[np.ndarray]:
    out = []
    for b in range(cfg.profile_batches):
        chunk = records[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        if not chunk:
            break
        out.append(collate(chunk, max_seq_len).inputs)
    return out


def _sigma_snapshot(model, batch, state: TrainState, noise_cfg: NoiseConfig) -> dict:
    snap = {}
    with T.no_grad():
        trace = model.forward(batch.inputs)
        for l in state.selected_layers:
            try:
                s = effective_sigma(trace.hidden_states[l], noise_cfg, state.noise_state,
                                    reference_logits=trace.logits.data).data
                snap[str(l)] = {"min": float(np.nanmin(s)), "mean": float(np.nanmean(s)),
                                "max": float(np.nanmax(s)), "finite": bool(np.all(np.isfinite(s)))}
            except Exception as exc:  # diagnostics only
                snap[str(l)] = {"error": str(exc)}
    return snap


def micro_batch_loss(state: TrainState, batch, train_cfg: TrainConfig, noise_cfg: NoiseConfig,
                     loss_cfg: LossConfig, rng: Rng):
    """Build the graph for one micro-batch; returns (root, component values)."""
    model = state.model
    dropout_rng = rng.child("dropout")
    clean = model.forward(batch.inputs, dropout_rng=dropout_rng)
    if train_cfg.objective == "ce":
        l_ce = ce_loss(clean.logits, batch.targets, batch.mask)
        v = float(l_ce.data)
        return l_ce, {"l_ce": v, "l_soft": 0.0, "l_consistency": 0.0, "l_hybrid": v, "l_final": v}
    ref = clean.logits.data if noise_cfg.eta_mode == "logits" else None
    plan = NoisePlan(tuple(state.selected_layers), noise_cfg, state.noise_state, reference_logits=ref)
    if plan.active:
        n1 = model.forward(batch.inputs, plan, rng.child("noise", 1), dropout_rng=dropout_rng)
        n2 = model.forward(batch.inputs, plan, rng.child("noise", 2), dropout_rng=dropout_rng)
    else:
        # zero noise scale: the noisy passes are the clean pass
        n1 = n2 = clean
    bundle = hybrid_objective(clean.logits, n1.logits, n2.logits, batch.targets, batch.mask, loss_cfg)
    return bundle.l_final, bundle.values()


def train(model: TransformerModel, dataset, train_config: TrainConfig, noise_config: NoiseConfig,
          loss_config: LossConfig, *, run_dir=None, resume_from=None, stop_after: int | None = None,
          noise_state: NoiseState | None = None) -> TrainState:
    """Fine-tune ``model`` on ``dataset`` (list of DatasetRecord).

    ``stop_after`` halts after that many total optimizer steps without
    changing the learning-rate schedule, which is how interrupted runs are
    simulated.  ``resume_from`` continues a run from a checkpoint file.
    """
    records: list[DatasetRecord] = list(dataset)
    if not records:
        raise InputError("training dataset is empty")
    cfg = train_config
    max_len = model.config.max_seq_len
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_path = run_dir / "metrics.jsonl" if run_dir else None

    if resume_from is not None:
        state, meta = checkpoint_load(resume_from, model)
        if meta["config"] != _config_meta(cfg, noise_config, loss_config):
            raise ConfigError("resume: checkpoint was written with a different configuration")
        if metrics_path is not None:
            atomic_write_text(metrics_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in state.metrics))
    else:
        model.set_finetune_mode(cfg.finetune_mode)
        state = TrainState(model, noise_state or NoiseState(), AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps,
                                                                     cfg.weight_decay),
                           0, total_steps(len(records), cfg), cfg.seed)
        if metrics_path is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            atomic_write_text(metrics_path, "")

    calib = calibration_batches(records, cfg, max_len)

    def reprofile(step):
        report = profile(model, calib, noise_config, cfg.profile_passes, k=cfg.k_layers, mode=cfg.snr_mode,
                         seed=cfg.seed + step)
        state.snr_report = report
        state.selected_layers = list(report.selected)
        if run_dir is not None:
            atomic_write_text(run_dir / "snr_report.txt", report.to_text())
        log.info("selected layers %s (%s SNR)", state.selected_layers, cfg.snr_mode)

    if cfg.objective == "noisefit" and state.snr_report is None:
        reprofile(0)

    spe = steps_per_epoch(len(records), cfg)
    end = state.total_steps if stop_after is None else min(state.total_steps, stop_after)
    root = Rng(cfg.seed)
    params = state.trainable()
    model.train()
    cached_epoch, batches = None, None
    try:
        while state.step < end:
            step = state.step
            if cfg.objective == "noisefit" and cfg.reprofile_every and step and step % cfg.reprofile_every == 0:
                reprofile(step)
            epoch, within = divmod(step, spe)
            if epoch != cached_epoch:
                batches = epoch_batches(records, cfg.batch_size, cfg.seed, epoch, max_len)
                cached_epoch = epoch
            micro = batches[within * cfg.grad_accum:(within + 1) * cfg.grad_accum]
            lr = cosine_lr(step, state.total_steps, cfg.lr) if cfg.schedule == "cosine" else cfg.lr
            state.noise_state.noise_gate = noise_config.gate_at(step, state.total_steps)
            for p in params.values():
                p.grad = None
            sums: dict[str, float] = {}
            for j, batch in enumerate(micro):
                try:
                    loss, values = micro_batch_loss(state, batch, cfg, noise_config, loss_config,
                                                    root.child("step", step, j))
                except NumericError as exc:
                    _abort(state, run_dir, batch, noise_config, step, j, {}, str(exc))
                if not math.isfinite(values["l_final"]):
                    _abort(state, run_dir, batch, noise_config, step, j, values, "non-finite loss")
                T.backward(loss * (1.0 / len(micro)))
                for k, v in values.items():
                    sums[k] = sums.get(k, 0.0) + v
            grad_norm = clip_grad_norm(params.values(), cfg.clip_norm)
            if not math.isfinite(grad_norm):
                _abort(state, run_dir, micro[-1], noise_config, step, len(micro) - 1, sums,
                       "non-finite gradient norm")
            state.optimizer.step(params, lr)
            state.step += 1
            row = {k: v / len(micro) for k, v in sums.items()}
            row.update({
                "step": state.step, "lr": lr, "grad_norm": grad_norm,
                "selected_layers": list(state.selected_layers), "sigma_base": noise_config.sigma_base,
                "alpha": float(state.noise_state.alpha.data), "noise_gate": state.noise_state.noise_gate,
                "eta_mode": noise_config.eta_mode, "eta_clamp": list(noise_config.eta_clamp),
            })
            state.metrics.append(row)
            if metrics_path is not None:
                append_line(metrics_path, json.dumps(row, sort_keys=True))
            if run_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                _write_checkpoints(state, run_dir, cfg, noise_config, loss_config)
    finally:
        model.eval()
        for p in params.values():
            p.grad = None
    if run_dir is not None:
        _write_checkpoints(state, run_dir, cfg, noise_config, loss_config)
    return state


def _abort(state, run_dir, batch, noise_cfg, step, micro_batch, values, reason):
    """Write a diagnostic snapshot (step, per-layer sigma_eff stats) and raise."""
    snap = _sigma_snapshot(state.model, batch, state, noise_cfg)
    if run_dir is not None:
        atomic_write_text(run_dir / "diagnostic.json",
                          json.dumps({"step": step, "micro_batch": micro_batch, "reason": reason, "values": values,
                                      "sigma_eff": snap}, indent=2, default=str))
    raise NumericError(f"{reason} at step {step}, micro-batch {micro_batch}: {values}; "
                       f"sigma_eff by layer: {snap}")


def _write_checkpoints(state, run_dir, cfg, noise_cfg, loss_cfg):
    path = run_dir / "last.ckpt"
    recent = [r["l_final"] for r in state.metrics[-10:]]
    score = float(np.mean(recent)) if recent else math.inf
    if score < state.best_loss:
        state.best_loss = score
        checkpoint_save(state, run_dir / "best.ckpt", cfg, noise_cfg, loss_cfg)
        state.best_checkpoint = str(run_dir / "best.ckpt")
    checkpoint_save(state, path, cfg, noise_cfg, loss_cfg)
    state.last_checkpoint = str(path)


def exact_match(model: TransformerModel, records, batch_size: int = 64) -> float:
    """Fraction of records whose greedy continuation (up to the turn close) equals the response."""
    close = TURN_CLOSE
    hits = 0
    groups: dict[int, list] = {}
    for r in records:
        groups.setdefault(len(encode(prompt_text(r.prompt))), []).append(r)
    for n, group in groups.items():
        for s in range(0, len(group), batch_size):
            chunk = group[s:s + batch_size]
            prompts = np.array([encode(prompt_text(r.prompt)) for r in chunk])
            budget = max(len(encode(r.response)) for r in chunk) + len(close)
            budget = min(budget, model.config.max_seq_len - n)
            out = greedy_generate_batch(model, prompts, budget)
            for r, ids in zip(chunk, out):
                text = decode(ids).split(close)[0]
                hits += text == r.response
    return hits / len(records)
