"""Tiny pre-norm decoder-only transformer with LoRA adapters on q/v.

Layer ``l``'s hidden state is the block output after its second residual
sum, i.e. the tensor handed to layer ``l + 1``.  Noise (when a plan lists
the layer) is injected at exactly that point, and the trace records the
post-injection tensor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .noise import NoisePlan, inject
from .tensor import Rng, Tensor

FINETUNE_MODES = ("peft", "full")
LORA_TARGETS = ("q", "v")
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_layers: int = 4
    hidden_dim: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 128
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    ffn_mult: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("n_layers", "hidden_dim", "n_heads", "vocab_size", "max_seq_len", "ffn_mult"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be >= 0")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


@dataclass
class ForwardTrace:
    hidden_states: list
    logits: Tensor
    attention_weights: list | None = None


class TransformerModel:
    """Parameters live in ``self.params`` (name -> Tensor), in a fixed order."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.training = False
        self.finetune_mode = "full"
        self.params: dict[str, Tensor] = {}
        rng = Rng(seed).child("init")
        H, V, F = config.hidden_dim, config.vocab_size, config.ffn_mult * config.hidden_dim
        std = config.init_std
        resid_std = std / np.sqrt(2 * config.n_layers)

        def normal(shape, scale, tag):
            return rng.child(tag).normal(shape) * scale

        self._add("embed.tok", normal((V, H), std, "tok"))
        self._add("embed.pos", normal((config.max_seq_len, H), std, "pos"))
        for l in range(config.n_layers):
            p = f"layers.{l}."
            self._add(p + "ln1.g", np.ones(H))
            self._add(p + "ln1.b", np.zeros(H))
            for proj in ("q", "k", "v"):
                self._add(p + f"attn.{proj}", normal((H, H), std, p + proj))
            self._add(p + "attn.o", normal((H, H), resid_std, p + "o"))
            self._add(p + "ln2.g", np.ones(H))
            self._add(p + "ln2.b", np.zeros(H))
            self._add(p + "ffn.w1", normal((H, F), std, p + "w1"))
            self._add(p + "ffn.b1", np.zeros(F))
            self._add(p + "ffn.w2", normal((F, H), resid_std, p + "w2"))
            self._add(p + "ffn.b2", np.zeros(H))
        self._add("final_ln.g", np.ones(H))
        self._add("final_ln.b", np.zeros(H))
        self._add("head", normal((H, V), std, "head"))
        self.lora_rank = 0
        self.lora_scale = 0.0
        self._init_seed = seed
        self.set_finetune_mode("full")

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), name=name)

    # -- parameter bookkeeping ---------------------------------------------------

    def is_lora(self, name: str) -> bool:
        return ".lora_" in name

    def set_finetune_mode(self, mode: str) -> None:
        """``peft`` trains only the adapters; ``full`` trains every weight."""
        if mode not in FINETUNE_MODES:
            raise ConfigError(f"finetune mode must be one of {FINETUNE_MODES}, got {mode!r}")
        self.finetune_mode = mode
        for name, p in self.params.items():
            p.requires_grad = mode == "full" or self.is_lora(name)
            if not p.requires_grad:
                p.grad = None

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def train(self, mode: bool = True) -> "TransformerModel":
        self.training = mode
        return self

    def eval(self) -> "TransformerModel":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise InputError(f"weight names do not match the model: {sorted(missing)}")
        for n, arr in arrays.items():
            if arr.shape != self.params[n].shape:
                raise InputError(f"weight {n}: shape {arr.shape} != {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    # -- forward ---------------------------------------------------------------------

    def _proj(self, x: Tensor, l: int, proj: str, dropout_rng: Rng | None) -> Tensor:
        name = f"layers.{l}.attn.{proj}"
        out = x @ self.params[name]
        a_name = name + ".lora_A"
        if a_name in self.params:
            xin = x
            p = self.config.lora_dropout
            if self.training and p > 0 and dropout_rng is not None:
                keep = dropout_rng.child(l, proj).uniform(x.shape) >= p
                xin = x * (keep / (1.0 - p))
            delta = (xin @ self.params[a_name]) @ self.params[name + ".lora_B"]
            out = out + delta * self.lora_scale
        return out

    def _attention(self, x: Tensor, l: int, dropout_rng, keep_attention: bool, sink: list):
        B, L, H = x.shape
        nh, hd = self.config.n_heads, self.config.head_dim
        p = f"layers.{l}.attn."

        def heads(t):
            return t.reshape(B, L, nh, hd).transpose(0, 2, 1, 3)

        q = heads(self._proj(x, l, "q", dropout_rng))
        k = heads(x @ self.params[p + "k"])
        v = heads(self._proj(x, l, "v", dropout_rng))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        att = T.softmax(T.masked_fill(scores, causal, MASK_VALUE), axis=-1)
        if keep_attention:
            sink.append(att.data.copy())
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, H)
        return out @ self.params[p + "o"]

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise InputError(f"tokens must be a nonempty B x L integer array, got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError("token ids must be integers")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(f"token id out of range [0, {self.config.vocab_size})")
        if tokens.shape[1] > self.config.max_seq_len:
            raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        return tokens.astype(np.int64)

    def forward(self, tokens, noise_plan: NoisePlan | None = None, rng: Rng | None = None, *,
                dropout_rng: Rng | None = None, keep_attention: bool = False) -> ForwardTrace:
        """Run the model; with a plan, perturb the listed layers' outputs using ``rng``."""
        tokens = self.check_tokens(tokens)
        B, L = tokens.shape
        if noise_plan is not None:
            bad = [i for i in noise_plan.layer_indices if i >= self.config.n_layers]
            if bad:
                raise ConfigError(f"noise plan layers {bad} exceed model depth {self.config.n_layers}")
            if noise_plan.active and rng is None:
                raise ConfigError("a noise plan needs an rng")
        P = self.params
        x = T.embedding(P["embed.tok"], tokens) + P["embed.pos"][np.arange(L)]
        hidden, attn = [], []
        for l in range(self.config.n_layers):
            pre = f"layers.{l}."
            h = T.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            x = x + self._attention(h, l, dropout_rng, keep_attention, attn)
            h = T.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            f = T.gelu(h @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"])
            x = x + (f @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"])
            if noise_plan is not None and l in noise_plan.layer_indices:
                x = inject(x, noise_plan.config, noise_plan.state, rng.child("noise", l) if rng else None,
                           reference_logits=noise_plan.reference_logits, layer=l)
            hidden.append(x)
        x = T.layer_norm(x, P["final_ln.g"], P["final_ln.b"])
        logits = x @ P["head"]
        return ForwardTrace(hidden, logits, attn if keep_attention else None)

    __call__ = forward


def loraify(model: TransformerModel, config: ModelConfig | None = None, seed: int = 0) -> TransformerModel:
    """Attach rank-r adapters (A small random, B zero) to the q and v projections.

    The model is switched to ``peft`` mode.  Rank 0 attaches nothing, which
    leaves every weight frozen.
    """
    config = config or model.config
    H, r = model.config.hidden_dim, int(config.lora_rank)
    if r > H:
        raise ConfigError(f"lora_rank {r} exceeds hidden_dim {H}")
    if r < 0:
        raise ConfigError("lora_rank must be >= 0")
    for name in [n for n in model.params if model.is_lora(n)]:
        del model.params[name]
    rng = Rng(seed).child("lora")
    for l in range(model.config.n_layers):
        if r == 0:
            break
        for proj in LORA_TARGETS:
            name = f"layers.{l}.attn.{proj}"
            a = rng.child(l, proj).normal((H, r)) / np.sqrt(H)
            model.params[name + ".lora_A"] = Tensor(a, name=name + ".lora_A")
            model.params[name + ".lora_B"] = Tensor(np.zeros((r, H)), name=name + ".lora_B")
    model.lora_rank = r
    model.lora_scale = float(config.lora_alpha) / r if r else 0.0
    model.config.lora_rank = r
    model.config.lora_alpha = float(config.lora_alpha)
    model.config.lora_dropout = float(config.lora_dropout)
    model.set_finetune_mode("peft")
    return model


def build_model(config: ModelConfig, seed: int = 0, mode: str = "peft") -> TransformerModel:
    model = loraify(TransformerModel(config, seed), config, seed)
    model.set_finetune_mode(mode)
    return model


def trainable_parameter_count(model: TransformerModel, include_alpha: bool = True) -> int:
    n = sum(p.size for p in model.trainable_parameters().values())
    return n + (1 if include_alpha else 0)


# -- generation ----------------------------------------------------------------------


@dataclass
class GenerationConfig:
    max_new_tokens: int = 50
    temperature: float = 0.5
    top_p: float = 0.9
    top_k: int = 40
    repetition_penalty: float = 1.2
    stop: bytes | None = field(default=b"<|im_end|>")

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0 (0 disables it)")
        if self.repetition_penalty <= 0:
            raise ConfigError("repetition_penalty must be > 0")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["stop"] = None if self.stop is None else self.stop.decode("utf-8")
        return d


def next_token_distribution(logits: np.ndarray, emitted: list[int], cfg: GenerationConfig) -> np.ndarray:
    """Temperature, repetition penalty, top-k, then top-p; returns probabilities."""
    z = np.asarray(logits, dtype=np.float64) / cfg.temperature
    if cfg.repetition_penalty != 1.0 and emitted:
        seen = np.unique(np.asarray(emitted, dtype=np.int64))
        vals = z[seen]
        z[seen] = np.where(vals > 0, vals / cfg.repetition_penalty, vals * cfg.repetition_penalty)
    V = z.size
    if 0 < cfg.top_k < V:
        kth = np.sort(z)[-cfg.top_k]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    if cfg.top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        n_keep = int(np.searchsorted(cum, cfg.top_p) + 1)
        keep = np.zeros(V, dtype=bool)
        keep[order[:n_keep]] = True
        p = np.where(keep, p, 0.0)
        p /= p.sum()
    return p


def generate(model: TransformerModel, prompt, gen_config: GenerationConfig | None = None,
             rng: Rng | None = None) -> list[int]:
    """Sample up to ``max_new_tokens`` continuation tokens (prompt excluded)."""
    cfg = gen_config or GenerationConfig()
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("generate needs a nonempty prompt")
    rng = rng or Rng(0)
    stop = list(cfg.stop) if cfg.stop else None
    was_training = model.training
    model.eval()
    out: list[int] = []
    try:
        with T.no_grad():
            for step in range(cfg.max_new_tokens):
                ctx = (prompt + out)[-model.config.max_seq_len:]
                logits = model.forward(np.array([ctx])).logits.data[0, -1]
                p = next_token_distribution(logits, out, cfg)
                if np.count_nonzero(p) == 1:
                    tok = int(np.argmax(p))
                else:
                    tok = rng.child("sample", step).choice(p.size, p)
                out.append(tok)
                if stop and out[-len(stop):] == stop:
                    break
    finally:
        model.train(was_training)
    return out


def greedy_generate_batch(model: TransformerModel, prompts: np.ndarray, max_new_tokens: int) -> np.ndarray:
    """Argmax decoding for equal-length prompts (B x L); returns B x max_new_tokens."""
    was_training = model.training
    model.eval()
    seq = np.asarray(prompts, dtype=np.int64)
    try:
        with T.no_grad():
            for _ in range(max_new_tokens):
                ctx = seq[:, -model.config.max_seq_len:]
                logits = model.forward(ctx).logits.data[:, -1]
                seq = np.concatenate([seq, logits.argmax(axis=-1)[:, None]], axis=1)
    finally:
        model.train(was_training)
    return seq[:, prompts.shape[1]:]
