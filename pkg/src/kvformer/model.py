"""Pre-norm transformer stacks built on :mod:`kvformer.attention`."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .attention import AttentionKind, AttentionLayer
from .exceptions import CapacityError, ConfigError
from .tensor import Tensor, no_grad

MODES = ("encoder", "causal_lm")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_len: int = 16
    attention: AttentionKind = AttentionKind("qkv")
    mode: str = "encoder"
    ffn_dim: int | None = None
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.vocab_size < 1 or self.d_model < 1 or self.n_heads < 1 or self.n_layers < 1 or self.max_len < 1:
            raise ConfigError("vocab_size, d_model, n_heads, n_layers and max_len must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)

    @property
    def causal(self) -> bool:
        return self.mode == "causal_lm"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = {"variant": self.attention.variant, "pos_dim": self.attention.pos_dim}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention"] = AttentionKind(**d["attention"])
        return cls(**d)


def sinusoidal_encoding(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((max_len, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe


class TransformerModel:
    """Token embedding + fixed sinusoidal positions + L pre-norm blocks + linear head.

    ``mode="encoder"`` predicts a label per input token with unmasked
    attention; ``mode="causal_lm"`` masks future positions.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0])))
        self._dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 1])))
        d, f, V = config.d_model, config.ffn_dim, config.vocab_size

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

        def const(value, *shape):
            return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

        self.tok_emb = normal(V, d)
        self.pos_enc = sinusoidal_encoding(config.max_len, d).astype(dtype)
        self.blocks = []
        for _ in range(config.n_layers):
            self.blocks.append({
                "ln1.gamma": const(1.0, d),
                "ln1.beta": const(0.0, d),
                "attn": AttentionLayer(
                    d, config.n_heads, config.attention, config.max_len,
                    causal=config.causal, dropout=config.dropout, rng=rng, dtype=dtype,
                ),
                "ln2.gamma": const(1.0, d),
                "ln2.beta": const(0.0, d),
                "ffn.w1": normal(d, f),
                "ffn.b1": const(0.0, f),
                "ffn.w2": normal(f, d),
                "ffn.b2": const(0.0, d),
            })
        self.ln_f = (const(1.0, d), const(0.0, d))
        self.head_w = normal(d, V)
        self.head_b = const(0.0, V)

    # -- parameters ------------------------------------------------------

    def named_parameters(self) -> dict:
        out = {"tok_emb": self.tok_emb}
        for i, blk in enumerate(self.blocks):
            for key, val in blk.items():
                if key == "attn":
                    for pname, p in val.params.items():
                        out[f"blocks.{i}.attn.{pname}"] = p
                else:
                    out[f"blocks.{i}.{key}"] = val
        out["ln_f.gamma"], out["ln_f.beta"] = self.ln_f
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def attention_layers(self) -> list:
        return [blk["attn"] for blk in self.blocks]

    def state_dict(self) -> dict:
        return {k: p.data for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(self.dtype, copy=True)
            p.grad = None

    def astype(self, dtype) -> "TransformerModel":
        """Copy of the model with every parameter cast to ``dtype``."""
        other = TransformerModel(self.config, dtype=dtype)
        other.load_state_dict(self.state_dict())
        return other

    # -- forward -----------------------------------------------------------

    def __call__(self, tokens, training: bool = False) -> Tensor:
        return forward(self, tokens, training=training)


def _block(x: Tensor, blk: dict, training: bool, rng) -> Tensor:
    cfg_drop = blk["attn"].dropout
    h = T.layer_norm(x, blk["ln1.gamma"], blk["ln1.beta"])
    h = blk["attn"](h, training=training, rng=rng)
    x = x + T.dropout(h, cfg_drop, rng, training)
    h = T.layer_norm(x, blk["ln2.gamma"], blk["ln2.beta"])
    h = T.relu(h @ blk["ffn.w1"] + blk["ffn.b1"])
    h = h @ blk["ffn.w2"] + blk["ffn.b2"]
    return x + T.dropout(h, cfg_drop, rng, training)


def check_tokens(model: TransformerModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, T], got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError(f"tokens must be integers, got {tokens.dtype}")
    V, n_max = model.config.vocab_size, model.config.max_len
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise IndexError(f"token ids must lie in [0, {V})")
    if tokens.shape[1] > n_max:
        raise CapacityError(f"sequence length {tokens.shape[1]} exceeds max_len {n_max}")
    return tokens


def forward(model: TransformerModel, tokens, training: bool = False) -> Tensor:
    """Logits ``[B, T, V]`` for integer ``tokens`` of shape ``[B, T]``."""
    tokens = check_tokens(model, tokens)
    n = tokens.shape[1]
    rng = model._dropout_rng if training else None
    x = T.gather_rows(model.tok_emb, tokens) + Tensor(model.pos_enc[:n])
    x = T.dropout(x, model.config.dropout, rng, training)
    for blk in model.blocks:
        x = _block(x, blk, training, rng)
    x = T.layer_norm(x, *model.ln_f)
    return x @ model.head_w + model.head_b


def param_count(model: TransformerModel) -> int:
    return model.param_count()


def generate(model: TransformerModel, prompt, steps: int, temperature: float = 0.0, seed: int = 0) -> np.ndarray:
    """Extend ``prompt`` by ``steps`` tokens; temperature 0 takes the argmax."""
    if model.config.mode != "causal_lm":
        raise ConfigError("generate() needs a causal_lm model")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    out = [int(t) for t in np.asarray(prompt).reshape(-1)]
    if not out:
        raise ValueError("prompt must be non-empty")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_max = model.config.max_len
    with no_grad():
        for _ in range(steps):
            ctx = np.array(out[-n_max:], dtype=np.int64)
            logits = forward(model, ctx).data[0, -1].astype(np.float64)
            if temperature == 0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            out.append(nxt)
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoints

_META_KEY = "__meta__"


def save_checkpoint(model: TransformerModel, path, **metadata):
    """Write parameters as a key->array ``.npz`` plus JSON metadata (config, vocab, ...)."""
    meta = {"config": model.config.to_dict(), "dtype": model.dtype.name, **metadata}
    arrays = dict(model.state_dict())
    arrays[_META_KEY] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(model, metadata)``."""
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz[_META_KEY]))
        state = {k: npz[k] for k in npz.files if k != _META_KEY}
    config = ModelConfig.from_dict(meta["config"])
    model = TransformerModel(config, dtype=meta.get("dtype", "float32"))
    model.load_state_dict(state)
    return model, meta


def with_attention(config: ModelConfig, kind: AttentionKind) -> ModelConfig:
    return replace(config, attention=kind)
