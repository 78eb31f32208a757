"""Flat ``key=value`` run configuration.

Lines look like ``d_model = 64``; ``#`` starts a comment. Command-line
overrides win over file values, which win over the chosen ``preset``,
which wins over the built-in defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionKind
from .exceptions import ConfigError
from .model import ModelConfig
from .tasks import LM_TASKS, SYNTHETIC_TASKS
from .training import TaskSpec, TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _variants(text: str) -> tuple:
    names = tuple(AttentionKind.from_name(t, 1).variant for t in text.split(",") if t.strip())
    if not names:
        raise ValueError("empty attention list")
    return names


# key -> (parser, default, description)
KEYS = {
    "preset": (str, "", "synthetic | charlm | numbers; fills in the matching recipe"),
    "task": (str, "copy", "reverse | sort | swap | sub | copy | numbers | chars"),
    "seq_len": (int, 16, "sequence length (context length for LM tasks)"),
    "max_len": (int, 0, "model capacity N_max; 0 means seq_len"),
    "attention": (_variants, ("qkv", "kv", "kvpos"), "comma-separated variants to sweep"),
    "pos_dim": (int, 10, "depth m of the kvpos positional table"),
    "d_model": (int, 64, "embedding dimension"),
    "n_heads": (int, 2, "attention heads"),
    "n_layers": (int, 2, "transformer blocks"),
    "ffn_dim": (int, 0, "feed-forward width; 0 means 4 * d_model"),
    "dropout": (float, 0.0, "dropout rate"),
    "lr": (float, 1e-3, "peak learning rate"),
    "warmup_steps": (int, 5, "linear warmup steps"),
    "epochs": (int, 2, "epochs; max_steps = epochs * batches_per_epoch unless max_steps is set"),
    "batches_per_epoch": (int, 1000, "batches per epoch"),
    "max_steps": (int, 0, "optimizer steps; 0 derives it from epochs"),
    "batch_size": (int, 0, "batch size; 0 means 128 for synthetic tasks and 64 for LM tasks"),
    "grad_clip": (float, 5.0, "global gradient-norm clip; 0 disables"),
    "seed": (int, 0, "seed for initialization, data and dropout"),
    "eval_interval": (int, 100, "steps between loss log points"),
    "eval_batches": (int, 4, "validation batches per log point"),
    "test_batches": (int, 10, "held-out batches for final accuracy"),
    "val_fraction": (float, 0.9, "training share of an LM corpus"),
    "corpus": (str, "", "text file for the chars task"),
    "out_dir": (str, "runs", "output directory"),
    "attn_all": (_bool, False, "export attention maps for every layer and head"),
    "checkpoint": (_bool, True, "save model.npz per run"),
}

PRESETS = {
    "synthetic": {},
    "charlm": {
        "task": "chars", "seq_len": 64, "d_model": 64, "n_layers": 2, "n_heads": 4,
        "dropout": 0.2, "lr": 5e-4, "pos_dim": 20, "max_steps": 1000, "batch_size": 64,
    },
    "numbers": {
        "task": "numbers", "seq_len": 16, "d_model": 64, "n_layers": 4, "n_heads": 8,
        "pos_dim": 10, "lr": 1e-3, "batch_size": 64,
    },
}


def _format(key: str, value) -> str:
    if key == "attention":
        return ",".join(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_text(text: str, origin: str = "<config>") -> dict:
    """Parse ``key=value`` lines into raw strings."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def _convert(key: str, value):
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}")
    if not isinstance(value, str):
        return value
    try:
        return KEYS[key][0](value)
    except (TypeError, ValueError, ConfigError) as e:
        raise ConfigError(f"cannot parse {key}={value!r}: {e}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    @property
    def is_lm(self) -> bool:
        return self.task in LM_TASKS

    @property
    def steps(self) -> int:
        return self.max_steps or self.epochs * self.batches_per_epoch

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size or (64 if self.is_lm else 128)

    def validate(self):
        v = self.values
        if v["preset"] and v["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {v['preset']!r}; expected one of {sorted(PRESETS)}")
        if v["task"] not in SYNTHETIC_TASKS + LM_TASKS:
            raise ConfigError(f"unknown task {v['task']!r}")
        for key in ("seq_len", "d_model", "n_heads", "n_layers", "warmup_steps", "eval_interval", "test_batches"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        for key in ("max_len", "ffn_dim", "max_steps", "batch_size", "eval_batches", "epochs", "batches_per_epoch"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {v[key]}")
        if self.steps < 1:
            raise ConfigError("training needs at least one step (epochs * batches_per_epoch or max_steps)")
        if v["task"] == "swap" and v["seq_len"] % 2:
            raise ConfigError(
                f"task=swap needs an even seq_len (swap exchanges two equal halves); got seq_len={v['seq_len']}"
            )
        if v["d_model"] % v["n_heads"]:
            raise ConfigError(f"d_model={v['d_model']} is not divisible by n_heads={v['n_heads']}")
        if "kvpos" in v["attention"] and v["pos_dim"] < 1:
            raise ConfigError("pos_dim must be >= 1 when attention includes kvpos")
        if v["max_len"] and v["max_len"] < v["seq_len"]:
            raise ConfigError(f"max_len={v['max_len']} is shorter than seq_len={v['seq_len']}")
        if not 0.0 <= v["dropout"] < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {v['dropout']}")
        if not 0.0 < v["val_fraction"] < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {v['val_fraction']}")
        if v["lr"] <= 0:
            raise ConfigError("lr must be positive")
        if v["grad_clip"] < 0:
            raise ConfigError("grad_clip must be >= 0")
        if v["task"] == "chars" and not v["corpus"]:
            raise ConfigError("task=chars needs corpus=<path to a text file>")
        return self

    # -- derived objects -----------------------------------------------------

    def attention_kinds(self) -> list:
        return [AttentionKind.from_name(name, self.pos_dim) for name in self.attention]

    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task, self.seq_len, seed=self.seed,
                        corpus_path=self.corpus or None, val_fraction=self.val_fraction)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, warmup_steps=self.warmup_steps, max_steps=self.steps,
            batch_size=self.effective_batch_size, grad_clip=self.grad_clip, seed=self.seed,
            eval_interval=self.eval_interval, eval_batches=self.eval_batches,
            test_batches=self.test_batches,
        )

    def model_config(self, kind: AttentionKind, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            n_layers=self.n_layers, max_len=self.max_len or self.seq_len, attention=kind,
            mode="causal_lm" if self.is_lm else "encoder", ffn_dim=self.ffn_dim or None,
            dropout=self.dropout, seed=self.seed,
        )

    def run_name(self, kind: AttentionKind) -> str:
        return f"{self.task}-{kind.variant}-seed{self.seed}"

    def for_variant(self, variant: str) -> "RunConfig":
        values = dict(self.values)
        values["attention"] = (variant,)
        return RunConfig(values)

    def to_text(self) -> str:
        lines = [f"{key} = {_format(key, self.values[key])}" for key in KEYS]
        return "\n".join(lines) + "\n"


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve a :class:`RunConfig` from an optional file plus overrides."""
    file_raw = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        file_raw = parse_text(text, str(path))
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")

    preset = _convert("preset", overrides.get("preset", file_raw.get("preset", "")))
    if preset and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    values = {key: spec[1] for key, spec in KEYS.items()}
    values.update(PRESETS.get(preset, {}))
    for source in (file_raw, overrides):
        for key, value in source.items():
            values[key] = _convert(key, value)
    values["preset"] = preset
    return RunConfig(values).validate()

