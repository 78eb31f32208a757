"""Loss, optimizer, schedule and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .attention import CostReport, count_cost
from .exceptions import DivergenceError, NonFiniteError, ShapeError
from .model import ModelConfig, TransformerModel, forward
from .tasks import (
    LM_TASKS, SyntheticTask, batch_rng, build_number_corpus, lm_batch,
    load_char_corpus, synthetic_batch, train_val_split,
)
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = "step,split,loss,lr"
METRICS_CSV_HEADER = "task,variant,seed,token_acc,seq_acc,params,table1_flops"


def cross_entropy_loss(logits: Tensor, targets) -> Tensor:
    """Mean over all positions of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"targets must lie in [0, {V})")
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    with np.errstate(invalid="ignore", over="ignore"):
        # non-finite logits surface as a non-finite loss for the caller to handle
        z = z - z.max(axis=-1, keepdims=True)
        logsumexp = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(len(t))
    nll = logsumexp - z[rows, t]
    N = len(t)

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, t] -= 1.0
        return ((p * (g / N)).reshape(logits.shape).astype(logits.dtype),)

    return Tensor._from_op(np.asarray(nll.mean(), dtype=logits.dtype), (logits,), backward, "cross_entropy")


def cosine_warmup_lr(step: int, warmup: int, max_steps: int, base_lr: float) -> float:
    """``base_lr * 0.5 (1 + cos(pi step / max_steps))``, times ``step / warmup`` during warmup."""
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    factor = 0.5 * (1.0 + math.cos(math.pi * step / max_steps))
    if step < warmup:
        factor *= step / warmup
    return base_lr * factor


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads: list, max_norm: float) -> list:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
        raise NonFiniteError(f"non-finite gradient norm; offending gradient indices: {bad}")
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return [g * g.dtype.type(factor) for g in grads]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list, **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: list, grads: list, state: AdamState, lr: float):
    """Bias-corrected Adam update, in place on ``params[i].data``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype)
    return params, state


def evaluate_accuracy(model: TransformerModel, dataset: Iterable) -> tuple:
    """Token- and sequence-level argmax accuracy over ``(inputs, targets)`` batches."""
    correct = total = seq_ok = seqs = 0
    with no_grad():
        for x, y in dataset:
            pred = forward(model, x).data.argmax(axis=-1)
            hit = pred == np.asarray(y)
            correct += int(hit.sum())
            total += hit.size
            seq_ok += int(hit.all(axis=-1).sum())
            seqs += hit.shape[0]
    if total == 0:
        raise ValueError("evaluate_accuracy needs a non-empty dataset")
    return correct / total, seq_ok / seqs


def mean_loss(model: TransformerModel, dataset: Iterable) -> float:
    losses = []
    with no_grad():
        for x, y in dataset:
            losses.append(float(cross_entropy_loss(forward(model, x), y).item()))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# run orchestration


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seq_len: int = 16
    seed: int = 0
    corpus_path: str | None = None
    val_fraction: float = 0.9

    @property
    def is_lm(self) -> bool:
        return self.kind in LM_TASKS


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 5
    max_steps: int = 2000
    batch_size: int = 128
    grad_clip: float = 5.0
    seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 4
    test_batches: int = 10

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be > 0, or 0 to disable clipping")


@dataclass
class LossRecord:
    step: int
    split: str
    loss: float
    lr: float

    def csv_row(self) -> str:
        return f"{self.step},{self.split},{self.loss!r},{self.lr!r}"


@dataclass
class RunReport:
    task: str
    variant: str
    seed: int
    records: list = field(default_factory=list)
    token_acc: float | None = None
    seq_acc: float | None = None
    params: int = 0
    cost: CostReport | None = None
    attention: dict = field(default_factory=dict)
    steps_done: int = 0

    def metrics_row(self) -> str:
        return ",".join(str(v) for v in (
            self.task, self.variant, self.seed, repr(self.token_acc), repr(self.seq_acc),
            self.params, self.cost.table1_flops if self.cost else "",
        ))

    def losses(self, split: str = "train") -> list:
        return [r.loss for r in self.records if r.split == split]


class DataSource:
    """Train/validation/test batch streams for one task, fully determined by the seed."""

    def __init__(self, task: TaskSpec, batch_size: int, eval_batches: int, test_batches: int):
        self.task = task
        self.batch_size = batch_size
        seed = task.seed
        if task.is_lm:
            if task.kind == "numbers":
                corpus = build_number_corpus()
            else:
                if not task.corpus_path:
                    raise ValueError("the chars task needs a corpus path")
                corpus = load_char_corpus(task.corpus_path)
            self.corpus = corpus
            self.vocab_size = corpus.vocab_size
            self.train_ids, self.val_ids = (c.ids for c in train_val_split(corpus, task.val_fraction))
            self.val = [lm_batch(self.val_ids, task.seq_len, batch_size, batch_rng(seed, i, 1))
                        for i in range(eval_batches)]
            self.test = [lm_batch(self.val_ids, task.seq_len, batch_size, batch_rng(seed, i, 2))
                         for i in range(test_batches)]
        else:
            self.corpus = None
            self.synthetic = SyntheticTask(task.kind, task.seq_len)
            self.vocab_size = SyntheticTask.vocab_size
            self.val = [synthetic_batch(self.synthetic, batch_size, batch_rng(seed, i, 1))
                        for i in range(eval_batches)]
            self.test = [synthetic_batch(self.synthetic, batch_size, batch_rng(seed, i, 2))
                         for i in range(test_batches)]

    def train_batch(self, index: int):
        rng = batch_rng(self.task.seed, index, 0)
        if self.task.is_lm:
            return lm_batch(self.train_ids, self.task.seq_len, self.batch_size, rng)
        return synthetic_batch(self.synthetic, self.batch_size, rng)


def train_steps(
    model: TransformerModel,
    next_batch: Callable[[int], tuple],
    config: TrainConfig,
    on_record: Callable[[LossRecord], None] | None = None,
    val: list | None = None,
    records: list | None = None,
) -> list:
    """Run ``config.max_steps`` optimizer steps; return the loss records.

    A train record (and a val record when ``val`` is given) is emitted at
    step 0, every ``eval_interval`` steps, and after the final step. Raises
    :class:`DivergenceError` on a non-finite loss.
    """
    params = model.parameters()
    state = AdamState.for_params(params)
    records = [] if records is None else records

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    def log_point(step, train_loss, lr):
        emit(LossRecord(step, "train", train_loss, lr))
        if val:
            emit(LossRecord(step, "val", mean_loss(model, val), lr))

    for step in range(config.max_steps):
        x, y = next_batch(step)
        lr = cosine_warmup_lr(step, config.warmup_steps, config.max_steps, config.lr)
        model.zero_grad()
        with np.errstate(over="ignore", invalid="ignore"):
            # overflow shows up as a non-finite loss or gradient, reported below
            loss = cross_entropy_loss(forward(model, x, training=True), y)
        value = float(loss.item())
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}")
        if step % config.eval_interval == 0:
            log_point(step, value, lr)
        with np.errstate(over="ignore", invalid="ignore"):
            loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        if config.grad_clip > 0:
            try:
                grads = clip_grad_norm(grads, config.grad_clip)
            except NonFiniteError as e:
                raise DivergenceError(f"step {step}: {e}") from e
        adam_step(params, grads, state, lr)
    # final point: loss of the trained model on the next unseen batch
    x, y = next_batch(config.max_steps)
    final_lr = cosine_warmup_lr(config.max_steps, config.warmup_steps, config.max_steps, config.lr)
    log_point(config.max_steps, mean_loss(model, [(x, y)]), final_lr)
    return records


def train_run(
    model_config: ModelConfig,
    task: TaskSpec,
    config: TrainConfig,
    on_record: Callable[[LossRecord], None] | None = None,
    data: DataSource | None = None,
) -> tuple:
    """Train a fresh model on ``task``; return ``(model, RunReport)``."""
    if data is None:
        data = DataSource(task, config.batch_size, config.eval_batches, config.test_batches)
    if model_config.vocab_size != data.vocab_size:
        raise ValueError(
            f"model vocab_size {model_config.vocab_size} does not match task vocabulary {data.vocab_size}"
        )
    model = TransformerModel(model_config)
    report = RunReport(task.kind, model_config.attention.variant, config.seed)
    report.params = model.param_count()
    report.cost = count_cost(model_config.attention, task.seq_len, model_config.d_model, model_config.n_heads)
    try:
        train_steps(model, data.train_batch, config, on_record=on_record, val=data.val, records=report.records)
    except DivergenceError as e:
        e.report = report
        raise
    report.steps_done = config.max_steps
    report.token_acc, report.seq_acc = evaluate_accuracy(model, data.test)
    with no_grad():
        forward(model, data.test[0][0][:1])
    report.attention = {
        i: {"scores": layer.last_scores[0].copy(), "weights": layer.last_weights[0].copy()}
        for i, layer in enumerate(model.attention_layers())
    }
    log.info("%s/%s seed=%d token_acc=%.4f seq_acc=%.4f", task.kind, report.variant,
             config.seed, report.token_acc, report.seq_acc)
    return model, report
