"""scikit-learn compatible wrappers.

``SequenceTransformerClassifier`` labels every position of fixed-length
integer sequences (the digit-list tasks). ``CharLanguageModel`` fits a causal
character model on raw text and samples from it.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .attention import AttentionKind
from .model import ModelConfig, TransformerModel, forward, generate
from .tasks import batch_rng, char_tokenize, lm_batch, train_val_split
from .tensor import no_grad
from .training import TrainConfig, evaluate_accuracy, mean_loss, train_steps
from .validation import check_sequences, check_text


def _train_config(est, max_steps) -> TrainConfig:
    return TrainConfig(
        lr=est.lr, warmup_steps=est.warmup_steps, max_steps=max_steps,
        batch_size=est.batch_size, grad_clip=est.grad_clip, seed=est.random_state,
        eval_interval=est.eval_interval,
    )


class SequenceTransformerClassifier(ClassifierMixin, BaseEstimator):
    """Per-token classifier over integer sequences.

    ``X`` and ``y`` are integer arrays of shape ``(n_samples, seq_len)``.
    Training draws ``batch_size`` rows with replacement per step, for
    ``max_steps`` steps.

    Parameters
    ----------
    attention : {"qkv", "kv", "kvpos"}
    pos_dim : int
        Table depth for ``kvpos``; ignored otherwise.
    vocab_size : int or None
        Number of input/output symbols; inferred from the data when None.
    """

    def __init__(self, attention="qkv", pos_dim=10, d_model=64, n_heads=2, n_layers=2,
                 ffn_dim=None, dropout=0.0, lr=1e-3, warmup_steps=5, max_steps=2000,
                 batch_size=128, grad_clip=5.0, eval_interval=100, vocab_size=None,
                 random_state=0):
        self.attention = attention
        self.pos_dim = pos_dim
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.eval_interval = eval_interval
        self.vocab_size = vocab_size
        self.random_state = random_state

    def _kind(self):
        return AttentionKind.from_name(self.attention, self.pos_dim)

    def fit(self, X, y):
        X = check_sequences(X, vocab_size=self.vocab_size)
        y = check_sequences(y, vocab_size=self.vocab_size, name="y")
        if X.shape != y.shape:
            raise ValueError(f"X {X.shape} and y {y.shape} must have the same shape")
        V = self.vocab_size or int(max(X.max(), y.max())) + 1
        self.classes_ = np.arange(V)
        self.n_features_in_ = X.shape[1]
        cfg = ModelConfig(
            vocab_size=V, d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
            max_len=X.shape[1], attention=self._kind(), mode="encoder",
            ffn_dim=self.ffn_dim, dropout=self.dropout, seed=self.random_state,
        )
        self.model_ = TransformerModel(cfg)
        n, seed, bs = len(X), self.random_state, self.batch_size

        def next_batch(step):
            rows = batch_rng(seed, step).integers(0, n, size=bs)
            return X[rows], y[rows]

        self.loss_curve_ = train_steps(self.model_, next_batch, _train_config(self, self.max_steps))
        return self

    def _checked(self, X):
        check_is_fitted(self, "model_")
        X = check_sequences(X, vocab_size=len(self.classes_))
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} positions; the model was fitted on {self.n_features_in_}")
        return X

    def predict_proba(self, X):
        X = self._checked(X)
        with no_grad():
            z = forward(self.model_, X).data.astype(np.float64)
        z = np.exp(z - z.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def predict(self, X):
        X = self._checked(X)
        with no_grad():
            return forward(self.model_, X).data.argmax(axis=-1)

    def score(self, X, y, sample_weight=None):
        """Token accuracy."""
        X = self._checked(X)
        y = check_sequences(y, vocab_size=len(self.classes_), name="y")
        return evaluate_accuracy(self.model_, [(X, y)])[0]

    def attention_weights(self, X, layer=-1):
        """Post-softmax weights ``(n_samples, n_heads, T, T)`` of one layer."""
        X = self._checked(X)
        with no_grad():
            forward(self.model_, X)
        return self.model_.attention_layers()[layer].last_weights.copy()


class CharLanguageModel(BaseEstimator):
    """Causal character-level model trained on one text string."""

    def __init__(self, attention="qkv", pos_dim=20, context=64, d_model=64, n_heads=4,
                 n_layers=2, ffn_dim=None, dropout=0.2, lr=5e-4, warmup_steps=5,
                 max_steps=1000, batch_size=64, grad_clip=5.0, eval_interval=100,
                 eval_batches=4, val_fraction=0.9, random_state=0):
        self.attention = attention
        self.pos_dim = pos_dim
        self.context = context
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.eval_interval = eval_interval
        self.eval_batches = eval_batches
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, text, y=None):
        text = check_text(text)
        corpus = char_tokenize(text)
        train, val = train_val_split(corpus, self.val_fraction)
        self.vocab_ = corpus.vocab
        self._index = corpus.index
        cfg = ModelConfig(
            vocab_size=corpus.vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            n_layers=self.n_layers, max_len=self.context,
            attention=AttentionKind.from_name(self.attention, self.pos_dim), mode="causal_lm",
            ffn_dim=self.ffn_dim, dropout=self.dropout, seed=self.random_state,
        )
        self.model_ = TransformerModel(cfg)
        seed, ctx, bs = self.random_state, self.context, self.batch_size
        self.val_batches_ = [lm_batch(val.ids, ctx, bs, batch_rng(seed, i, 1)) for i in range(self.eval_batches)]
        self.loss_curve_ = train_steps(
            self.model_, lambda step: lm_batch(train.ids, ctx, bs, batch_rng(seed, step)),
            _train_config(self, self.max_steps), val=self.val_batches_,
        )
        return self

    def encode(self, text) -> np.ndarray:
        check_is_fitted(self, "model_")
        try:
            return np.array([self._index[c] for c in text], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} was not seen during fit") from None

    def decode(self, ids) -> str:
        return "".join(self.vocab_[int(i)] for i in ids)

    def generate(self, prompt: str, steps: int = 200, temperature: float = 0.0, seed: int = 0) -> str:
        ids = generate(self.model_, self.encode(prompt), steps, temperature, seed=seed)
        return self.decode(ids)

    def score(self, text, y=None):
        """Negative mean next-character cross-entropy over windows of ``text``."""
        ids = self.encode(check_text(text))
        ctx = min(self.context, len(ids) - 1)
        if ctx < 1:
            raise ValueError("text needs at least two characters")
        starts = np.arange(0, len(ids) - ctx, ctx)
        x = np.stack([ids[s:s + ctx] for s in starts])
        t = np.stack([ids[s + 1:s + ctx + 1] for s in starts])
        return -mean_loss(self.model_, [(x, t)])

    def validation_loss(self) -> float:
        check_is_fitted(self, "model_")
        return mean_loss(self.model_, self.val_batches_)


__all__ = ["SequenceTransformerClassifier", "CharLanguageModel"]
