"""Data sources: five digit-list tasks, the spelled-number corpus, character corpora."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError

SYNTHETIC_TASKS = ("reverse", "sort", "swap", "sub", "copy")
LM_TASKS = ("numbers", "chars")
DIGITS = 10

ONES = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
TEENS = ("ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
         "seventeen", "eighteen", "nineteen")
TENS = ("twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety")
SEPARATOR = "."
NUMBER_VOCAB = (SEPARATOR,) + ONES + TEENS + TENS + ("hundred", "thousand")


def batch_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator for one batch, derived from (seed, stream, index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, index])))


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    seq_len: int

    def __post_init__(self):
        if self.kind not in SYNTHETIC_TASKS:
            raise ConfigError(f"unknown synthetic task {self.kind!r}; expected one of {SYNTHETIC_TASKS}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        if self.kind == "swap" and self.seq_len % 2:
            raise ConfigError(
                f"swap exchanges two equal halves, so seq_len must be even (got {self.seq_len})"
            )

    vocab_size = DIGITS


def transform(kind: str, x: np.ndarray) -> np.ndarray:
    """Apply a task's target map along the last axis of ``x``."""
    if kind == "reverse":
        return x[..., ::-1].copy()
    if kind == "sort":
        return np.sort(x, axis=-1)
    if kind == "swap":
        n = x.shape[-1]
        if n % 2:
            raise ConfigError(f"swap needs an even length, got {n}")
        return np.roll(x, n // 2, axis=-1)
    if kind == "sub":
        return 9 - x
    if kind == "copy":
        return x.copy()
    raise ConfigError(f"unknown synthetic task {kind!r}")


def gen_synthetic(task: SyntheticTask, rng: np.random.Generator):
    """One ``(input, target)`` pair of digit lists."""
    x = rng.integers(0, DIGITS, size=task.seq_len)
    return x, transform(task.kind, x)


def synthetic_batch(task: SyntheticTask, batch_size: int, rng: np.random.Generator):
    x = rng.integers(0, DIGITS, size=(batch_size, task.seq_len))
    return x, transform(task.kind, x)


# ---------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    ids: np.ndarray
    vocab: list
    source: str = ""
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocabulary contains duplicates")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= len(self.vocab)):
            raise ValueError("token id outside the vocabulary")
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    def __len__(self):
        return len(self.ids)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, tokens) -> np.ndarray:
        try:
            return np.array([self.index[t] for t in tokens], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"token {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> list:
        return [self.vocab[int(i)] for i in ids]

    def detokenize(self, ids) -> str:
        sep = "" if self.source.startswith("chars") else " "
        return sep.join(self.decode(ids))


def number_to_words(n: int) -> list:
    """Spell 1..9999 in lowercase words, without "and" or hyphens."""
    if not 1 <= n <= 9999:
        raise ValueError(f"number_to_words covers 1..9999, got {n}")
    words = []
    thousands, rest = divmod(n, 1000)
    if thousands:
        words += [ONES[thousands - 1], "thousand"]
    hundreds, rest = divmod(rest, 100)
    if hundreds:
        words += [ONES[hundreds - 1], "hundred"]
    if 10 <= rest <= 19:
        words.append(TEENS[rest - 10])
    else:
        tens, ones = divmod(rest, 10)
        if tens:
            words.append(TENS[tens - 2])
        if ones:
            words.append(ONES[ones - 1])
    return words


def build_number_corpus(start: int = 1, stop: int = 9999) -> Corpus:
    """Every number from ``start`` to ``stop`` spelled out, each followed by '.'."""
    vocab = list(NUMBER_VOCAB)
    index = {w: i for i, w in enumerate(vocab)}
    sep = index[SEPARATOR]
    ids = []
    for n in range(start, stop + 1):
        ids.extend(index[w] for w in number_to_words(n))
        ids.append(sep)
    return Corpus(np.array(ids, dtype=np.int64), vocab, source="numbers")


def char_tokenize(text: str) -> Corpus:
    if not text:
        raise ValueError("cannot tokenize empty text")
    vocab = sorted(set(text))
    index = {c: i for i, c in enumerate(vocab)}
    ids = np.fromiter((index[c] for c in text), dtype=np.int64, count=len(text))
    return Corpus(ids, vocab, source="chars")


def load_char_corpus(path) -> Corpus:
    text = Path(path).read_text(encoding="utf-8")
    corpus = char_tokenize(text)
    corpus.source = f"chars:{path}"
    return corpus


def train_val_split(corpus: Corpus, fraction: float = 0.9):
    """Contiguous prefix/suffix split of the token stream."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    cut = int(len(corpus) * fraction)
    if cut == 0 or cut == len(corpus):
        raise ValueError(f"fraction {fraction} leaves one side of a {len(corpus)}-token corpus empty")
    train = Corpus(corpus.ids[:cut], corpus.vocab, corpus.source)
    val = Corpus(corpus.ids[cut:], corpus.vocab, corpus.source)
    return train, val


def lm_batch(ids: np.ndarray, context: int, batch_size: int, rng: np.random.Generator):
    """Random windows ``x = ids[i:i+context]`` and next-token targets ``y``."""
    if len(ids) <= context:
        raise ValueError(f"corpus of {len(ids)} tokens is too short for context {context}")
    starts = rng.integers(0, len(ids) - context, size=batch_size)
    offsets = np.arange(context)
    x = ids[starts[:, None] + offsets]
    y = ids[starts[:, None] + offsets + 1]
    return x, y
